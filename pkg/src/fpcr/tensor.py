"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a row-major numpy array (float32 for training, float64 for
gradient-check builds). Gradients are recorded on an explicit Tape: leaf
parameters are registered with ``tape.watch``, every primitive applied to a
watched value appends one node, and ``tape.backward(loss)`` walks the node
list once in reverse. A tape can be consumed exactly once.

The primitive set is closed and enumerated in ``PRIMITIVES``. Broadcasting
is restricted: elementwise ops accept identical shapes, a scalar operand,
a per-row column (M,1) against (M,C), or a trailing bias (C,) / (1,C).
"""

from __future__ import annotations

import numpy as np
from scipy.special import expit

from .errors import ShapeError, TapeError

INSTNORM_EPS = 1e-5

PRIMITIVES = (
    "matmul",
    "add",
    "mul",
    "sin",
    "sigmoid",
    "concat",
    "slice",
    "conv2d",
    "avgpool2",
    "upsample2",
    "instnorm",
    "sum",
    "mean",
    "square",
    "log",
    "leaky_relu",
    "gather",
    "scatter",
    "reshape",
)


class Parameter:
    """Named trainable array. Modules hold Parameters; tapes watch them."""

    __slots__ = ("name", "data")

    def __init__(self, name: str, data: np.ndarray):
        self.name = name
        self.data = np.ascontiguousarray(data)

    def __repr__(self):
        return f"Parameter({self.name!r}, shape={self.data.shape})"


class Node:
    """One recorded primitive application: inputs, and a pullback closure."""

    __slots__ = ("inputs", "pullback", "out_shape")

    def __init__(self, inputs, pullback, out_shape):
        self.inputs = inputs  # tuple of Node or None (constants)
        self.pullback = pullback  # grad_out -> tuple of grads per input
        self.out_shape = out_shape


class Tape:
    """Topologically ordered record of primitive applications.

    Nodes are appended in forward (creation) order, so the list itself is a
    valid topological order and backward is a single reversed pass. A tape is
    linear: ``backward`` may run exactly once.
    """

    def __init__(self):
        self._nodes: list[Node] = []
        self._watched: dict[int, Tensor] = {}
        self._params: list[Parameter] = []
        self._grads: dict[int, np.ndarray] | None = None
        self.consumed = False

    def watch(self, param: Parameter) -> "Tensor":
        """Register a parameter as a differentiable leaf (idempotent)."""
        key = id(param)
        if key not in self._watched:
            leaf = Tensor(param.data, _node=Node((), None, param.data.shape), _tape=self)
            self._nodes.append(leaf.node)
            self._watched[key] = leaf
            self._params.append(param)
        return self._watched[key]

    def backward(self, loss: "Tensor") -> dict[Parameter, np.ndarray]:
        """Reverse-mode pass from a scalar loss to every watched parameter.

        Unreachable parameters receive zero gradients. Raises TapeError on a
        second call or a non-scalar loss; raises NumericError upstream if the
        caller requires a finite loss (this method checks it too).
        """
        if self.consumed:
            raise TapeError("tape already consumed; re-record the forward pass")
        if loss.tape is not self:
            raise TapeError("loss was not recorded on this tape")
        if loss.data.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.data.shape}")
        if not np.all(np.isfinite(loss.data)):
            from .errors import NumericError

            raise NumericError("loss is not finite")
        self.consumed = True

        grads: dict[int, np.ndarray] = {id(loss.node): np.ones_like(loss.data)}
        for node in reversed(self._nodes):
            g = grads.pop(id(node), None)
            if g is None or node.pullback is None:
                if g is not None and node.pullback is None:
                    grads[id(node)] = g  # leaf: keep for lookup below
                continue
            for inp, ig in zip(node.inputs, node.pullback(g)):
                if inp is None or ig is None:
                    continue
                acc = grads.get(id(inp))
                grads[id(inp)] = ig if acc is None else acc + ig

        self._grads = {}
        out: dict[Parameter, np.ndarray] = {}
        for param in self._params:
            leaf = self._watched[id(param)]
            g = grads.get(id(leaf.node))
            if g is None:
                g = np.zeros_like(param.data)
            self._grads[id(param)] = g
            out[param] = g
        return out

    def grad(self, param: Parameter) -> np.ndarray:
        if self._grads is None:
            raise TapeError("backward has not run on this tape")
        return self._grads[id(param)]


class Tensor:
    """Shaped numeric array, optionally attached to a gradient tape."""

    __slots__ = ("data", "node", "tape")

    def __init__(self, data, dtype=None, _node=None, _tape=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        if arr.ndim:  # ascontiguousarray would promote 0-d to 1-d
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.node = _node
        self.tape = _tape

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"

    # -- operator sugar over the primitive set ---------------------------
    def __add__(self, other):
        return apply_primitive("add", self, _as_tensor(other, self.dtype))

    def __sub__(self, other):
        other = _as_tensor(other, self.dtype)
        neg = apply_primitive("mul", other, Tensor(np.array(-1.0, dtype=self.dtype)))
        return apply_primitive("add", self, neg)

    def __mul__(self, other):
        return apply_primitive("mul", self, _as_tensor(other, self.dtype))

    def __matmul__(self, other):
        return apply_primitive("matmul", self, _as_tensor(other, self.dtype))

    def sin(self):
        return apply_primitive("sin", self)

    def sigmoid(self):
        return apply_primitive("sigmoid", self)

    def square(self):
        return apply_primitive("square", self)

    def sum(self):
        return apply_primitive("sum", self)

    def mean(self):
        return apply_primitive("mean", self)

    def reshape(self, shape):
        return apply_primitive("reshape", self, shape=tuple(shape))

    def slice_last(self, start, stop):
        return apply_primitive("slice", self, start=start, stop=stop)


def _as_tensor(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _broadcast_ok(a_shape, b_shape):
    """Allowed: equal shapes, scalar operand, or one-sided broadcast where
    the result shape equals the larger operand's shape."""
    try:
        out = np.broadcast_shapes(a_shape, b_shape)
    except ValueError:
        return False
    return out == tuple(a_shape) or out == tuple(b_shape)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum gradient g down to a broadcast operand's original shape."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g if g.ndim == 0 else np.ascontiguousarray(g)


def _conv_cols(xp: np.ndarray, H: int, W: int) -> np.ndarray:
    """Gather 3x3 neighborhoods of a zero-padded (H+2, W+2, C) image into
    (H, W, 9*C) columns, tap-major."""
    C = xp.shape[2]
    cols = np.empty((H, W, 9 * C), dtype=xp.dtype)
    t = 0
    for dy in range(3):
        for dx in range(3):
            cols[:, :, t * C : (t + 1) * C] = xp[dy : dy + H, dx : dx + W, :]
            t += 1
    return cols


def _conv_cols_scatter(dcols: np.ndarray, H: int, W: int, C: int) -> np.ndarray:
    """Adjoint of _conv_cols: accumulate (H, W, 9*C) back into (H, W, C)."""
    dxp = np.zeros((H + 2, W + 2, C), dtype=dcols.dtype)
    t = 0
    for dy in range(3):
        for dx in range(3):
            dxp[dy : dy + H, dx : dx + W, :] += dcols[:, :, t * C : (t + 1) * C]
            t += 1
    return dxp[1 : 1 + H, 1 : 1 + W, :]


def apply_primitive(kind: str, *inputs: Tensor, **attrs) -> Tensor:
    """Apply one primitive, recording a tape node when any input is watched.

    Raises ShapeError on non-conforming extents and ValueError on an unknown
    kind. All tensor inputs must share a dtype; the output inherits it.
    """
    if kind not in PRIMITIVES:
        raise ValueError(f"unknown primitive kind {kind!r}")
    if not inputs:
        raise ShapeError(f"{kind}: at least one input required")
    dt = inputs[0].dtype
    for t in inputs:
        if t.dtype != dt:
            raise ShapeError(f"{kind}: mixed dtypes {dt} vs {t.dtype}")

    tape = None
    for t in inputs:
        if t.node is not None:
            if tape is None:
                tape = t.tape
            elif t.tape is not tape:
                raise TapeError(f"{kind}: inputs recorded on different tapes")
    if tape is not None and tape.consumed:
        raise TapeError(f"{kind}: tape already consumed")

    xs = [t.data for t in inputs]
    out, pullback = _FORWARD[kind](xs, attrs)

    node = None
    if tape is not None:
        node = Node(tuple(t.node for t in inputs), pullback, out.shape)
        tape._nodes.append(node)
    return Tensor(out, _node=node, _tape=tape)


# -- forward/pullback implementations ------------------------------------


def _fw_matmul(xs, attrs):
    a, b = xs
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} x {b.shape} do not conform")
    out = a @ b

    def pullback(g):
        return (g @ b.T, a.T @ g)

    return out, pullback


def _fw_add(xs, attrs):
    a, b = xs
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"add: shapes {a.shape} + {b.shape} not allowed")
    out = a + b

    def pullback(g):
        return (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape))

    return out, pullback


def _fw_mul(xs, attrs):
    a, b = xs
    if not _broadcast_ok(a.shape, b.shape):
        raise ShapeError(f"mul: shapes {a.shape} * {b.shape} not allowed")
    out = a * b

    def pullback(g):
        return (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))

    return out, pullback


def _fw_sin(xs, attrs):
    (x,) = xs
    out = np.sin(x)

    def pullback(g):
        return (g * np.cos(x),)

    return out, pullback


def _fw_sigmoid(xs, attrs):
    (x,) = xs
    s = expit(x)

    def pullback(g):
        return (g * s * (1.0 - s),)

    return s.astype(x.dtype, copy=False), pullback


def _fw_concat(xs, attrs):
    lead = xs[0].shape[:-1]
    for x in xs[1:]:
        if x.shape[:-1] != lead:
            raise ShapeError(f"concat: leading extents differ: {[x.shape for x in xs]}")
    out = np.concatenate(xs, axis=-1)
    widths = [x.shape[-1] for x in xs]

    def pullback(g):
        grads, start = [], 0
        for w in widths:
            grads.append(np.ascontiguousarray(g[..., start : start + w]))
            start += w
        return tuple(grads)

    return out, pullback


def _fw_slice(xs, attrs):
    (x,) = xs
    start, stop = attrs["start"], attrs["stop"]
    if not (0 <= start <= stop <= x.shape[-1]):
        raise ShapeError(f"slice: [{start}:{stop}] out of bounds for {x.shape}")
    out = np.ascontiguousarray(x[..., start:stop])

    def pullback(g):
        dx = np.zeros_like(x)
        dx[..., start:stop] = g
        return (dx,)

    return out, pullback


def _fw_conv2d(xs, attrs):
    x, w, b = xs
    if x.ndim != 3 or w.shape[:2] != (3, 3) or w.ndim != 4:
        raise ShapeError(f"conv2d: expected x (H,W,Cin), w (3,3,Cin,Cout); got {x.shape}, {w.shape}")
    H, W, Cin = x.shape
    if w.shape[2] != Cin or b.shape != (w.shape[3],):
        raise ShapeError(f"conv2d: channel mismatch x {x.shape}, w {w.shape}, b {b.shape}")
    Cout = w.shape[3]
    xp = np.zeros((H + 2, W + 2, Cin), dtype=x.dtype)
    xp[1 : 1 + H, 1 : 1 + W, :] = x
    cols = _conv_cols(xp, H, W)
    wm = w.reshape(9 * Cin, Cout)
    out = cols.reshape(H * W, 9 * Cin) @ wm + b
    out = out.reshape(H, W, Cout)

    def pullback(g):
        gm = g.reshape(H * W, Cout)
        dw = (cols.reshape(H * W, 9 * Cin).T @ gm).reshape(3, 3, Cin, Cout)
        db = gm.sum(axis=0)
        dcols = (gm @ wm.T).reshape(H, W, 9 * Cin)
        dx = _conv_cols_scatter(dcols, H, W, Cin)
        return (dx, dw, db)

    return out, pullback


def _fw_avgpool2(xs, attrs):
    (x,) = xs
    H, W, C = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"avgpool2: extents {x.shape} not divisible by 2")
    out = x.reshape(H // 2, 2, W // 2, 2, C).mean(axis=(1, 3))

    def pullback(g):
        up = np.repeat(np.repeat(g, 2, axis=0), 2, axis=1)
        return (up * np.asarray(0.25, dtype=x.dtype),)

    return out.astype(x.dtype, copy=False), pullback


def _fw_upsample2(xs, attrs):
    (x,) = xs
    H, W, C = x.shape
    out = np.repeat(np.repeat(x, 2, axis=0), 2, axis=1)

    def pullback(g):
        return (g.reshape(H, 2, W, 2, C).sum(axis=(1, 3)),)

    return out, pullback


def _fw_instnorm(xs, attrs):
    x, gamma, beta = xs
    if x.ndim != 3 or gamma.shape != (x.shape[2],) or beta.shape != (x.shape[2],):
        raise ShapeError(f"instnorm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}")
    H, W, C = x.shape
    n = H * W
    # statistics in float64 so a constant channel normalizes to exact zero
    x64 = x.astype(np.float64, copy=False)
    mu = x64.mean(axis=(0, 1))
    xc = x64 - mu
    var = (xc * xc).mean(axis=(0, 1))
    inv_std = 1.0 / np.sqrt(var + INSTNORM_EPS)
    xhat = xc * inv_std
    out = gamma * xhat.astype(x.dtype, copy=False) + beta

    def pullback(g):
        g64 = g.astype(np.float64, copy=False)
        dxhat = g64 * gamma
        dvar = (dxhat * xc).sum(axis=(0, 1)) * (-0.5) * inv_std**3
        dmu = (-dxhat * inv_std).sum(axis=(0, 1)) + dvar * (-2.0) * xc.mean(axis=(0, 1))
        dx = dxhat * inv_std + (2.0 / n) * dvar * xc + dmu / n
        dgamma = (g64 * xhat).sum(axis=(0, 1))
        dbeta = g64.sum(axis=(0, 1))
        return (dx.astype(x.dtype, copy=False), dgamma.astype(x.dtype, copy=False),
                dbeta.astype(x.dtype, copy=False))

    return out.astype(x.dtype, copy=False), pullback


def _fw_sum(xs, attrs):
    (x,) = xs
    out = np.asarray(x.sum(), dtype=x.dtype)

    def pullback(g):
        return (np.full_like(x, float(g)),)

    return out, pullback


def _fw_mean(xs, attrs):
    (x,) = xs
    out = np.asarray(x.mean(), dtype=x.dtype)
    inv = 1.0 / x.size

    def pullback(g):
        return (np.full_like(x, float(g) * inv),)

    return out, pullback


def _fw_square(xs, attrs):
    (x,) = xs
    out = x * x

    def pullback(g):
        return (g * 2.0 * x,)

    return out, pullback


def _fw_log(xs, attrs):
    (x,) = xs
    if np.any(x <= 0):
        raise ShapeError("log: inputs must be strictly positive")
    out = np.log(x)

    def pullback(g):
        return (g / x,)

    return out.astype(x.dtype, copy=False), pullback


def _fw_leaky_relu(xs, attrs):
    (x,) = xs
    slope = attrs.get("slope", 0.2)
    out = np.where(x > 0, x, x * np.asarray(slope, dtype=x.dtype))

    def pullback(g):
        return (g * np.where(x > 0, np.asarray(1.0, dtype=x.dtype), np.asarray(slope, dtype=x.dtype)),)

    return out.astype(x.dtype, copy=False), pullback


def _fw_gather(xs, attrs):
    (x,) = xs
    idx = np.asarray(attrs["indices"], dtype=np.int64)
    if x.ndim != 2 or idx.ndim != 1:
        raise ShapeError(f"gather: expected x (N,C) and 1-D indices; got {x.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise ShapeError("gather: index out of range")
    out = np.ascontiguousarray(x[idx])

    def pullback(g):
        dx = np.zeros_like(x)
        np.add.at(dx, idx, g)
        return (dx,)

    return out, pullback


def _fw_scatter(xs, attrs):
    (x,) = xs
    idx = np.asarray(attrs["indices"], dtype=np.int64)
    num_rows = int(attrs["num_rows"])
    if x.ndim != 2 or idx.shape != (x.shape[0],):
        raise ShapeError(f"scatter: expected x (M,C) and indices (M,); got {x.shape}, {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= num_rows):
        raise ShapeError("scatter: index out of range")
    out = np.zeros((num_rows, x.shape[1]), dtype=x.dtype)
    np.add.at(out, idx, x)

    def pullback(g):
        return (np.ascontiguousarray(g[idx]),)

    return out, pullback


def _fw_reshape(xs, attrs):
    (x,) = xs
    shape = tuple(attrs["shape"])
    if int(np.prod(shape)) != x.size:
        raise ShapeError(f"reshape: {x.shape} -> {shape} changes element count")
    out = x.reshape(shape)

    def pullback(g):
        return (g.reshape(x.shape),)

    return out, pullback


_FORWARD = {
    "matmul": _fw_matmul,
    "add": _fw_add,
    "mul": _fw_mul,
    "sin": _fw_sin,
    "sigmoid": _fw_sigmoid,
    "concat": _fw_concat,
    "slice": _fw_slice,
    "conv2d": _fw_conv2d,
    "avgpool2": _fw_avgpool2,
    "upsample2": _fw_upsample2,
    "instnorm": _fw_instnorm,
    "sum": _fw_sum,
    "mean": _fw_mean,
    "square": _fw_square,
    "log": _fw_log,
    "leaky_relu": _fw_leaky_relu,
    "gather": _fw_gather,
    "scatter": _fw_scatter,
    "reshape": _fw_reshape,
}


def backward(loss: Tensor) -> dict[Parameter, np.ndarray]:
    """Convenience wrapper: run the loss tensor's tape backward."""
    if loss.tape is None:
        raise TapeError("loss was not recorded on any tape")
    return loss.tape.backward(loss)


def concat(*tensors: Tensor) -> Tensor:
    return apply_primitive("concat", *tensors)


def gather_rows(x: Tensor, indices) -> Tensor:
    return apply_primitive("gather", x, indices=indices)


def scatter_rows(x: Tensor, indices, num_rows: int) -> Tensor:
    return apply_primitive("scatter", x, indices=indices, num_rows=num_rows)


def fan_in_uniform(rng: np.random.Generator, shape, fan_in: int, dtype=np.float32) -> np.ndarray:
    """Uniform fan-in initialization: U(-sqrt(3/fan_in), sqrt(3/fan_in))."""
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)
