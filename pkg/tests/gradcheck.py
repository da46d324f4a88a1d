"""Central finite-difference gradient checking against the tape."""

import numpy as np

from fpcr.tensor import Tape

DEFAULT_H = 1e-5
DEFAULT_TOL = 1e-5


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(1.0, abs(a), abs(b))


def gradcheck(build, params, h=DEFAULT_H, tol=DEFAULT_TOL, samples=None, rng=None):
    """Compare tape gradients of a scalar loss with central differences.

    ``build(tape)`` must run the forward pass over the given Parameters and
    return the scalar loss Tensor; with ``tape=None`` it evaluates without
    recording. Parameters are perturbed in place. Checks every element, or
    ``samples`` random elements per parameter when given.
    """
    tape = Tape()
    loss = build(tape)
    grads = tape.backward(loss)
    worst = 0.0
    for p in params:
        ad = grads[p].reshape(-1)
        flat = p.data.reshape(-1)
        if samples is None or samples >= flat.size:
            idxs = np.arange(flat.size)
        else:
            idxs = rng.choice(flat.size, size=samples, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(build(None).data)
            flat[i] = orig - h
            f_minus = float(build(None).data)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * h)
            err = rel_err(float(ad[i]), fd)
            worst = max(worst, err)
            assert err < tol, (
                f"{p.name}[{i}]: tape {ad[i]:.10g} vs finite difference {fd:.10g} (err {err:.3g})")
    return worst
