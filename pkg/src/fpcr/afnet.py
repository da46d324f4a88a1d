"""Frequency-modulated radiance mapping.

A small hypernetwork predicts one (frequency, phase) pair per point and per
activation layer from the encoded position alone. Each activation layer
modulates its features as  Y = X * sin(w * X + p)  with w, p broadcast
per row, which lets the network pick high-frequency basis support only
where the scene needs it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError
from .tensor import Parameter, Tape, Tensor, apply_primitive, concat, fan_in_uniform


@dataclass(frozen=True)
class EncodingConfig:
    l_pos: int = 10
    l_dir: int = 2
    include_raw: bool = True

    def __post_init__(self):
        if self.l_pos < 1 or self.l_dir < 1:
            raise ShapeError("encoding band count must be >= 1")


def encoding_width(l: int, include_raw: bool = True) -> int:
    """Feature width for 3-vector input: 2 sinusoids per band, 2L-1 bands."""
    return 3 * (2 * (2 * l - 1) + (1 if include_raw else 0))


def encode(p: np.ndarray, l: int, include_raw: bool = True) -> np.ndarray:
    """Sinusoidal features with half-octave band spacing.

    Band frequencies are 2^e * pi for e = 0, 0.5, 1, ..., l-1; each band
    contributes sin and cos of every input dimension. The raw input is
    prepended when configured. Inputs are expected roughly in [-1, 1].
    """
    p = np.asarray(p)
    if p.ndim != 2 or p.shape[1] != 3:
        raise ShapeError(f"encode expects (M, 3), got {p.shape}")
    exps = np.arange(2 * l - 1) * 0.5
    freqs = (2.0**exps * np.pi).astype(p.dtype)
    blocks = [p] if include_raw else []
    for f in freqs:
        fp = f * p
        blocks.append(np.sin(fp))
        blocks.append(np.cos(fp))
    return np.concatenate(blocks, axis=1)


@dataclass
class FreqPhase:
    """Per-point, per-layer modulation scalars (as graph tensors)."""

    omega: Tensor  # (M, A)
    phi: Tensor  # (M, A)

    @property
    def num_layers(self) -> int:
        return self.omega.shape[1]


@dataclass
class RadianceOutput:
    raw_rgb: Tensor  # (M, 3), sigmoid-bounded
    features: Tensor  # (M, 8)
    freq_phase: FreqPhase


def af_activate(x: Tensor, omega: Tensor, phi: Tensor) -> Tensor:
    """Adaptive frequency activation: x * sin(omega * x + phi)."""
    if omega.shape != (x.shape[0], 1) or phi.shape != (x.shape[0], 1):
        raise ShapeError(f"modulators must be (M,1); got {omega.shape}, {phi.shape} for x {x.shape}")
    return x * (omega * x + phi).sin()


def _linear(tape: Tape | None, w: Parameter, b: Parameter, x: Tensor) -> Tensor:
    wt = tape.watch(w) if tape else Tensor(w.data)
    bt = tape.watch(b) if tape else Tensor(b.data)
    return (x @ wt) + bt


def _relu(x: Tensor) -> Tensor:
    return apply_primitive("leaky_relu", x, slope=0.0)


class AdaptiveFrequencyNet:
    """Radiance mapping network plus its frequency-estimation hypernetwork.

    Five affine layers (hidden 256, 256, 256, 128; output 11 = 3 raw RGB +
    8 refinement features) with one adaptive frequency activation after each
    hidden layer. Encoded view directions join before layer 4. The two-layer
    hypernetwork maps the encoded position to 2A modulation scalars; its
    final layer starts at zero so an untrained network is constant-output.
    """

    HIDDEN = (256, 256, 256, 128)
    OUT_DIM = 11
    NUM_AF = 4
    HYPER_WIDTH = 256

    def __init__(self, enc: EncodingConfig = EncodingConfig(), dtype=np.float32):
        self.enc = enc
        self.dtype = dtype
        self.d_pos = encoding_width(enc.l_pos, enc.include_raw)
        self.d_dir = encoding_width(enc.l_dir, enc.include_raw)
        self.params: dict[str, Parameter] = {}

    def init_params(self, rng: np.random.Generator) -> None:
        widths = [self.d_pos, *self.HIDDEN, self.OUT_DIM]
        items: dict[str, Parameter] = {}
        for i in range(5):
            fan_in = widths[i] + (self.d_dir if i == 3 else 0)
            fan_out = widths[i + 1]
            items[f"layer{i + 1}.w"] = Parameter(
                f"afnet.layer{i + 1}.w", fan_in_uniform(rng, (fan_in, fan_out), fan_in, self.dtype))
            items[f"layer{i + 1}.b"] = Parameter(
                f"afnet.layer{i + 1}.b", np.zeros(fan_out, dtype=self.dtype))
        items["hyper1.w"] = Parameter(
            "afnet.hyper1.w", fan_in_uniform(rng, (self.d_pos, self.HYPER_WIDTH), self.d_pos, self.dtype))
        items["hyper1.b"] = Parameter("afnet.hyper1.b", np.zeros(self.HYPER_WIDTH, dtype=self.dtype))
        # zero final layer: omega = phi = 0 until training moves them
        items["hyper2.w"] = Parameter(
            "afnet.hyper2.w", np.zeros((self.HYPER_WIDTH, 2 * self.NUM_AF), dtype=self.dtype))
        items["hyper2.b"] = Parameter("afnet.hyper2.b", np.zeros(2 * self.NUM_AF, dtype=self.dtype))
        self.params = items

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.params.values()}

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        if not self.params:
            self.init_params(np.random.default_rng(0))
        for key, p in self.params.items():
            if p.name not in tensors:
                raise ShapeError(f"checkpoint missing {p.name}")
            if tensors[p.name].shape != p.data.shape:
                raise ShapeError(f"{p.name}: shape {tensors[p.name].shape} != {p.data.shape}")
            p.data = tensors[p.name].astype(self.dtype)

    def hyper_forward(self, pos_encoded: np.ndarray, tape: Tape | None = None) -> FreqPhase:
        """Frequency/phase estimation from encoded positions (M, d_pos)."""
        if pos_encoded.shape[1] != self.d_pos:
            raise ShapeError(f"expected encoded width {self.d_pos}, got {pos_encoded.shape[1]}")
        h = _linear(tape, self.params["hyper1.w"], self.params["hyper1.b"],
                    Tensor(pos_encoded.astype(self.dtype)))
        h = _relu(h)
        out = _linear(tape, self.params["hyper2.w"], self.params["hyper2.b"], h)
        a = self.NUM_AF
        return FreqPhase(omega=out.slice_last(0, a), phi=out.slice_last(a, 2 * a))

    def forward(self, x: np.ndarray, d: np.ndarray, tape: Tape | None = None) -> RadianceOutput:
        """Radiance at normalized surface coordinates x (M,3) with unit view
        directions d (M,3)."""
        x = np.asarray(x)
        d = np.asarray(d)
        if x.shape != d.shape or x.ndim != 2 or x.shape[1] != 3:
            raise ShapeError(f"expected (M,3) coordinate and direction arrays, got {x.shape}, {d.shape}")
        if x.size and not (np.all(np.isfinite(x)) and np.all(np.isfinite(d))):
            raise ShapeError("non-finite input coordinates")
        pe = encode(x, self.enc.l_pos, self.enc.include_raw).astype(self.dtype)
        de = encode(d, self.enc.l_dir, self.enc.include_raw).astype(self.dtype)
        return self.forward_encoded(pe, de, tape)

    def forward_encoded(self, pe: np.ndarray, de: np.ndarray, tape: Tape | None = None) -> RadianceOutput:
        """Forward pass from precomputed position/direction encodings."""
        if pe.shape[1] != self.d_pos or de.shape[1] != self.d_dir:
            raise ShapeError(f"encoded widths {pe.shape[1]}, {de.shape[1]} != {self.d_pos}, {self.d_dir}")
        fp = self.hyper_forward(pe, tape)

        h = _linear(tape, self.params["layer1.w"], self.params["layer1.b"], Tensor(pe))
        h = af_activate(h, fp.omega.slice_last(0, 1), fp.phi.slice_last(0, 1))
        h = _linear(tape, self.params["layer2.w"], self.params["layer2.b"], h)
        h = af_activate(h, fp.omega.slice_last(1, 2), fp.phi.slice_last(1, 2))
        h = _linear(tape, self.params["layer3.w"], self.params["layer3.b"], h)
        h = af_activate(h, fp.omega.slice_last(2, 3), fp.phi.slice_last(2, 3))
        h = concat(h, Tensor(de))
        h = _linear(tape, self.params["layer4.w"], self.params["layer4.b"], h)
        h = af_activate(h, fp.omega.slice_last(3, 4), fp.phi.slice_last(3, 4))
        out = _linear(tape, self.params["layer5.w"], self.params["layer5.b"], h)
        rgb = out.slice_last(0, 3).sigmoid()
        feats = out.slice_last(3, self.OUT_DIM)
        return RadianceOutput(raw_rgb=rgb, features=feats, freq_phase=fp)
