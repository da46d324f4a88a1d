"""Image-space refinement U-Net built from gated convolution blocks.

The encoder halves resolution four times through widths 16, 32, 64, 128
into a 256-wide bottleneck; the decoder mirrors it with nearest-neighbor
upsampling and skip concatenation. Input is the 11-channel rasterized
radiance map (raw RGB + 8 features, zeros at empty pixels); output is a
3-channel RGB offset added to the raw image and clamped to [0, 1].
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError
from .tensor import Parameter, Tape, Tensor, apply_primitive, concat, fan_in_uniform

WIDTHS = (16, 32, 64, 128, 256)
IN_CHANNELS = 11
LEAK = 0.2


def _lift(tape: Tape | None, p: Parameter) -> Tensor:
    return tape.watch(p) if tape else Tensor(p.data)


def gated_conv(x: Tensor, block: dict[str, Parameter], tape: Tape | None = None) -> Tensor:
    """One gated block: instance norm of conv_f(x) * sigmoid(conv_g(x)),
    then leaky ReLU (slope 0.2)."""
    feat = apply_primitive("conv2d", x, _lift(tape, block["f.w"]), _lift(tape, block["f.b"]))
    gate = apply_primitive("conv2d", x, _lift(tape, block["g.w"]), _lift(tape, block["g.b"])).sigmoid()
    z = apply_primitive("instnorm", feat * gate, _lift(tape, block["gamma"]), _lift(tape, block["beta"]))
    return apply_primitive("leaky_relu", z, slope=LEAK)


def _make_block(name: str, c_in: int, c_out: int, rng, dtype) -> dict[str, Parameter]:
    fan_in = 9 * c_in
    return {
        "f.w": Parameter(f"{name}.f.w", fan_in_uniform(rng, (3, 3, c_in, c_out), fan_in, dtype)),
        "f.b": Parameter(f"{name}.f.b", np.zeros(c_out, dtype=dtype)),
        "g.w": Parameter(f"{name}.g.w", fan_in_uniform(rng, (3, 3, c_in, c_out), fan_in, dtype)),
        "g.b": Parameter(f"{name}.g.b", np.zeros(c_out, dtype=dtype)),
        "gamma": Parameter(f"{name}.gamma", np.ones(c_out, dtype=dtype)),
        "beta": Parameter(f"{name}.beta", np.zeros(c_out, dtype=dtype)),
    }


class RefinerUNet:
    """Gated-convolution U-Net predicting RGB offsets from radiance maps."""

    def __init__(self, dtype=np.float32):
        self.dtype = dtype
        self.blocks: dict[str, dict[str, Parameter]] = {}
        self.final_w: Parameter | None = None
        self.final_b: Parameter | None = None

    def init_params(self, rng: np.random.Generator, zero: bool = False) -> None:
        c_enc = (IN_CHANNELS, *WIDTHS[:-1])
        for i in range(4):
            self.blocks[f"enc{i + 1}"] = _make_block(f"unet.enc{i + 1}", c_enc[i], WIDTHS[i], rng, self.dtype)
        self.blocks["mid"] = _make_block("unet.mid", WIDTHS[3], WIDTHS[4], rng, self.dtype)
        up_in = (WIDTHS[4] + WIDTHS[3], WIDTHS[3] + WIDTHS[2], WIDTHS[2] + WIDTHS[1], WIDTHS[1] + WIDTHS[0])
        for i in range(4):
            self.blocks[f"dec{4 - i}"] = _make_block(f"unet.dec{4 - i}", up_in[i], WIDTHS[3 - i], rng, self.dtype)
        self.final_w = Parameter("unet.final.w", fan_in_uniform(rng, (3, 3, WIDTHS[0], 3), 9 * WIDTHS[0], self.dtype))
        self.final_b = Parameter("unet.final.b", np.zeros(3, dtype=self.dtype))
        if zero:
            for p in self.parameters():
                p.data = np.zeros_like(p.data)

    def parameters(self) -> list[Parameter]:
        out = []
        for block in self.blocks.values():
            out.extend(block.values())
        out.extend([self.final_w, self.final_b])
        return out

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data for p in self.parameters()}

    def load_state(self, tensors: dict[str, np.ndarray]) -> None:
        if not self.blocks:
            self.init_params(np.random.default_rng(0))
        for p in self.parameters():
            if p.name not in tensors:
                raise ShapeError(f"checkpoint missing {p.name}")
            p.data = tensors[p.name].astype(self.dtype)

    def forward(self, feat_image: Tensor, tape: Tape | None = None) -> Tensor:
        """(H, W, 11) radiance map -> (H, W, 3) unbounded RGB offset."""
        h, w, c = feat_image.shape
        if c != IN_CHANNELS:
            raise ShapeError(f"expected {IN_CHANNELS} input channels, got {c}")
        if h % 16 or w % 16:
            raise ShapeError(f"extents {h}x{w} must be divisible by 16")

        skips = []
        x = feat_image
        for i in range(4):
            x = gated_conv(x, self.blocks[f"enc{i + 1}"], tape)
            skips.append(x)
            x = apply_primitive("avgpool2", x)
        x = gated_conv(x, self.blocks["mid"], tape)
        for i in range(4):
            x = apply_primitive("upsample2", x)
            x = concat(x, skips[3 - i])
            x = gated_conv(x, self.blocks[f"dec{4 - i}"], tape)
        return apply_primitive("conv2d", x, _lift(tape, self.final_w), _lift(tape, self.final_b))


def clamp01(x: Tensor) -> Tensor:
    """Differentiable clamp to [0, 1]: relu(x) - relu(x - 1)."""
    lo = apply_primitive("leaky_relu", x, slope=0.0)
    hi = apply_primitive("leaky_relu", x - 1.0, slope=0.0)
    return lo - hi


def compose_final(raw_rgb: Tensor, offset: Tensor) -> Tensor:
    """Final color = clamp(raw + offset, 0, 1)."""
    if raw_rgb.shape != offset.shape:
        raise ShapeError(f"raw {raw_rgb.shape} vs offset {offset.shape}")
    return clamp01(raw_rgb + offset)
