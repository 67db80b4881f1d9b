"""Two-step multispectral feature fusion.

Step I fuses the two modality stacks channel-pair by channel-pair: a small
convolution over the concatenated pair predicts per-tap sampling offsets,
both stacks are bilinearly sampled at the offset tap locations, interleaved
(riffle shuffle) and reduced by a group-wise convolution with one group per
channel pair. Step II recalibrates the fused stack across channels with a
global-pool self-gating block (or a plain 1x1 convolution in the ConvCC
variant), yielding the initial fused feature.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import (Parameter, Tensor, bilinear_sample, concat, conv2d,
                       global_avg_pool, grouped_conv2d, linear, scale_channels)

VARIANTS = ("adaptive_rp_globalcc", "fixed_rp", "adaptive_rp_convcc")


@dataclass
class FeaturePair:
    """Aligned RGB-branch and thermal-branch feature stacks, [b, c, h, w]."""

    rgb: Tensor
    thermal: Tensor

    def __post_init__(self):
        if self.rgb.ndim != 4 or self.rgb.shape != self.thermal.shape:
            raise ValueError(f"feature pair shapes differ: "
                             f"{self.rgb.shape} vs {self.thermal.shape}")

    @property
    def channels(self) -> int:
        return self.rgb.shape[1]


def _he(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class FusionParams:
    """Parameters of the fusion block for one of the three variants.

    The offset convolution is zero-initialised so that training starts from
    the regular sampling grid.
    """

    def __init__(self, channels: int, variant: str = "adaptive_rp_globalcc",
                 rng: np.random.Generator | None = None, kernel_size: int = 3,
                 bottleneck_ratio: int = 4, prefix: str = "ffm"):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
        rng = rng or np.random.default_rng(0)
        c, k = channels, kernel_size
        self.channels = c
        self.kernel_size = k
        self.variant = variant
        self.bottleneck_ratio = bottleneck_ratio
        self._params: list[Parameter] = []

        def add(name, data):
            p = Parameter(f"{prefix}.{name}", data)
            self._params.append(p)
            return p

        if variant.startswith("adaptive_rp"):
            self.offset_kernel = add("offset.weight", np.zeros((2 * k * k, 2 * c, 3, 3)))
            self.offset_bias = add("offset.bias", np.zeros(2 * k * k))
            self.gw_kernel = add("gw.weight", _he(rng, (c, 2, k, k), 2 * k * k))
            self.gw_bias = add("gw.bias", np.zeros(c))
        else:
            self.fixed_kernel1 = add("fixed1.weight", _he(rng, (c, 2, k, k), 2 * k * k))
            self.fixed_bias1 = add("fixed1.bias", np.zeros(c))
            self.fixed_kernel2 = add("fixed2.weight", _he(rng, (c, c, 1, 1), c))
            self.fixed_bias2 = add("fixed2.bias", np.zeros(c))

        if variant == "adaptive_rp_convcc":
            self.cc_kernel = add("convcc.weight", _he(rng, (c, c, 1, 1), c))
            self.cc_bias = add("convcc.bias", np.zeros(c))
        else:
            if c % bottleneck_ratio != 0:
                raise ValueError(f"bottleneck ratio {bottleneck_ratio} "
                                 f"does not divide {c} channels")
            mid = c // bottleneck_ratio
            self.gcc_fc1 = add("gcc.fc1.weight", _he(rng, (mid, c), c))
            self.gcc_fc1_bias = add("gcc.fc1.bias", np.zeros(mid))
            self.gcc_fc2 = add("gcc.fc2.weight", _he(rng, (c, mid), mid))
            self.gcc_fc2_bias = add("gcc.fc2.bias", np.zeros(c))

    def parameters(self) -> list[Parameter]:
        return list(self._params)


def riffle_shuffle(pair: FeaturePair) -> Tensor:
    """Interleave channels: output 2i is rgb channel i, 2i+1 thermal channel i."""
    b, c, h, w = pair.rgb.shape
    r5 = pair.rgb.reshape(b, c, 1, h, w)
    t5 = pair.thermal.reshape(b, c, 1, h, w)
    return concat([r5, t5], axis=2).reshape(b, 2 * c, h, w)


def predict_offsets(pair: FeaturePair, params: FusionParams) -> Tensor:
    """Per-location (dy, dx) for each sampling tap, shared by both modalities."""
    if not params.variant.startswith("adaptive_rp"):
        raise ValueError(f"variant {params.variant!r} has no offset branch")
    stacked = concat([pair.rgb, pair.thermal], axis=1)
    return conv2d(stacked, params.offset_kernel, params.offset_bias, stride=1, padding=1)


def _tap_base_grid(h: int, w: int, k: int) -> np.ndarray:
    """Regular sampling locations for all k*k taps, stacked tap-major along
    the row axis: shape [1, 2, k*k*h, w] holding (y, x)."""
    half = (k - 1) // 2
    gy, gx = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    ys = np.concatenate([gy + (t // k - half) for t in range(k * k)], axis=0)
    xs = np.concatenate([gx + (t % k - half) for t in range(k * k)], axis=0)
    return np.stack([ys, xs])[None]


def deformable_fuse(pair: FeaturePair, params: FusionParams) -> Tensor:
    """Step I with adaptive sampling.

    Every tap samples the riffled stack at (base grid + tap displacement +
    predicted offset); the k*k samples of each channel pair are reduced to
    one output channel by the group-wise kernel. With zero offsets this
    equals the regular grouped convolution over the riffled stack.

    All taps go through a single bilinear gather: tap grids are stacked
    along the row axis, and the per-tap samples are folded into the input
    channels of a 1x1 grouped convolution.
    """
    if not params.variant.startswith("adaptive_rp"):
        raise ValueError(f"variant {params.variant!r} does not use deformable fusion")
    b, c, h, w = pair.rgb.shape
    if c != params.channels:
        raise ValueError(f"pair has {c} channels, params expect {params.channels}")
    k = params.kernel_size
    taps = k * k

    offsets = predict_offsets(pair, params)  # [b, 2*taps, h, w], (dy, dx) per tap
    shuffled = riffle_shuffle(pair)

    offs = offsets.reshape(b, taps, 2, h, w).transpose(0, 2, 1, 3, 4)
    coords = Tensor(_tap_base_grid(h, w, k)) + offs.reshape(b, 2, taps * h, w)
    sampled = bilinear_sample(shuffled, coords)  # [b, 2c, taps*h, w]
    # row-major flattening leaves channels in (channel, tap) order, matching
    # the per-group flattening of gw_kernel below
    folded = sampled.reshape(b, 2 * c * taps, h, w)
    kernel = params.gw_kernel.reshape(c, 2 * taps, 1, 1)
    return grouped_conv2d(folded, kernel, params.gw_bias, groups=c)


def fixed_fuse(pair: FeaturePair, params: FusionParams) -> Tensor:
    """Step I without offsets: grouped k x k conv then a dense 1x1 conv."""
    if params.variant != "fixed_rp":
        raise ValueError(f"variant {params.variant!r} does not use fixed fusion")
    k = params.kernel_size
    shuffled = riffle_shuffle(pair)
    mixed = grouped_conv2d(shuffled, params.fixed_kernel1, params.fixed_bias1,
                           groups=params.channels, padding=(k - 1) // 2)
    return conv2d(mixed, params.fixed_kernel2, params.fixed_bias2)


def global_cc(step1: Tensor, params: FusionParams) -> Tensor:
    """Self-gating recalibration: squeeze, bottleneck, expand, sigmoid, scale."""
    if params.variant == "adaptive_rp_convcc":
        raise ValueError("ConvCC variant does not use the global gating block")
    b, c = step1.shape[0], step1.shape[1]
    squeezed = global_avg_pool(step1).reshape(b, c)
    hidden = linear(squeezed, params.gcc_fc1, params.gcc_fc1_bias).relu()
    gates = linear(hidden, params.gcc_fc2, params.gcc_fc2_bias).sigmoid()
    return scale_channels(step1, gates.reshape(b, c, 1, 1))


def conv_cc(step1: Tensor, params: FusionParams) -> Tensor:
    """Cross-channel mixing by a plain dense 1x1 convolution."""
    if params.variant != "adaptive_rp_convcc":
        raise ValueError(f"variant {params.variant!r} does not use ConvCC")
    return conv2d(step1, params.cc_kernel, params.cc_bias)


def ffm_forward(pair: FeaturePair, params: FusionParams) -> Tensor:
    """Dispatch Step I and Step II per the configured variant."""
    if params.variant == "fixed_rp":
        step1 = fixed_fuse(pair, params)
    else:
        step1 = deformable_fuse(pair, params)
    if params.variant == "adaptive_rp_convcc":
        return conv_cc(step1, params)
    return global_cc(step1, params)
