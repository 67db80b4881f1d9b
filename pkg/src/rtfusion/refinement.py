"""Mask-guided feature refinement.

A small segmentation branch predicts a box-level mask from the fused
feature, the cosine similarity between that mask and every channel map is
projected through a two-layer bottleneck-free head into per-channel gates in
(0, 1), and the fused feature is rescaled channel-wise by those gates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter, Tensor, conv2d, linear, make_op, scale_channels


class RefinementParams:
    """Segmentation branch and correlation-projection parameters."""

    def __init__(self, channels: int, rng: np.random.Generator | None = None,
                 prefix: str = "frm", gate_bias_init: float = 0.0):
        rng = rng or np.random.default_rng(0)
        c = channels
        if c % 2 != 0:
            raise ValueError("channel count must be even for the segmentation bottleneck")
        self.channels = c
        self._params: list[Parameter] = []

        def add(name, data):
            p = Parameter(f"{prefix}.{name}", data)
            self._params.append(p)
            return p

        def he(shape, fan_in):
            return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)

        self.seg_conv1 = add("seg1.weight", he((c // 2, c, 3, 3), c * 9))
        self.seg_bias1 = add("seg1.bias", np.zeros(c // 2))
        self.seg_conv2 = add("seg2.weight", he((1, c // 2, 1, 1), c // 2))
        self.seg_bias2 = add("seg2.bias", np.zeros(1))
        self.proj_fc1 = add("proj1.weight", he((c, c), c))
        self.proj_fc1_bias = add("proj1.bias", np.zeros(c))
        self.proj_fc2 = add("proj2.weight", he((c, c), c))
        # positive init keeps the gates open at the start of training
        self.proj_fc2_bias = add("proj2.bias", np.full(c, float(gate_bias_init)))

    def parameters(self) -> list[Parameter]:
        return list(self._params)


def predict_mask(fused: Tensor, params: RefinementParams) -> Tensor:
    """Sigmoid box-level mask prediction, [b, c, h, w] -> [b, h, w]."""
    b, _, h, w = fused.shape
    hidden = conv2d(fused, params.seg_conv1, params.seg_bias1, padding=1).relu()
    logits = conv2d(hidden, params.seg_conv2, params.seg_bias2)
    return logits.sigmoid().reshape(b, h, w)


def channel_correlation(mask: Tensor, fused: Tensor) -> Tensor:
    """Cosine similarity of the mask with each channel map, [b, c].

    Both the flattened mask and each flattened channel map are L2-normalised
    before the inner product; an exactly zero-norm operand yields 0 with a
    zero gradient.
    """
    if mask.ndim != 3 or fused.ndim != 4 or mask.shape != \
            (fused.shape[0], fused.shape[2], fused.shape[3]):
        raise ValueError("mask [b,h,w] must align spatially with the feature [b,c,h,w]")
    b, c, h, w = fused.shape
    p = h * w
    mf = mask.data.reshape(b, 1, p)
    ff = fused.data.reshape(b, c, p)
    m_norm = np.linalg.norm(mf, axis=2, keepdims=True)
    f_norm = np.linalg.norm(ff, axis=2, keepdims=True)
    m_unit = mf / np.where(m_norm == 0.0, 1.0, m_norm)
    f_unit = ff / np.where(f_norm == 0.0, 1.0, f_norm)
    valid = (m_norm > 0.0) & (f_norm > 0.0)
    v = (m_unit * f_unit).sum(axis=2, keepdims=True) * valid
    assert np.all(np.abs(v) <= 1.0 + 1e-12), "cosine correlation left [-1, 1]"

    def bwd(g):
        gv = g.reshape(b, c, 1) * valid
        safe_f = np.where(f_norm == 0.0, 1.0, f_norm)
        safe_m = np.where(m_norm == 0.0, 1.0, m_norm)
        dfused = gv * (m_unit - v * f_unit) / safe_f
        dmask = (gv * (f_unit - v * m_unit)).sum(axis=1, keepdims=True) / safe_m
        return dmask.reshape(b, h, w), dfused.reshape(b, c, h, w)

    return make_op(v.reshape(b, c), (mask, fused), bwd)


def project_correlation(v: Tensor, params: RefinementParams) -> Tensor:
    """Two-layer projection with a rectifier, squashed to gates in (0, 1)."""
    hidden = linear(v, params.proj_fc1, params.proj_fc1_bias).relu()
    return linear(hidden, params.proj_fc2, params.proj_fc2_bias).sigmoid()


def refine(fused: Tensor, gates: Tensor) -> Tensor:
    """Channel-wise product of the fused feature with the gates, [b, c]."""
    if gates.ndim != 2 or gates.shape != (fused.shape[0], fused.shape[1]):
        raise ValueError(f"gates {gates.shape} do not match feature channels "
                         f"{(fused.shape[0], fused.shape[1])}")
    b, c = gates.shape
    return scale_channels(fused, gates.reshape(b, c, 1, 1))


@dataclass
class RefinementOutput:
    refined: Tensor
    mask: Tensor
    gates: Tensor


def frm_forward(fused: Tensor, params: RefinementParams) -> RefinementOutput:
    """One pass producing the refined feature plus (mask, gates) for the loss."""
    mask = predict_mask(fused, params)
    v = channel_correlation(mask, fused)
    gates = project_correlation(v, params)
    return RefinementOutput(refined=refine(fused, gates), mask=mask, gates=gates)
