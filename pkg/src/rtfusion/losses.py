"""Mask supervision, correlation, and detection losses.

The combined mask/correlation term is segmentation loss (pixel BCE plus
Dice) with an alpha-weighted negative-log gate term pushing every channel
gate towards 1. Probabilities are clamped to [1e-7, 1 - 1e-7] before any
logarithm.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor

PROB_EPS = 1e-7
DICE_EPS = 1.0
DEFAULT_ALPHA = 0.1


def _as_binary_constant(gt) -> Tensor:
    g = gt.data if isinstance(gt, Tensor) else np.asarray(gt, dtype=np.float64)
    if not np.all((g == 0.0) | (g == 1.0)):
        raise ValueError("ground-truth mask must contain only 0.0 and 1.0")
    return Tensor(g)


def bce_loss(gt, pred: Tensor) -> Tensor:
    """Binary cross-entropy averaged over every pixel of the batch."""
    g = _as_binary_constant(gt)
    if g.shape != pred.shape:
        raise ValueError(f"mask shapes differ: {g.shape} vs {pred.shape}")
    p = pred.clamp(PROB_EPS, 1.0 - PROB_EPS)
    losses = -(g * p.log() + (1.0 - g) * (1.0 - p).log())
    return losses.mean()


def dice_loss(gt, pred: Tensor, epsilon: float = DICE_EPS) -> Tensor:
    """Smoothed Dice loss per sample, averaged over the batch."""
    g = _as_binary_constant(gt)
    if g.shape != pred.shape:
        raise ValueError(f"mask shapes differ: {g.shape} vs {pred.shape}")
    axes = tuple(range(1, pred.ndim))
    inter = (g * pred).sum(axis=axes)
    denom = g.sum(axis=axes) + pred.sum(axis=axes) + epsilon
    per_sample = 1.0 - (2.0 * inter + epsilon) / denom
    return per_sample.mean()


def seg_loss(gt, pred: Tensor, epsilon: float = DICE_EPS) -> Tensor:
    """Mask supervision: BCE plus Dice."""
    return bce_loss(gt, pred) + dice_loss(gt, pred, epsilon)


def neg_corr_loss(gates: Tensor) -> Tensor:
    """Negative mean log gate; zero when every gate saturates at 1."""
    return -(gates.clamp(PROB_EPS, 1.0).log()).mean()


def corr_max_loss(gt, pred_mask: Tensor, gates: Tensor,
                  alpha: float = DEFAULT_ALPHA, epsilon: float = DICE_EPS) -> Tensor:
    """Segmentation loss plus alpha-weighted gate term."""
    return seg_loss(gt, pred_mask, epsilon) + alpha * neg_corr_loss(gates)


def detection_loss(objectness: Tensor, ltrb: Tensor,
                   pos_mask: np.ndarray, ltrb_targets: np.ndarray) -> dict[str, Tensor]:
    """Per-cell objectness BCE and smooth-L1 box regression on positive cells.

    ``objectness`` holds probabilities [b, h, w]; ``ltrb`` holds positive
    distances [b, 4, h, w] in the same units as ``ltrb_targets``. Regression
    is normalised by the positive-cell count (1 when there are none).
    """
    pos = np.asarray(pos_mask, dtype=np.float64)
    cls = bce_loss(pos, objectness)

    n_pos = max(float(pos.sum()), 1.0)
    mask = Tensor(pos[:, None, :, :])
    diff = (ltrb - Tensor(np.asarray(ltrb_targets, dtype=np.float64))) * mask
    a = diff.abs()
    quad_branch = Tensor((a.data < 1.0).astype(np.float64))
    per_elem = quad_branch * (0.5 * a * a) + (1.0 - quad_branch) * (a - 0.5)
    reg = per_elem.sum() * (1.0 / n_pos)
    return {"cls": cls, "reg": reg}


def total_loss(det: dict[str, Tensor], corr_max_per_level: list[Tensor]) -> Tensor:
    """Detection terms plus the mask/correlation term summed over fusion levels."""
    if not corr_max_per_level:
        raise ValueError("at least one fusion level is required")
    total = det["cls"] + det["reg"]
    for level in corr_max_per_level:
        total = total + level
    return total


@dataclass
class LossBreakdown:
    """Scalar loss components of one training step, for the CSV log."""

    bce: float
    dice: float
    seg: float
    neg_corr: float
    corr_max: float
    det_cls: float
    det_reg: float
    total: float
    alpha: float = DEFAULT_ALPHA
    epsilon: float = DICE_EPS

    COLUMNS = ("bce", "dice", "seg", "neg_corr", "corr_max",
               "det_cls", "det_reg", "total")

    def __post_init__(self):
        if abs(self.corr_max - (self.seg + self.alpha * self.neg_corr)) > 1e-12:
            raise ValueError("corr_max must equal seg + alpha * neg_corr")
        if abs(self.total - (self.det_cls + self.det_reg + self.corr_max)) > 1e-9:
            raise ValueError("total must equal det_cls + det_reg + corr_max")
        for name in self.COLUMNS:
            if getattr(self, name) < -1e-12:
                raise ValueError(f"loss component {name} is negative")

    def row(self) -> list[float]:
        return [getattr(self, name) for name in self.COLUMNS]
