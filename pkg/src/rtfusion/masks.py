"""Box-level masks and multispectral channel-similarity analysis."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Iterable, Sequence

import numpy as np

if TYPE_CHECKING:
    from .metrics import MatchResult

OCCLUSION_TAGS = ("none", "partial", "heavy")

# Rows whose off-diagonal mean or median falls below this are degenerate.
DEGENERATE_ROW_GUARD = 1e-12


@dataclass
class GroundTruthBox:
    """Axis-aligned annotation box, half-open: [x1, x2) x [y1, y2)."""

    x1: float
    y1: float
    x2: float
    y2: float
    occlusion: str = "none"

    def __post_init__(self):
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"degenerate box ({self.x1},{self.y1},{self.x2},{self.y2})")
        if self.occlusion not in OCCLUSION_TAGS:
            raise ValueError(f"unknown occlusion tag {self.occlusion!r}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def clipped(self, height: int, width: int) -> "GroundTruthBox":
        return GroundTruthBox(max(0.0, self.x1), max(0.0, self.y1),
                              min(float(width), self.x2), min(float(height), self.y2),
                              self.occlusion)


@dataclass
class BoxLevelMask:
    """Spatial mask; ground-truth variants hold only {0.0, 1.0}."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("a mask is a 2-D grid")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def rasterize_boxes(boxes: Sequence[GroundTruthBox], height: int, width: int) -> BoxLevelMask:
    """Fill box interiors with ones; a pixel counts as inside per half-open bounds."""
    values = np.zeros((height, width), dtype=np.float64)
    for box in boxes:
        y1 = max(0, int(np.ceil(box.y1)))
        x1 = max(0, int(np.ceil(box.x1)))
        y2 = min(height, int(np.ceil(box.y2)))
        x2 = min(width, int(np.ceil(box.x2)))
        if y2 > y1 and x2 > x1:
            values[y1:y2, x1:x2] = 1.0
    return BoxLevelMask(values)


def downsample_mask_nearest(mask: BoxLevelMask, factor: int) -> BoxLevelMask:
    """Nearest-neighbour downsample taking the top-left sample of each block."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if mask.height % factor or mask.width % factor:
        raise ValueError(f"factor {factor} does not divide {mask.height}x{mask.width}")
    return BoxLevelMask(mask.values[::factor, ::factor].copy())


@dataclass
class RelationMatrix:
    """Channel-by-channel inner products between two feature stacks."""

    entries: np.ndarray

    def __post_init__(self):
        self.entries = np.asarray(self.entries, dtype=np.float64)
        if self.entries.ndim != 2 or self.entries.shape[0] != self.entries.shape[1]:
            raise ValueError("relation matrix must be square")

    @property
    def channels(self) -> int:
        return self.entries.shape[0]


def _as_stack(features) -> np.ndarray:
    data = getattr(features, "data", features)
    stack = np.asarray(data, dtype=np.float64)
    if stack.ndim != 3:
        raise ValueError("expected a feature stack of shape [c, h, w]")
    return stack


def relation_matrix(rgb, thermal, normalize: bool = False) -> RelationMatrix:
    """Inner products of every rgb channel map with every thermal channel map.

    Entry (i, j) is flat(rgb[i]) . flat(thermal[j]). With ``normalize`` each
    channel map is L2-normalised first (guarding zero norms).
    """
    a = _as_stack(rgb)
    b = _as_stack(thermal)
    if a.shape != b.shape:
        raise ValueError(f"feature stacks differ in shape: {a.shape} vs {b.shape}")
    c = a.shape[0]
    af = a.reshape(c, -1)
    bf = b.reshape(c, -1)
    if normalize:
        an = np.linalg.norm(af, axis=1, keepdims=True)
        bn = np.linalg.norm(bf, axis=1, keepdims=True)
        af = af / np.where(an == 0.0, 1.0, an)
        bf = bf / np.where(bn == 0.0, 1.0, bn)
    return RelationMatrix(af @ bf.T)


@dataclass
class AnrAirResult:
    anr: float
    air: float
    n_matrices: int
    n_excluded: int
    per_matrix: list[tuple[float, float]] = field(default_factory=list)


def anr_air(matrices: Iterable[RelationMatrix]) -> AnrAirResult:
    """Dataset-average ratios of diagonal to off-diagonal row statistics.

    Per matrix: NR averages diag/mean(off-diagonal of the row) over rows, IR
    uses the row median. A matrix with any off-diagonal row mean or median
    below the degeneracy guard is excluded and counted.
    """
    nr_values = []
    ir_values = []
    n_excluded = 0
    n_total = 0
    for rm in matrices:
        n_total += 1
        m = rm.entries
        c = rm.channels
        if c < 2:
            raise ValueError("relation matrix needs at least 2 channels")
        off = m[~np.eye(c, dtype=bool)].reshape(c, c - 1)
        means = off.mean(axis=1)
        medians = np.median(off, axis=1)
        if np.any(np.abs(means) < DEGENERATE_ROW_GUARD) or \
                np.any(np.abs(medians) < DEGENERATE_ROW_GUARD):
            n_excluded += 1
            continue
        diag = np.diag(m)
        nr_values.append(float(np.mean(diag / means)))
        ir_values.append(float(np.mean(diag / medians)))
    if not nr_values:
        raise ValueError(f"all {n_total} relation matrices were degenerate")
    return AnrAirResult(
        anr=float(np.mean(nr_values)),
        air=float(np.mean(ir_values)),
        n_matrices=n_total,
        n_excluded=n_excluded,
        per_matrix=list(zip(nr_values, ir_values)),
    )


def count_false_positives(matches: Iterable["MatchResult"], score_threshold: float) -> int:
    """Unmatched detections at or above the score threshold."""
    return sum(1 for m in matches
               if m.status == "FP" and m.detection.score >= score_threshold)
