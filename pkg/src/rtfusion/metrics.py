"""Detection metrics: greedy IoU matching, log-average miss rate, COCO-style
average precision, NMS, and the false-positive removal study.

Matching follows the usual benchmark protocol: per image, detections in
descending score order greedily claim the unmatched ground-truth box with
the highest IoU at or above the threshold. Miss-rate curves are sampled at
nine log-spaced false-positives-per-image references; the protocol constants
live in one record so they can be changed together.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .masks import GroundTruthBox


@dataclass
class Detection:
    """A scored box prediction in pixel coordinates."""

    box: tuple[float, float, float, float]
    score: float
    image_id: object = None

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x2 > x1 and y2 > y1):
            raise ValueError(f"degenerate detection box {self.box}")


@dataclass
class MatchResult:
    """Outcome of matching one detection against the ground truth."""

    detection: Detection
    status: str  # "TP" or "FP"
    iou: float  # TP: IoU with the matched box; FP: best IoU with any box
    matched_gt: GroundTruthBox | None = None
    image_id: object = None


@dataclass(frozen=True)
class MrProtocol:
    """Constants of the miss-rate evaluation protocol."""

    n_points: int = 9
    fppi_lo: float = 1e-2
    fppi_hi: float = 1.0
    miss_floor: float = 1e-5

    def references(self) -> np.ndarray:
        return np.logspace(np.log10(self.fppi_lo), np.log10(self.fppi_hi), self.n_points)


DEFAULT_MR_PROTOCOL = MrProtocol()

COCO_IOU_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.951, 0.05), 2))


def _box_tuple(box) -> tuple[float, float, float, float]:
    if hasattr(box, "as_tuple"):
        return box.as_tuple()
    if hasattr(box, "box"):
        return tuple(box.box)
    return tuple(box)


def iou(a, b) -> float:
    """Intersection over union of two boxes with half-open pixel bounds."""
    ax1, ay1, ax2, ay2 = _box_tuple(a)
    bx1, by1, bx2, by2 = _box_tuple(b)
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union


def _group_detections(dets) -> dict:
    if isinstance(dets, Mapping):
        return {k: list(v) for k, v in dets.items()}
    grouped: dict = {}
    for d in dets:
        grouped.setdefault(d.image_id, []).append(d)
    return grouped


def match_detections(dets, gts: Mapping[object, Sequence[GroundTruthBox]],
                     iou_thr: float = 0.5) -> list[MatchResult]:
    """Greedy score-priority matching; each ground-truth box is claimed once.

    ``dets`` may be a mapping from image id to detections or a flat iterable
    of detections carrying ``image_id``. Results are ordered by image key
    then descending score, which keeps downstream reports deterministic.
    """
    dets_by_image = _group_detections(dets)
    image_ids = list(dict.fromkeys(list(gts.keys()) + list(dets_by_image.keys())))
    results: list[MatchResult] = []
    for image_id in image_ids:
        image_dets = dets_by_image.get(image_id, [])
        image_gts = list(gts.get(image_id, []))
        order = sorted(range(len(image_dets)),
                       key=lambda i: (-image_dets[i].score, i))
        claimed = [False] * len(image_gts)
        for i in order:
            det = image_dets[i]
            ious = [iou(det, g) for g in image_gts]
            best_any = max(ious, default=0.0)
            best_j = -1
            best_iou = 0.0
            for j, value in enumerate(ious):
                if not claimed[j] and value >= iou_thr and value > best_iou:
                    best_iou = value
                    best_j = j
            if best_j >= 0:
                claimed[best_j] = True
                results.append(MatchResult(det, "TP", best_iou,
                                           image_gts[best_j], image_id))
            else:
                results.append(MatchResult(det, "FP", best_any, None, image_id))
    return results


def fn_per_image(matches: Iterable[MatchResult],
                 gts: Mapping[object, Sequence[GroundTruthBox]]) -> dict:
    """Unclaimed ground-truth boxes per image at the matching threshold."""
    tp_counts: dict = {k: 0 for k in gts}
    for m in matches:
        if m.status == "TP" and m.image_id in tp_counts:
            tp_counts[m.image_id] += 1
    return {k: len(v) - tp_counts[k] for k, v in gts.items()}


@dataclass
class MrCurve:
    points: list[tuple[float, float]]
    mr: float


def mr_fppi_curve(matches: Sequence[MatchResult], n_images: int, n_gt: int,
                  protocol: MrProtocol = DEFAULT_MR_PROTOCOL) -> MrCurve:
    """Log-average miss rate over log-spaced FPPI reference points.

    Thresholds sweep every distinct detection score; each reference point
    takes the miss rate of the most permissive threshold whose FPPI does not
    exceed the reference (miss rate 1.0 when none qualifies).
    """
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    if n_gt < 1:
        raise ValueError("miss rate is undefined without ground-truth boxes")

    scores = np.array([m.detection.score for m in matches], dtype=np.float64)
    is_tp = np.array([m.status == "TP" for m in matches], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    scores = scores[order]
    is_tp = is_tp[order]
    cum_tp = np.cumsum(is_tp)
    cum_fp = np.cumsum(1.0 - is_tp)

    # keep one operating point per distinct score: the last (most inclusive)
    if len(scores):
        last_of_value = np.nonzero(np.append(scores[1:] != scores[:-1], True))[0]
        fppi = cum_fp[last_of_value] / n_images
        miss = 1.0 - cum_tp[last_of_value] / n_gt
    else:
        fppi = np.empty(0)
        miss = np.empty(0)

    points = []
    for ref in protocol.references():
        feasible = np.nonzero(fppi <= ref)[0]
        value = miss[feasible[-1]] if feasible.size else 1.0
        points.append((float(ref), float(value)))
    log_misses = [np.log(max(miss_value, protocol.miss_floor)) for _, miss_value in points]
    return MrCurve(points, float(np.exp(np.mean(log_misses))))


@dataclass
class ApResult:
    ap50: float
    ap75: float
    ap: float
    per_threshold: dict = field(default_factory=dict)


def _ap_from_matches(matches: Sequence[MatchResult], n_gt: int) -> float:
    if not matches:
        return 0.0
    scores = np.array([m.detection.score for m in matches], dtype=np.float64)
    is_tp = np.array([m.status == "TP" for m in matches], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    is_tp = is_tp[order]
    cum_tp = np.cumsum(is_tp)
    cum_fp = np.cumsum(1.0 - is_tp)
    recall = cum_tp / n_gt
    precision = cum_tp / np.maximum(cum_tp + cum_fp, 1.0)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    recall_points = np.linspace(0.0, 1.0, 101)
    idx = np.searchsorted(recall, recall_points, side="left")
    sampled = np.where(idx < len(precision),
                       precision[np.minimum(idx, max(len(precision) - 1, 0))], 0.0)
    return float(sampled.mean())


def average_precision(dets, gts: Mapping[object, Sequence[GroundTruthBox]],
                      iou_thresholds: Sequence[float] = COCO_IOU_THRESHOLDS) -> ApResult:
    """COCO-style AP: matching re-run per IoU threshold, 101-point curves."""
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        raise ValueError("average precision is undefined without ground-truth boxes")
    per_threshold = {}
    for thr in iou_thresholds:
        matches = match_detections(dets, gts, iou_thr=thr)
        per_threshold[float(thr)] = _ap_from_matches(matches, n_gt)
    result = ApResult(
        ap50=per_threshold.get(0.5, float("nan")),
        ap75=per_threshold.get(0.75, float("nan")),
        ap=float(np.mean(list(per_threshold.values()))),
        per_threshold=per_threshold,
    )
    return result


def fp_ablation(matches: Sequence[MatchResult], mode: str, fractions: Sequence[float],
                n_images: int, n_gt: int,
                protocol: MrProtocol = DEFAULT_MR_PROTOCOL) -> list[tuple[float, float]]:
    """Recompute the miss rate after deleting a share of false positives.

    ``by_score`` deletes the highest-scoring false positives first;
    ``by_iou`` deletes those with the highest IoU against any ground truth.
    """
    if mode not in ("by_score", "by_iou"):
        raise ValueError(f"unknown ablation mode {mode!r}")
    keepers = [m for m in matches if m.status == "TP"]
    fps = [m for m in matches if m.status == "FP"]
    if mode == "by_score":
        fps.sort(key=lambda m: -m.detection.score)
    else:
        fps.sort(key=lambda m: -m.iou)
    curve = []
    for fraction in fractions:
        if not 0.0 <= fraction <= 1.0:
            raise ValueError("fractions must lie in [0, 1]")
        k = int(round(fraction * len(fps)))
        remaining = keepers + fps[k:]
        curve.append((float(fraction),
                      mr_fppi_curve(remaining, n_images, n_gt, protocol).mr))
    return curve


def greedy_nms(dets: Sequence[Detection], iou_thr: float) -> list[Detection]:
    """Keep the highest-scoring box, drop others overlapping at or above the
    threshold, repeat."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept: list[Detection] = []
    for i in order:
        if all(iou(dets[i], k) < iou_thr for k in kept):
            kept.append(dets[i])
    return kept


@dataclass
class MetricReport:
    """Headline numbers of one evaluation run."""

    mr: float
    ap50: float
    ap75: float
    ap: float
    fppi_points: list[tuple[float, float]]
    fp_count: int
    n_images: int
    n_gt: int

    COLUMNS = ("mr", "ap50", "ap75", "ap", "fp_count", "n_images", "n_gt")

    def row(self) -> list:
        return [self.mr, self.ap50, self.ap75, self.ap,
                self.fp_count, self.n_images, self.n_gt]
