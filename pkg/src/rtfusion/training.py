"""Training loop, checkpointing, and end-to-end evaluation.

A run is fully determined by its config (which includes the seed): dataset
generation, parameter init, batch shuffling, and flip augmentation all draw
from generators derived from that seed, so repeated runs produce
byte-identical checkpoints and logs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor_io
from .autodiff import SGD, Tensor, no_grad
from .config import ExperimentConfig
from .dataset import DatasetSample, generate_dataset
from .losses import (LossBreakdown, bce_loss, detection_loss, dice_loss,
                     neg_corr_loss, total_loss)
from .masks import GroundTruthBox, count_false_positives, downsample_mask_nearest, rasterize_boxes
from .metrics import (DEFAULT_MR_PROTOCOL, Detection, MetricReport,
                      average_precision, match_detections, mr_fppi_curve)
from .model import Detector, decode_and_nms, encode_targets

CHECKPOINT_DIR = "checkpoint"
LOSS_LOG = "loss_log.csv"


@dataclass
class TrainResult:
    out_dir: Path
    checkpoint_dir: Path
    loss_log: Path
    steps: int
    final_total: float


def _flip_sample(sample: DatasetSample, width: int) -> DatasetSample:
    boxes = [GroundTruthBox(width - b.x2, b.y1, width - b.x1, b.y2, b.occlusion)
             for b in sample.boxes]
    return DatasetSample(image_id=sample.image_id,
                         rgb=sample.rgb[:, :, ::-1].copy(),
                         thermal=sample.thermal[:, :, ::-1].copy(),
                         boxes=boxes, is_night=sample.is_night)


def _batch_masks(samples: list[DatasetSample], config: ExperimentConfig) -> np.ndarray:
    """Ground-truth box masks rasterised at image size, downsampled to the grid."""
    grids = []
    for s in samples:
        full = rasterize_boxes(s.boxes, config.image_size, config.image_size)
        grids.append(downsample_mask_nearest(full, config.fusion_stride).values)
    return np.stack(grids)


def train(config: ExperimentConfig, out_dir: str | Path,
          train_samples: list[DatasetSample] | None = None) -> TrainResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if train_samples is None:
        train_samples = generate_dataset(
            config.seed, config.n_train_images, "train",
            image_size=config.image_size, max_pedestrians=config.max_pedestrians,
            max_distractors=config.max_distractors, night_fraction=config.night_fraction)

    detector = Detector(config, rng=np.random.default_rng([config.seed, 1]))
    params = detector.parameters()
    optimizer = SGD(params, lr=config.lr, momentum=config.momentum)
    shuffle_rng = np.random.default_rng([config.seed, 2])
    flip_rng = np.random.default_rng([config.seed, 3])

    n = len(train_samples)
    batches_per_epoch = (n + config.batch_size - 1) // config.batch_size
    total_steps = config.epochs * batches_per_epoch
    decay_steps = {int(total_steps * frac) for frac in config.decay_at}

    use_corr = config.frm_enabled and (config.use_seg or config.use_neg_corr)
    step = 0
    final_total = float("nan")
    loss_log = out_dir / LOSS_LOG
    with loss_log.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("step",) + LossBreakdown.COLUMNS)
        for _ in range(config.epochs):
            order = shuffle_rng.permutation(n)
            for start in range(0, n, config.batch_size):
                if step in decay_steps:
                    optimizer.lr *= 0.1
                batch = [train_samples[i] for i in order[start:start + config.batch_size]]
                batch = [_flip_sample(s, config.image_size)
                         if flip_rng.uniform() < config.flip_probability else s
                         for s in batch]

                rgb = np.stack([s.rgb for s in batch])
                thermal = np.stack([s.thermal for s in batch])
                outputs = detector.forward(rgb, thermal)

                pos, ltrb_t = encode_targets([s.boxes for s in batch],
                                             config.feature_size, config.fusion_stride)
                det = detection_loss(outputs.head.objectness, outputs.head.ltrb, pos, ltrb_t)

                zero = Tensor(0.0)
                bce_t = dice_t = seg_t = neg_t = zero
                effective_alpha = config.alpha if config.use_neg_corr else 0.0
                if use_corr:
                    refinement = outputs.refinement
                    if config.use_seg:
                        gt_masks = _batch_masks(batch, config)
                        bce_t = bce_loss(gt_masks, refinement.mask)
                        dice_t = dice_loss(gt_masks, refinement.mask, config.epsilon)
                        seg_t = bce_t + dice_t
                    if config.use_neg_corr:
                        neg_t = neg_corr_loss(refinement.gates)
                    corr_t = seg_t + effective_alpha * neg_t
                else:
                    corr_t = zero
                total_t = total_loss(det, [corr_t])

                breakdown = LossBreakdown(
                    bce=bce_t.item(), dice=dice_t.item(), seg=seg_t.item(),
                    neg_corr=neg_t.item(), corr_max=corr_t.item(),
                    det_cls=det["cls"].item(), det_reg=det["reg"].item(),
                    total=total_t.item(), alpha=effective_alpha, epsilon=config.epsilon)
                if not np.isfinite(breakdown.total):
                    raise RuntimeError(f"non-finite loss at step {step}: {breakdown}")
                writer.writerow([step] + [repr(v) for v in breakdown.row()])

                total_t.backward()
                optimizer.step()
                final_total = breakdown.total
                step += 1

    checkpoint_dir = out_dir / CHECKPOINT_DIR
    tensor_io.save_checkpoint(checkpoint_dir, params, config.to_text(),
                              config.config_hash(), extra={"steps": step})
    config.save(out_dir / "config.txt")
    return TrainResult(out_dir=out_dir, checkpoint_dir=checkpoint_dir,
                       loss_log=loss_log, steps=step, final_total=final_total)


def load_trained(checkpoint_dir: str | Path) -> tuple[Detector, ExperimentConfig]:
    """Rebuild the detector recorded in a checkpoint directory."""
    manifest = tensor_io.load_manifest(checkpoint_dir)
    config = ExperimentConfig.from_text(manifest["config"])
    if config.config_hash() != manifest["config_hash"]:
        raise ValueError("checkpoint config hash does not match its config text")
    detector = Detector(config)
    tensor_io.load_checkpoint(checkpoint_dir, detector.parameters())
    return detector, config


def run_inference(detector: Detector, samples: list[DatasetSample]) -> list[Detection]:
    """Batched forward passes, decoding, and per-image NMS."""
    config = detector.config
    detections: list[Detection] = []
    with no_grad():
        for start in range(0, len(samples), config.batch_size):
            batch = samples[start:start + config.batch_size]
            rgb = np.stack([s.rgb for s in batch])
            thermal = np.stack([s.thermal for s in batch])
            outputs = detector.forward(rgb, thermal)
            obj = outputs.head.objectness.data
            ltrb = outputs.head.ltrb.data
            for k, sample in enumerate(batch):
                detections += decode_and_nms(obj[k], ltrb[k], config.fusion_stride,
                                             config.score_floor, config.nms_iou,
                                             image_id=sample.image_id)
    return detections


def evaluate(detector: Detector, samples: list[DatasetSample],
             report_path: str | Path | None = None,
             detections_path: str | Path | None = None) -> MetricReport:
    """Inference plus matching, miss rate, AP, and the FP count at the
    configured score threshold."""
    config = detector.config
    if not samples:
        raise ValueError("cannot evaluate on an empty dataset")
    gts = {s.image_id: s.boxes for s in samples}
    n_gt = sum(len(v) for v in gts.values())
    if n_gt == 0:
        raise ValueError("cannot evaluate without ground-truth boxes")

    detections = run_inference(detector, samples)
    matches = match_detections(detections, gts, iou_thr=0.5)
    curve = mr_fppi_curve(matches, len(samples), n_gt, DEFAULT_MR_PROTOCOL)
    ap = average_precision(detections, gts)
    report = MetricReport(
        mr=curve.mr, ap50=ap.ap50, ap75=ap.ap75, ap=ap.ap,
        fppi_points=curve.points,
        fp_count=count_false_positives(matches, config.fp_score_threshold),
        n_images=len(samples), n_gt=n_gt)

    if detections_path is not None:
        _write_detections(detections_path, detections)
    if report_path is not None:
        write_report_csv(report_path, report, config.config_hash())
    return report


def _write_detections(path: str | Path, detections: list[Detection]) -> None:
    import json
    lines = [json.dumps({"image_id": d.image_id,
                         "x1": d.box[0], "y1": d.box[1],
                         "x2": d.box[2], "y2": d.box[3],
                         "score": d.score}, sort_keys=True)
             for d in detections]
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def write_report_csv(path: str | Path, report: MetricReport, config_hash: str) -> None:
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("config_hash",) + MetricReport.COLUMNS
                        + tuple(f"fppi_{ref:g}" for ref, _ in report.fppi_points))
        writer.writerow([config_hash] + [repr(v) for v in report.row()]
                        + [repr(miss) for _, miss in report.fppi_points])
