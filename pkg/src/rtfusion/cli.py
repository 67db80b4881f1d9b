"""Command-line entry points.

Subcommands: generate-data, train, eval, analyze, ablate-fp, grad-check.
Detections and ground-truth boxes travel as line-delimited JSON records;
reports are CSV with the config hash embedded.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from . import tensor_io, verification
from .autodiff import no_grad
from .config import ExperimentConfig
from .dataset import generate_dataset, load_dataset, save_dataset
from .fusion import predict_offsets
from .masks import GroundTruthBox, anr_air, count_false_positives, relation_matrix
from .metrics import (DEFAULT_MR_PROTOCOL, Detection, fp_ablation,
                      match_detections, mr_fppi_curve)
from .model import luminance, backbone_forward
from .autodiff import Tensor
from .training import evaluate, load_trained, run_inference, train, write_report_csv


def _cmd_generate_data(args) -> int:
    samples = generate_dataset(args.seed, args.n, args.split,
                               image_size=args.image_size)
    save_dataset(samples, args.out)
    n_boxes = sum(len(s.boxes) for s in samples)
    print(f"wrote {len(samples)} images ({n_boxes} boxes) to {args.out}")
    return 0


def _cmd_train(args) -> int:
    config = ExperimentConfig.load(args.config)
    result = train(config, args.out)
    print(f"trained {result.steps} steps; final total loss {result.final_total:.4f}")
    print(f"checkpoint: {result.checkpoint_dir}")
    return 0


def _cmd_eval(args) -> int:
    detector, config = load_trained(args.checkpoint)
    samples = load_dataset(args.data)
    report = evaluate(detector, samples, report_path=args.report,
                      detections_path=args.detections)
    print(f"MR={report.mr:.4f} AP50={report.ap50:.4f} AP75={report.ap75:.4f} "
          f"AP={report.ap:.4f} FP@{config.fp_score_threshold}={report.fp_count}")
    return 0


def _cmd_analyze(args) -> int:
    detector, config = load_trained(args.checkpoint)
    samples = load_dataset(args.data)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    matrices = []
    gates_rows = []
    offsets_dir = out_dir / "offsets"
    relation_dir = out_dir / "relation"
    adaptive = config.ffm_variant.startswith("adaptive_rp")
    with no_grad():
        for idx, sample in enumerate(samples):
            pair = backbone_forward(detector.backbone,
                                    Tensor(luminance(sample.rgb[None])),
                                    Tensor(sample.thermal[None]))
            rm = relation_matrix(pair.rgb.data[0], pair.thermal.data[0],
                                 normalize=args.normalize)
            matrices.append(rm)
            if idx < args.n_dump:
                tensor_io.write_tensor(relation_dir / f"{sample.image_id}.tft", rm.entries)
            if adaptive and idx < args.n_dump:
                offsets = predict_offsets(pair, detector.ffm)
                tensor_io.write_tensor(offsets_dir / f"{sample.image_id}.tft",
                                       offsets.data[0])
            if detector.frm is not None:
                out = detector.forward(sample.rgb[None], sample.thermal[None])
                gates_rows.append([sample.image_id]
                                  + [repr(v) for v in out.refinement.gates.data[0]])

    result = anr_air(matrices)
    analysis_path = out_dir / "analysis.csv"
    new_file = not analysis_path.exists()
    with analysis_path.open("a", newline="") as fh:
        writer = csv.writer(fh)
        if new_file:
            writer.writerow(("dataset", "channels", "anr", "air", "n_excluded"))
        writer.writerow([args.data, config.channels, repr(result.anr),
                         repr(result.air), result.n_excluded])
    if gates_rows:
        with (out_dir / "gates.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image_id"] + [f"s_{i}" for i in range(config.channels)])
            writer.writerows(gates_rows)
    print(f"ANR={result.anr:.4f} AIR={result.air:.4f} "
          f"(excluded {result.n_excluded}/{result.n_matrices} matrices)")
    return 0


def read_detections_jsonl(path: str | Path) -> list[Detection]:
    detections = []
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        r = json.loads(line)
        detections.append(Detection(box=(r["x1"], r["y1"], r["x2"], r["y2"]),
                                    score=r["score"], image_id=r["image_id"]))
    return detections


def read_gt_jsonl(path: str | Path) -> dict:
    gts: dict = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        r = json.loads(line)
        gts.setdefault(r["image_id"], []).append(
            GroundTruthBox(r["x1"], r["y1"], r["x2"], r["y2"],
                           r.get("occlusion", "none")))
    return gts


def _cmd_ablate_fp(args) -> int:
    detections = read_detections_jsonl(args.detections)
    gts = read_gt_jsonl(args.gt)
    image_ids = set(gts) | {d.image_id for d in detections}
    n_gt = sum(len(v) for v in gts.values())
    matches = match_detections(detections, gts)
    fractions = [float(f) for f in args.fractions.split(",")]
    curve = fp_ablation(matches, args.mode, fractions, len(image_ids), n_gt)
    with Path(args.out).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("mode", "fraction", "mr"))
        for fraction, mr in curve:
            writer.writerow([args.mode, repr(fraction), repr(mr)])
    baseline = mr_fppi_curve(matches, len(image_ids), n_gt, DEFAULT_MR_PROTOCOL).mr
    print(f"baseline MR={baseline:.4f}; wrote {len(curve)} ablation points to {args.out}")
    return 0


def _cmd_grad_check(args) -> int:
    results = verification.run_suite(args.suite, seed=args.seed)
    for result in results:
        print(result.line())
    return 0 if all(r.passed for r in results) else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rtfusion",
                                     description="Desk-scale RGB-T fusion detector")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write a synthetic dataset to disk")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--image-size", type=int, default=64)
    p.set_defaults(func=_cmd_generate_data)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True)
    p.add_argument("--detections", default=None)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("analyze",
                       help="relation matrices, ANR/AIR, gate and offset dumps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default="analysis")
    p.add_argument("--n-dump", type=int, default=8)
    p.add_argument("--normalize", action="store_true",
                   help="L2-normalise channel maps before the inner products")
    p.set_defaults(func=_cmd_analyze)

    p = sub.add_parser("ablate-fp", help="miss rate after removing false positives")
    p.add_argument("--detections", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--mode", choices=("by_score", "by_iou"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fractions", default="0.0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")
    p.set_defaults(func=_cmd_ablate_fp)

    p = sub.add_parser("grad-check", help="finite-difference verification suites")
    p.add_argument("--suite", default="all", choices=("all", "ops", "losses", "model"))
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_grad_check)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
