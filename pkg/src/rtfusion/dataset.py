"""Synthetic paired RGB/thermal scenes with box annotations.

Each image holds a smooth textured background, up to a few "pedestrians"
(upright rectangles that are warm in thermal and coloured in RGB), and up to
a few single-modality distractors: warm non-upright blobs that appear only
in thermal, and pedestrian-shaped cold patches that appear only in RGB. The
distractors supply the false-positive pressure the fusion strategy is meant
to suppress. Half of a split (configurable) is "night": RGB contrast is
attenuated to 20 percent.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .masks import GroundTruthBox
from . import tensor_io


@dataclass
class DatasetSample:
    image_id: str
    rgb: np.ndarray  # [3, H, W] in [0, 1]
    thermal: np.ndarray  # [1, H, W] in [0, 1]
    boxes: list[GroundTruthBox] = field(default_factory=list)
    is_night: bool = False


def _upsample_bilinear(grid: np.ndarray, size: int) -> np.ndarray:
    gh, gw = grid.shape
    ys = np.linspace(0.0, gh - 1.0, size)
    xs = np.linspace(0.0, gw - 1.0, size)
    y0 = np.clip(np.floor(ys).astype(int), 0, gh - 2)
    x0 = np.clip(np.floor(xs).astype(int), 0, gw - 2)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    v00 = grid[np.ix_(y0, x0)]
    v01 = grid[np.ix_(y0, x0 + 1)]
    v10 = grid[np.ix_(y0 + 1, x0)]
    v11 = grid[np.ix_(y0 + 1, x0 + 1)]
    return (v00 * (1 - fx) + v01 * fx) * (1 - fy) + (v10 * (1 - fx) + v11 * fx) * fy


def _place_box(rng, size, box_w, box_h, existing, max_overlap, attempts=12):
    for _ in range(attempts):
        x1 = int(rng.integers(0, size - box_w + 1))
        y1 = int(rng.integers(0, size - box_h + 1))
        candidate = (x1, y1, x1 + box_w, y1 + box_h)
        if all(_overlap_ratio(candidate, other) <= max_overlap for other in existing):
            return candidate
    return None


def _overlap_ratio(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    smaller = min((a[2] - a[0]) * (a[3] - a[1]), (b[2] - b[0]) * (b[3] - b[1]))
    return inter / smaller


def generate_dataset(seed: int, n_images: int, split: str = "train",
                     image_size: int = 64, max_pedestrians: int = 3,
                     max_distractors: int = 2, night_fraction: float = 0.5) -> list[DatasetSample]:
    """Deterministic synthetic split; the same arguments always produce the
    same bytes."""
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    rng = np.random.default_rng([seed & 0xFFFFFFFF, zlib.crc32(split.encode())])
    size = image_size
    samples = []
    for i in range(n_images):
        # smooth low-frequency background, drawn independently per channel
        rgb = np.stack([
            _upsample_bilinear(rng.uniform(0.15, 0.55, (9, 9)), size)
            for _ in range(3)
        ])
        thermal = _upsample_bilinear(rng.uniform(0.10, 0.35, (9, 9)), size)[None]

        boxes: list[GroundTruthBox] = []
        occupied: list[tuple[int, int, int, int]] = []

        n_ped = int(rng.integers(0, max_pedestrians + 1))
        for _ in range(n_ped):
            w = int(rng.integers(6, 13))
            h = int(rng.integers(14, 29))
            spot = _place_box(rng, size, w, h, occupied, max_overlap=0.2)
            if spot is None:
                continue
            x1, y1, x2, y2 = spot
            occupied.append(spot)
            boxes.append(GroundTruthBox(x1, y1, x2, y2))
            heat = rng.uniform(0.75, 0.95)
            thermal[0, y1:y2, x1:x2] = heat + rng.normal(0.0, 0.02, (h, w))
            colour = rng.uniform(0.55, 0.90, 3)
            rgb[:, y1:y2, x1:x2] = colour[:, None, None] + rng.normal(0.0, 0.02, (3, h, w))

        n_dis = int(rng.integers(0, max_distractors + 1))
        for _ in range(n_dis):
            if rng.uniform() < 0.5:
                # warm blob, wider than tall, visible only in thermal
                w = int(rng.integers(10, 21))
                h = int(rng.integers(4, 10))
                spot = _place_box(rng, size, w, h, occupied, max_overlap=0.1)
                if spot is None:
                    continue
                x1, y1, x2, y2 = spot
                occupied.append(spot)
                heat = rng.uniform(0.75, 0.95)
                thermal[0, y1:y2, x1:x2] = heat + rng.normal(0.0, 0.02, (h, w))
            else:
                # pedestrian-shaped coloured patch, visible only in RGB
                w = int(rng.integers(6, 13))
                h = int(rng.integers(14, 29))
                spot = _place_box(rng, size, w, h, occupied, max_overlap=0.1)
                if spot is None:
                    continue
                x1, y1, x2, y2 = spot
                occupied.append(spot)
                colour = rng.uniform(0.55, 0.90, 3)
                rgb[:, y1:y2, x1:x2] = colour[:, None, None] + rng.normal(0.0, 0.02, (3, h, w))

        is_night = int(np.floor((i + 1) * night_fraction) - np.floor(i * night_fraction)) == 1
        if is_night:
            rgb *= 0.2

        samples.append(DatasetSample(
            image_id=f"{split}-{seed}-{i:05d}",
            rgb=np.clip(rgb, 0.0, 1.0),
            thermal=np.clip(thermal, 0.0, 1.0),
            boxes=boxes,
            is_night=is_night,
        ))
    return samples


# ---------------------------------------------------------------------------
# On-disk layout: one TFT1 tensor per modality plus an annotations JSONL
# ---------------------------------------------------------------------------

def save_dataset(samples: list[DatasetSample], directory: str | Path) -> None:
    directory = Path(directory)
    (directory / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for s in samples:
        tensor_io.write_tensor(directory / "images" / f"{s.image_id}_rgb.tft", s.rgb)
        tensor_io.write_tensor(directory / "images" / f"{s.image_id}_thermal.tft", s.thermal)
        lines.append(json.dumps({
            "image_id": s.image_id,
            "is_night": s.is_night,
            "boxes": [[b.x1, b.y1, b.x2, b.y2, b.occlusion] for b in s.boxes],
        }, sort_keys=True))
    (directory / "annotations.jsonl").write_text("\n".join(lines) + "\n")


def load_dataset(directory: str | Path) -> list[DatasetSample]:
    directory = Path(directory)
    samples = []
    for line in (directory / "annotations.jsonl").read_text().splitlines():
        if not line.strip():
            continue
        record = json.loads(line)
        image_id = record["image_id"]
        samples.append(DatasetSample(
            image_id=image_id,
            rgb=tensor_io.read_tensor(directory / "images" / f"{image_id}_rgb.tft"),
            thermal=tensor_io.read_tensor(directory / "images" / f"{image_id}_thermal.tft"),
            boxes=[GroundTruthBox(b[0], b[1], b[2], b[3], b[4]) for b in record["boxes"]],
            is_night=record["is_night"],
        ))
    return samples
