"""Experiment configuration: one flat record serialised as key=value text.

Every checkpoint and report embeds the sha256 hash of the canonical text so
results can always be traced back to the exact settings that produced them.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, fields
from pathlib import Path


@dataclass
class ExperimentConfig:
    # model
    image_size: int = 64
    channels: int = 16
    fusion_stride: int = 8
    ffm_variant: str = "adaptive_rp_globalcc"
    frm_enabled: bool = True
    gate_bias_init: float = 2.0
    # loss switches
    use_seg: bool = True
    use_neg_corr: bool = True
    alpha: float = 0.1
    epsilon: float = 1.0
    # optimisation
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 4
    batch_size: int = 8
    seed: int = 0
    # lr decays by 0.1 at these fractions of the total step count
    decay_at: tuple[float, float] = (2.0 / 3.0, 11.0 / 12.0)
    # data
    n_train_images: int = 2000
    n_val_images: int = 500
    max_pedestrians: int = 3
    max_distractors: int = 2
    night_fraction: float = 0.5
    flip_probability: float = 0.5
    # inference
    nms_iou: float = 0.5
    score_floor: float = 0.05
    fp_score_threshold: float = 0.3

    def __post_init__(self):
        if self.image_size % self.fusion_stride != 0:
            raise ValueError("fusion stride must divide the image size")
        if self.channels % 2 != 0:
            raise ValueError("channel count must be even")
        if not 0.0 <= self.night_fraction <= 1.0:
            raise ValueError("night_fraction must lie in [0, 1]")

    @property
    def feature_size(self) -> int:
        return self.image_size // self.fusion_stride

    def to_text(self) -> str:
        lines = []
        for f in sorted(fields(self), key=lambda f: f.name):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                text = ",".join(repr(float(v)) for v in value)
            elif isinstance(value, str):
                text = value
            else:
                text = repr(value)
            lines.append(f"{f.name}={text}")
        return "\n".join(lines) + "\n"

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_text())

    @classmethod
    def from_text(cls, text: str) -> "ExperimentConfig":
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        defaults = cls()
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, raw = line.partition("=")
            key = key.strip()
            raw = raw.strip()
            if key not in types:
                raise ValueError(f"unknown config key {key!r}")
            current = getattr(defaults, key)
            if isinstance(current, bool):
                kwargs[key] = raw in ("True", "true", "1")
            elif isinstance(current, int):
                kwargs[key] = int(raw)
            elif isinstance(current, float):
                kwargs[key] = float(raw)
            elif isinstance(current, tuple):
                kwargs[key] = tuple(float(v) for v in raw.split(","))
            else:
                kwargs[key] = raw
        return cls(**kwargs)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text())
