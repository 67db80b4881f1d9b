"""Desk-scale two-branch detector: weight-sharing backbone, fusion neck,
anchor-free one-stage head.

The backbone is three stride-2 conv+relu blocks applied with the same
weights to the RGB luminance and the thermal map. The head predicts one
objectness probability and four positive (left, top, right, bottom) cell
distances, in stride units, per feature cell. A cell is positive when its
centre lies inside a ground-truth box; ties go to the smaller box.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Parameter, Tensor, conv2d
from .config import ExperimentConfig
from .fusion import FeaturePair, FusionParams, ffm_forward
from .masks import GroundTruthBox
from .metrics import Detection, greedy_nms
from .refinement import RefinementOutput, RefinementParams, frm_forward

LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


def luminance(rgb: np.ndarray) -> np.ndarray:
    """Collapse [b, 3, h, w] RGB to a single luminance channel."""
    return np.tensordot(LUMA_WEIGHTS, rgb, axes=(0, 1))[:, None]


def _he(rng, shape, fan_in):
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class BackboneParams:
    """Three shared stride-2 blocks: 1 -> c/2 -> c -> c channels."""

    def __init__(self, channels: int, rng: np.random.Generator, prefix: str = "backbone"):
        c = channels
        widths = [(1, c // 2), (c // 2, c), (c, c)]
        self._params: list[Parameter] = []
        self.layers = []
        for idx, (cin, cout) in enumerate(widths, start=1):
            w = Parameter(f"{prefix}.conv{idx}.weight", _he(rng, (cout, cin, 3, 3), cin * 9))
            b = Parameter(f"{prefix}.conv{idx}.bias", np.zeros(cout))
            self.layers.append((w, b))
            self._params += [w, b]

    def parameters(self) -> list[Parameter]:
        return list(self._params)


def backbone_forward(params: BackboneParams, rgb: Tensor, thermal: Tensor) -> FeaturePair:
    """Run both modalities through the same stem (single weight set)."""

    def stem(x: Tensor) -> Tensor:
        for w, b in params.layers:
            x = conv2d(x, w, b, stride=2, padding=1).relu()
        return x

    return FeaturePair(rgb=stem(rgb), thermal=stem(thermal))


class HeadParams:
    def __init__(self, channels: int, rng: np.random.Generator, prefix: str = "head"):
        c = channels
        self._params: list[Parameter] = []

        def add(name, data):
            p = Parameter(f"{prefix}.{name}", data)
            self._params.append(p)
            return p

        self.conv1 = add("conv1.weight", _he(rng, (c, c, 3, 3), c * 9))
        self.bias1 = add("conv1.bias", np.zeros(c))
        self.conv2 = add("conv2.weight", _he(rng, (c, c, 3, 3), c * 9))
        self.bias2 = add("conv2.bias", np.zeros(c))
        self.obj_kernel = add("obj.weight", _he(rng, (1, c, 1, 1), c))
        self.obj_bias = add("obj.bias", np.zeros(1))
        self.reg_kernel = add("reg.weight", _he(rng, (4, c, 1, 1), c))
        self.reg_bias = add("reg.bias", np.zeros(4))

    def parameters(self) -> list[Parameter]:
        return list(self._params)


@dataclass
class HeadOutputs:
    objectness: Tensor  # [b, h, w], probabilities
    ltrb: Tensor  # [b, 4, h, w], positive distances in stride units


def head_forward(params: HeadParams, feature: Tensor) -> HeadOutputs:
    b, _, h, w = feature.shape
    x = conv2d(feature, params.conv1, params.bias1, padding=1).relu()
    x = conv2d(x, params.conv2, params.bias2, padding=1).relu()
    obj = conv2d(x, params.obj_kernel, params.obj_bias).sigmoid().reshape(b, h, w)
    ltrb = conv2d(x, params.reg_kernel, params.reg_bias).softplus()
    return HeadOutputs(objectness=obj, ltrb=ltrb)


@dataclass
class ForwardOutputs:
    pair: FeaturePair
    fused: Tensor
    refinement: RefinementOutput | None
    head: HeadOutputs

    @property
    def detector_feature(self) -> Tensor:
        return self.refinement.refined if self.refinement is not None else self.fused


class Detector:
    """The full pipeline assembled from one experiment config."""

    def __init__(self, config: ExperimentConfig, rng: np.random.Generator | None = None):
        self.config = config
        rng = rng or np.random.default_rng(config.seed)
        c = config.channels
        self.backbone = BackboneParams(c, rng)
        self.ffm = FusionParams(c, config.ffm_variant, rng)
        self.frm = (RefinementParams(c, rng, gate_bias_init=config.gate_bias_init)
                    if config.frm_enabled else None)
        self.head = HeadParams(c, rng)

    def parameters(self) -> list[Parameter]:
        params = self.backbone.parameters() + self.ffm.parameters()
        if self.frm is not None:
            params += self.frm.parameters()
        params += self.head.parameters()
        names = [p.name for p in params]
        if len(names) != len(set(names)):
            raise ValueError("duplicate parameter names in the model")
        return params

    def forward(self, rgb: np.ndarray, thermal: np.ndarray) -> ForwardOutputs:
        lum = Tensor(luminance(rgb))
        pair = backbone_forward(self.backbone, lum, Tensor(thermal))
        fused = ffm_forward(pair, self.ffm)
        refinement = frm_forward(fused, self.frm) if self.frm is not None else None
        feature = refinement.refined if refinement is not None else fused
        return ForwardOutputs(pair=pair, fused=fused, refinement=refinement,
                              head=head_forward(self.head, feature))


# ---------------------------------------------------------------------------
# Target assignment and box decoding
# ---------------------------------------------------------------------------

def encode_targets(boxes_per_image: list[list[GroundTruthBox]], feature_size: int,
                   stride: int) -> tuple[np.ndarray, np.ndarray]:
    """Centre-inside assignment onto the feature grid, in stride units."""
    b = len(boxes_per_image)
    h = w = feature_size
    pos = np.zeros((b, h, w), dtype=np.float64)
    ltrb = np.zeros((b, 4, h, w), dtype=np.float64)
    for bi, boxes in enumerate(boxes_per_image):
        for i in range(h):
            cy = (i + 0.5) * stride
            for j in range(w):
                cx = (j + 0.5) * stride
                inside = [box for box in boxes
                          if box.x1 <= cx < box.x2 and box.y1 <= cy < box.y2]
                if not inside:
                    continue
                box = min(inside, key=lambda bx: bx.area)
                pos[bi, i, j] = 1.0
                ltrb[bi, :, i, j] = [(cx - box.x1) / stride, (cy - box.y1) / stride,
                                     (box.x2 - cx) / stride, (box.y2 - cy) / stride]
    return pos, ltrb


def decode_boxes(objectness: np.ndarray, ltrb: np.ndarray, stride: int,
                 score_floor: float, image_id: object = None) -> list[Detection]:
    """Turn one image's dense predictions into scored boxes (no suppression)."""
    h, w = objectness.shape
    detections = []
    for i in range(h):
        for j in range(w):
            score = float(objectness[i, j])
            if score < score_floor:
                continue
            cy = (i + 0.5) * stride
            cx = (j + 0.5) * stride
            left, top, right, bottom = ltrb[:, i, j] * stride
            box = (cx - left, cy - top, cx + right, cy + bottom)
            detections.append(Detection(box=box, score=score, image_id=image_id))
    return detections


def decode_and_nms(objectness: np.ndarray, ltrb: np.ndarray, stride: int,
                   score_floor: float, nms_iou: float,
                   image_id: object = None) -> list[Detection]:
    """Decode cells at or above the score floor, then greedy NMS."""
    return greedy_nms(decode_boxes(objectness, ltrb, stride, score_floor, image_id),
                      nms_iou)
