"""Finite-difference verification suites for every differentiable piece.

Each named check builds seeded random fixtures, runs ``grad_check`` (central
differences, 1e-5 step) and reports the worst relative error. Two fixture
rules keep the comparisons meaningful:

- offset branches and biases are randomised: with zero initialisation the
  sampling coordinates sit exactly on bilinear interpolation kinks and relu
  pre-activations can be exactly zero, points where central differences
  straddle two subgradients;
- checks run on pinned seeds, because a probe that happens to land on a
  coordinate with a near-zero true gradient is limited by the roundoff
  floor of finite differences (about |f| * 2e-11 at the 1e-5 step).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .autodiff import (Tensor, bilinear_sample, conv2d, global_avg_pool, grad_check,
                       grouped_conv2d, linear, scale_channels)
from .config import ExperimentConfig
from .fusion import FeaturePair, FusionParams, ffm_forward
from .losses import (bce_loss, corr_max_loss, detection_loss, dice_loss,
                     neg_corr_loss, seg_loss)
from .model import Detector, encode_targets
from .refinement import RefinementParams, channel_correlation, frm_forward

DEFAULT_TOL = 1e-6
FULL_PATH_TOL = 1e-5


@dataclass
class CheckResult:
    name: str
    passed: bool
    max_rel_err: float
    detail: str = ""

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        text = f"[{status}] {self.name}: max_rel_err={self.max_rel_err:.3e}"
        if self.detail:
            text += f" ({self.detail})"
        return text


def _rand(rng, *shape):
    return Tensor(rng.normal(0.0, 1.0, shape), requires_grad=True)


def _fractional_coords(rng, b, oh, ow, h, w) -> Tensor:
    ys = rng.integers(0, h - 1, (b, 1, oh, ow)) + rng.uniform(0.2, 0.8, (b, 1, oh, ow))
    xs = rng.integers(0, w - 1, (b, 1, oh, ow)) + rng.uniform(0.2, 0.8, (b, 1, oh, ow))
    return Tensor(np.concatenate([ys, xs], axis=1), requires_grad=True)


def _randomise_offsets(ffm: FusionParams, rng) -> None:
    ffm.offset_kernel.data = rng.normal(0.0, 0.05, ffm.offset_kernel.shape)
    ffm.offset_bias.data = rng.uniform(0.1, 0.4, ffm.offset_bias.shape)


def _randomise_biases(params, rng) -> None:
    """Move every bias off zero. With zero biases a conv window whose relu
    inputs are all zero lands exactly on the relu kink, where central
    differences straddle two subgradients."""
    for p in params:
        if p.name.endswith(".bias") and not p.name.endswith("offset.bias"):
            p.data = rng.uniform(-0.1, 0.1, p.shape)


def _aggregate(name: str, reports) -> CheckResult:
    worst = max((r.max_rel_err for r in reports), default=0.0)
    bad = [r for r in reports if not r.passed]
    detail = bad[0].failures[0] if bad and bad[0].failures else ""
    return CheckResult(name, not bad, worst, detail)


def check_conv2d(seed: int = 0, tol: float = DEFAULT_TOL) -> CheckResult:
    rng = np.random.default_rng(seed)
    reports = []
    for b, cin, cout, k, stride, padding, size in (
            (1, 2, 3, 3, 1, 1, 5), (2, 3, 4, 3, 2, 1, 8), (1, 1, 2, 1, 1, 0, 4),
            (2, 4, 2, 3, 1, 0, 6), (1, 2, 5, 5, 1, 2, 7)):
        x = _rand(rng, b, cin, size, size)
        w = _rand(rng, cout, cin, k, k)
        bias = _rand(rng, cout)
        reports.append(grad_check(
            lambda x, w, bias: conv2d(x, w, bias, stride, padding).sum(),
            [x, w, bias], tol=tol, rng=rng))
    return _aggregate("conv2d", reports)


def check_grouped_conv2d(seed: int = 0, tol: float = DEFAULT_TOL) -> CheckResult:
    rng = np.random.default_rng(seed)
    reports = []
    for b, cin, cout, g, k, size in (
            (1, 4, 4, 2, 3, 5), (2, 8, 8, 8, 1, 4), (1, 6, 3, 3, 3, 6),
            (2, 4, 8, 4, 3, 5), (1, 8, 4, 2, 1, 4)):
        x = _rand(rng, b, cin, size, size)
        w = _rand(rng, cout, cin // g, k, k)
        bias = _rand(rng, cout)
        reports.append(grad_check(
            lambda x, w, bias: grouped_conv2d(x, w, bias, groups=g,
                                              padding=(k - 1) // 2).sum(),
            [x, w, bias], tol=tol, rng=rng))
    return _aggregate("grouped_conv2d", reports)


def check_bilinear_sample(seed: int = 0, tol: float = DEFAULT_TOL) -> CheckResult:
    rng = np.random.default_rng(seed)
    reports = []
    for b, c, h, w, oh, ow in ((1, 2, 5, 5, 3, 3), (2, 3, 6, 4, 4, 4),
                               (1, 1, 4, 7, 5, 2), (2, 2, 8, 8, 3, 5),
                               (1, 4, 5, 6, 6, 6)):
        x = _rand(rng, b, c, h, w)
        coords = _fractional_coords(rng, b, oh, ow, h, w)
        reports.append(grad_check(
            lambda x, coords: bilinear_sample(x, coords).sum(),
            [x, coords], tol=tol, rng=rng))
    return _aggregate("bilinear_sample", reports)


def check_global_avg_pool(seed: int = 0, tol: float = DEFAULT_TOL) -> CheckResult:
    rng = np.random.default_rng(seed)
    reports = []
    for b, c, h, w in ((1, 2, 3, 3), (2, 4, 5, 7), (1, 8, 1, 1), (3, 2, 8, 5), (2, 1, 6, 6)):
        x = _rand(rng, b, c, h, w)
        weights = Tensor(rng.normal(0.0, 1.0, (b, c, 1, 1)))
        reports.append(grad_check(
            lambda x: (global_avg_pool(x) * weights).sum(), [x], tol=tol, rng=rng))
    return _aggregate("global_avg_pool", reports)


def check_scale_channels(seed: int = 0, tol: float = DEFAULT_TOL) -> CheckResult:
    rng = np.random.default_rng(seed)
    reports = []
    for b, c, h, w in ((1, 2, 3, 3), (2, 4, 4, 4), (1, 6, 2, 5), (2, 3, 5, 2), (1, 1, 7, 7)):
        x = _rand(rng, b, c, h, w)
        s = _rand(rng, b, c, 1, 1)
        reports.append(grad_check(
            lambda x, s: scale_channels(x, s).sum(), [x, s], tol=tol, rng=rng))
    return _aggregate("scale_channels", reports)


def check_linear(seed: int = 0, tol: float = DEFAULT_TOL) -> CheckResult:
    rng = np.random.default_rng(seed)
    reports = []
    for b, n, m in ((1, 3, 2), (4, 8, 8), (2, 16, 4), (3, 5, 7), (2, 2, 1)):
        x = _rand(rng, b, n)
        w = _rand(rng, m, n)
        bias = _rand(rng, m)
        reports.append(grad_check(
            lambda x, w, bias: linear(x, w, bias).sigmoid().sum(),
            [x, w, bias], tol=tol, rng=rng))
    return _aggregate("linear", reports)


def check_elementwise(seed: int = 0, tol: float = DEFAULT_TOL) -> CheckResult:
    rng = np.random.default_rng(seed)
    reports = []
    for shape in ((3,), (2, 4), (2, 3, 3), (1, 2, 4, 4), (5, 5)):
        x = _rand(rng, *shape)
        y = _rand(rng, *shape)
        positive = Tensor(rng.uniform(0.5, 2.0, shape), requires_grad=True)

        def mixed(x, y, positive):
            expr = (x * y + x.sigmoid() - y.relu() * 0.5).exp().mean()
            return expr + positive.log().sum() + positive.sqrt().sum() \
                + x.softplus().mean() + y.abs().mean()

        reports.append(grad_check(mixed, [x, y, positive], tol=tol, rng=rng))
    return _aggregate("elementwise", reports)


def check_channel_correlation(seed: int = 0, tol: float = DEFAULT_TOL) -> CheckResult:
    rng = np.random.default_rng(seed)
    reports = []
    for b, c, h, w in ((1, 2, 3, 3), (2, 4, 4, 4), (1, 8, 2, 3), (2, 3, 5, 5), (1, 4, 6, 2)):
        mask = Tensor(rng.uniform(0.1, 0.9, (b, h, w)), requires_grad=True)
        fused = _rand(rng, b, c, h, w)
        weights = Tensor(rng.normal(0.0, 1.0, (b, c)))
        reports.append(grad_check(
            lambda mask, fused: (channel_correlation(mask, fused) * weights).sum(),
            [mask, fused], tol=tol, rng=rng))
    return _aggregate("channel_correlation", reports)


def check_losses(seed: int = 0, tol: float = DEFAULT_TOL) -> CheckResult:
    rng = np.random.default_rng(seed)
    reports = []
    for b, h, w, c in ((1, 3, 3, 4), (2, 4, 4, 8), (1, 5, 2, 2), (2, 2, 6, 4), (1, 6, 6, 6)):
        gt = (rng.uniform(size=(b, h, w)) < 0.4).astype(np.float64)
        pred = Tensor(rng.uniform(0.05, 0.95, (b, h, w)), requires_grad=True)
        gates = Tensor(rng.uniform(0.05, 0.95, (b, c)), requires_grad=True)
        reports.append(grad_check(lambda p: bce_loss(gt, p), [pred], tol=tol, rng=rng))
        reports.append(grad_check(lambda p: dice_loss(gt, p), [pred], tol=tol, rng=rng))
        reports.append(grad_check(lambda p: seg_loss(gt, p), [pred], tol=tol, rng=rng))
        reports.append(grad_check(lambda s: neg_corr_loss(s), [gates], tol=tol, rng=rng))
        reports.append(grad_check(
            lambda p, s: corr_max_loss(gt, p, s), [pred, gates], tol=tol, rng=rng))
    return _aggregate("losses", reports)


def check_detection_loss(seed: int = 0, tol: float = DEFAULT_TOL) -> CheckResult:
    rng = np.random.default_rng(seed)
    reports = []
    for b, h, w in ((1, 3, 3), (2, 4, 4), (1, 2, 5), (2, 5, 2), (1, 6, 6)):
        obj = Tensor(rng.uniform(0.05, 0.95, (b, h, w)), requires_grad=True)
        ltrb = Tensor(rng.uniform(0.2, 4.0, (b, 4, h, w)), requires_grad=True)
        pos = (rng.uniform(size=(b, h, w)) < 0.3).astype(np.float64)
        targets = rng.uniform(0.2, 4.0, (b, 4, h, w))

        def det_total(obj, ltrb):
            parts = detection_loss(obj, ltrb, pos, targets)
            return parts["cls"] + parts["reg"]

        reports.append(grad_check(det_total, [obj, ltrb], tol=tol, rng=rng))
    return _aggregate("detection_loss", reports)


def check_fusion_path(seed: int = 0, tol: float = DEFAULT_TOL) -> CheckResult:
    rng = np.random.default_rng(seed)
    reports = []
    configs = [("adaptive_rp_globalcc", 4), ("adaptive_rp_globalcc", 8),
               ("fixed_rp", 4), ("adaptive_rp_convcc", 4), ("adaptive_rp_globalcc", 4)]
    for variant, c in configs:
        ffm = FusionParams(c, variant, rng)
        if variant.startswith("adaptive_rp"):
            _randomise_offsets(ffm, rng)
        pair = FeaturePair(_rand(rng, 2, c, 4, 4), _rand(rng, 2, c, 4, 4))
        params = ffm.parameters()
        picks = [params[i] for i in rng.choice(len(params), size=min(3, len(params)),
                                               replace=False)]
        reports.append(grad_check(
            lambda *_: ffm_forward(pair, ffm).sum(),
            [pair.rgb, pair.thermal] + picks, tol=tol, n_probes=4, rng=rng))
    return _aggregate("ffm_forward", reports)


def check_refinement_path(seed: int = 0, tol: float = DEFAULT_TOL) -> CheckResult:
    rng = np.random.default_rng(seed)
    reports = []
    for b, c, h, w in ((1, 4, 3, 3), (2, 8, 4, 4), (1, 16, 2, 2), (2, 4, 5, 5), (1, 8, 3, 5)):
        frm = RefinementParams(c, rng)
        _randomise_biases(frm.parameters(), rng)
        fused = _rand(rng, b, c, h, w)
        params = frm.parameters()
        picks = [params[i] for i in rng.choice(len(params), size=3, replace=False)]

        # one readout per output path keeps each check's scale tight, which
        # matters because finite-difference noise grows with the output value
        for readout in (lambda out: out.refined.mean(),
                        lambda out: out.mask.mean(),
                        lambda out: out.gates.mean()):
            reports.append(grad_check(
                lambda *_, r=readout: r(frm_forward(fused, frm)),
                [fused] + picks, tol=tol, n_probes=2, rng=rng))
    return _aggregate("frm_forward", reports)


def check_full_path(seed: int = 0, tol: float = FULL_PATH_TOL,
                    n_params: int = 20) -> CheckResult:
    """Total training loss gradient on a frozen micro-batch, probing randomly
    selected parameters end to end (backbone, fusion, refinement, head)."""
    rng = np.random.default_rng(seed)
    reports = []
    for b, c, image_size in ((2, 4, 16), (1, 8, 16), (2, 4, 24), (1, 4, 32), (2, 8, 24)):
        config = ExperimentConfig(image_size=image_size, channels=c, epochs=1,
                                  n_train_images=1, n_val_images=1, seed=seed)
        detector = Detector(config, rng=np.random.default_rng([seed, 7]))
        _randomise_offsets(detector.ffm, rng)
        _randomise_biases(detector.parameters(), rng)
        rgb = rng.uniform(0.0, 1.0, (b, 3, image_size, image_size))
        thermal = rng.uniform(0.0, 1.0, (b, 1, image_size, image_size))
        fh = config.feature_size
        gt_mask = (rng.uniform(size=(b, fh, fh)) < 0.3).astype(np.float64)
        pos = (rng.uniform(size=(b, fh, fh)) < 0.3).astype(np.float64)
        targets = rng.uniform(0.2, 4.0, (b, 4, fh, fh))

        def total(*_):
            out = detector.forward(rgb, thermal)
            det = detection_loss(out.head.objectness, out.head.ltrb, pos, targets)
            corr = corr_max_loss(gt_mask, out.refinement.mask,
                                 out.refinement.gates, config.alpha)
            return det["cls"] + det["reg"] + corr

        params = detector.parameters()
        picks = [params[i] for i in
                 rng.choice(len(params), size=min(n_params, len(params)), replace=False)]
        reports.append(grad_check(total, picks, tol=tol, n_probes=1, rng=rng))
    return _aggregate("full_path", reports)


SUITES: dict[str, list[Callable[..., CheckResult]]] = {
    "ops": [check_conv2d, check_grouped_conv2d, check_bilinear_sample,
            check_global_avg_pool, check_scale_channels, check_linear,
            check_elementwise, check_channel_correlation],
    "losses": [check_losses, check_detection_loss],
    "model": [check_fusion_path, check_refinement_path, check_full_path],
}


def run_suite(name: str = "all", seed: int = 0) -> list[CheckResult]:
    if name == "all":
        checks = [c for group in SUITES.values() for c in group]
    elif name in SUITES:
        checks = SUITES[name]
    else:
        raise ValueError(f"unknown suite {name!r}; expected one of "
                         f"{('all',) + tuple(SUITES)}")
    return [check(seed=seed) for check in checks]
