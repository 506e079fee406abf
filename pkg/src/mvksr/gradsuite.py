"""Finite-difference checks for every differentiable op, block, loss and the full model.

All checks run in float64. Coordinates sitting within ``KINK_MARGIN`` of a
non-differentiable point (PReLU at 0, |x| at 0) are skipped.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .gradcheck import GradCheckReport, directional_check, grad_check, projected
from .losses import (
    CrConfig,
    FeaturePyramid,
    LossContext,
    MsSsimConfig,
    SupervisionTargets,
    cr_loss,
    cross_supervision_loss,
    make_targets,
    ms_ssim_loss,
    ssim,
    total_loss,
)
from .net import MffOutputs, NetworkConfig, forward_views, init_params, mcl_forward, mcl_shapes, mrb_forward, mrb_shapes
from .tensor import Tensor

KINK_MARGIN = 1e-3


@dataclass
class CheckResult:
    name: str
    report: GradCheckReport

    def line(self) -> str:
        return f"{self.name:<28} {self.report}"


def _t(rng, *shape, scale=1.0, offset=0.0) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale + offset, requires_grad=True)


def _img(rng, *shape) -> Tensor:
    return Tensor(rng.uniform(0.05, 0.95, shape), requires_grad=True)


def _away_from_zero(ii, idx, v) -> bool:
    return abs(v) < KINK_MARGIN


def _block_params(shapes, rng) -> dict[str, Tensor]:
    out = {}
    for name, shape, kind in shapes:
        if kind == "conv":
            data = rng.standard_normal(shape) * 0.3
        elif kind == "zeros":
            data = rng.standard_normal(shape) * 0.1
        elif kind == "ones":
            data = 1.0 + rng.standard_normal(shape) * 0.1
        else:
            data = np.full(shape, 0.25)
        out[name] = Tensor(data, requires_grad=True)
    return out


def op_checks(tol: float, rng: np.random.Generator) -> list[CheckResult]:
    res = []

    def add(name, fn, inputs, **kw):
        res.append(CheckResult(name, grad_check(fn, inputs, tol, rng=rng, **kw)))

    x, w, b = _t(rng, 2, 3, 8, 8), _t(rng, 4, 3, 3, 3), _t(rng, 4)
    add("conv2d", projected(lambda x, w, b: T.conv2d(x, w, b, 1, 1)), [x, w, b])
    add("conv2d dilation=2", projected(lambda x, w, b: T.conv2d(x, w, b, 2, 2)), [x, w, b])
    add("conv2d 1x1", projected(lambda x, w: T.conv2d(x, w)), [_t(rng, 2, 3, 5, 5), _t(rng, 2, 3, 1, 1)])
    add("downsample_avg2", projected(T.downsample_avg2), [_t(rng, 2, 3, 6, 8)])
    add("upsample_nearest2", projected(T.upsample_nearest2), [_t(rng, 2, 3, 3, 4)])
    add(
        "layer_norm",
        projected(lambda x, g, b: T.layer_norm(x, g, b, 1e-5)),
        [_t(rng, 2, 3, 4, 4), _t(rng, 3, offset=1.0), _t(rng, 3)],
    )
    add("prelu", projected(T.prelu), [_t(rng, 2, 3, 4, 4), _t(rng, 3, scale=0.1, offset=0.25)], exclude=lambda ii, idx, v: ii == 0 and abs(v) < KINK_MARGIN)
    add("concat_channels", projected(T.concat_channels), [_t(rng, 2, 2, 3, 3), _t(rng, 2, 3, 3, 3)])
    add("slice_channels", projected(lambda x: T.slice_channels(x, 1, 3)), [_t(rng, 2, 4, 3, 3)])
    add("sigmoid", projected(T.sigmoid), [_t(rng, 2, 3, 4, 4, scale=3.0)])
    add("exp", projected(T.exp), [_t(rng, 3, 4)])
    add("log", projected(T.log), [_img(rng, 3, 4)])
    add("abs", projected(T.abs_), [_t(rng, 3, 4)], exclude=_away_from_zero)
    add("square", projected(T.square), [_t(rng, 3, 4)])
    add("pow_scalar", projected(lambda x: T.pow_scalar(x, 0.37)), [_img(rng, 3, 4)])
    add("mul/add/sub", projected(lambda a, b: (a * b + a) - b), [_t(rng, 2, 3, 1, 4), _t(rng, 2, 1, 5, 4)])
    add("div", projected(T.div), [_t(rng, 3, 4), _img(rng, 3, 4)])
    add("mean/sum", lambda ins: T.mean(ins[0], axis=(1, 2)).sum() + T.sum_(ins[0] * ins[0]), [_t(rng, 2, 3, 4)])
    add("clamp_min", projected(lambda x: T.clamp_min(x, 0.1)), [_t(rng, 3, 4)], exclude=lambda ii, idx, v: abs(v - 0.1) < KINK_MARGIN)
    add("flip", projected(lambda x: T.flip(x, 3)), [_t(rng, 1, 2, 3, 4)])
    add("sep_filter_valid", projected(lambda x: T.sep_filter_valid(x, np.array([0.2, 0.5, 0.3]))), [_t(rng, 1, 2, 6, 7)])
    return res


def block_checks(tol: float, rng: np.random.Generator) -> list[CheckResult]:
    res = []
    P = _block_params(mcl_shapes("m", 4, 4), rng)
    names = sorted(P)
    x = _t(rng, 1, 4, 8, 8)

    def mcl_fn(ins):
        Q = dict(zip(names, ins[1:]))
        return (mcl_forward(ins[0], Q, "m", 2) * Tensor(np.linspace(-1, 1, 256).reshape(1, 4, 8, 8))).sum()

    res.append(CheckResult("mcl", grad_check(mcl_fn, [x] + [P[k] for k in names], tol, max_coords=24, rng=rng)))

    P = _block_params(mrb_shapes("r", 4), rng)
    names = sorted(P)

    def mrb_fn(ins):
        Q = dict(zip(names, ins[1:]))
        return (mrb_forward(ins[0], Q, "r", 2) * Tensor(np.linspace(-1, 1, 256).reshape(1, 4, 8, 8))).sum()

    res.append(CheckResult("mrb", grad_check(mrb_fn, [_t(rng, 1, 4, 8, 8)] + [P[k] for k in names], tol, max_coords=24, rng=rng)))
    return res


def loss_checks(tol: float, rng: np.random.Generator) -> list[CheckResult]:
    res = []
    r, g = _img(rng, 1, 3, 24, 24), Tensor(rng.uniform(0, 1, (1, 3, 24, 24)))
    res.append(CheckResult("ssim", grad_check(lambda ins: ssim(ins[0], g), [r], tol, max_coords=200, rng=rng)))
    res.append(CheckResult("ms_ssim_loss", grad_check(lambda ins: ms_ssim_loss(ins[0], g), [r], tol, max_coords=200, rng=rng)))

    ext = FeaturePyramid(CrConfig())
    gt = rng.uniform(0, 1, (2, 3, 16, 16))
    deg = rng.uniform(0, 1, (2, 3, 16, 16))
    rr = _img(rng, 2, 3, 16, 16)
    res.append(CheckResult("cr_loss", grad_check(lambda ins: cr_loss(ins[0], gt, deg, ext), [rr], tol, max_coords=200, rng=rng)))

    heads = [_img(rng, 2, 1, 8, 8) for _ in range(3)]
    tg = SupervisionTargets(*(rng.uniform(0, 1, (2, 1, 8, 8)) for _ in range(3)))

    def cs_fn(ins):
        return cross_supervision_loss(MffOutputs(ins[0], ins[1], ins[2], None), tg)

    def cs_kink(ii, idx, v):
        return ii == 1 and abs(v - tg.high_c[idx]) < KINK_MARGIN

    res.append(CheckResult("cross_supervision", grad_check(cs_fn, heads, tol, exclude=cs_kink, rng=rng)))
    return res


def full_model_check(tol: float, rng: np.random.Generator, h: float = 1e-5, coords_per_tensor: int = 1) -> list[CheckResult]:
    """End-to-end: 1x9x16x16 views through the network into the total loss."""
    cfg = NetworkConfig()
    P = init_params(cfg, seed=int(rng.integers(1 << 31)))
    # perturb biases and norm affine terms away from their init so their gradients are generic
    for name, p in P.items():
        if name.endswith(".b"):
            p.data += rng.standard_normal(p.shape) * 0.05
        elif name.endswith(".ln.g"):
            p.data += rng.standard_normal(p.shape) * 0.05
    names = list(P)
    clean = rng.uniform(0.05, 0.95, (16, 16, 3))
    views = rng.uniform(0, 1, (1, 9, 16, 16))
    tg = make_targets(clean)
    gt = clean.transpose(2, 0, 1)[None]
    ctx = LossContext(extractor=FeaturePyramid(CrConfig()), ms_ssim=MsSsimConfig())

    def fn(ins):
        out = forward_views(Tensor(views), dict(zip(names, ins)), cfg)
        loss, _ = total_loss(out.restored, gt, views[:, :3], out, tg, ctx=ctx)
        return loss

    inputs = [P[k] for k in names]
    coord = grad_check(fn, inputs, tol, h=h, max_coords=coords_per_tensor, rng=rng)
    direc = directional_check(fn, inputs, tol, h=h, rng=rng)
    return [CheckResult("full model (coordinates)", coord), CheckResult("full model (directional)", direc)]


SUITES: dict[str, Callable[[float, np.random.Generator], list[CheckResult]]] = {
    "ops": op_checks,
    "blocks": block_checks,
    "losses": loss_checks,
    "model": full_model_check,
}


def run_suite(tol: float = 1e-4, seed: int = 0, suites=tuple(SUITES), log_fn=None) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    for s in suites:
        for r in SUITES[s](tol, rng):
            out.append(r)
            if log_fn:
                log_fn(r.line())
    return out
