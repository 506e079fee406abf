"""Training objectives: cross supervision, MS-SSIM and contrastive regularization."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .freq import decompose_multiscale, to_grayscale
from .net import MffOutputs
from .tensor import Tensor

CR_WEIGHTS = (1 / 32, 1 / 16, 1 / 8, 1 / 4, 1.0)
MS_SSIM_ALPHAS = (0.0448, 0.2856, 0.3001, 0.2363, 0.1333)


@dataclass
class LossWeights:
    lambda1: float = 0.8  # MS-SSIM
    lambda2: float = 0.2  # contrastive regularization
    lambda_cs: float = 1.0  # cross supervision
    supervise_gray: bool = True
    supervise_high: bool = True
    supervise_low: bool = True
    self_supervise: bool = True

    def __post_init__(self):
        if min(self.lambda1, self.lambda2, self.lambda_cs) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass
class SupervisionTargets:
    gray_c: np.ndarray  # (N, 1, H, W)
    high_c: np.ndarray
    low_c: np.ndarray


def make_targets(clean_rgb: np.ndarray, k: int = 13, eps: float = 0.1, mode: str = "additive", coeffs: str = "red229", dtype=np.float64) -> SupervisionTargets:
    """Grayscale/high/low ground truth from clean (H, W, 3) or (N, H, W, 3) images."""
    batch = clean_rgb if clean_rgb.ndim == 4 else clean_rgb[None]
    g, hi, lo = [], [], []
    for img in batch:
        gray = to_grayscale(img, coeffs)
        st = decompose_multiscale(gray, eps, mode, radii=(k,))
        g.append(gray)
        hi.append(st.highs[0])
        lo.append(st.lows[0])
    stack = lambda xs: np.stack(xs)[:, None].astype(dtype)  # noqa: E731
    return SupervisionTargets(stack(g), stack(hi), stack(lo))


def _mse(a: Tensor, b) -> Tensor:
    return T.square(T.sub(a, b)).mean()


def _mae(a: Tensor, b) -> Tensor:
    return T.abs_(T.sub(a, b)).mean()


def cross_supervision_terms(out: MffOutputs, tgt: SupervisionTargets, w: LossWeights | None = None) -> dict[str, Tensor]:
    w = w or LossWeights()
    for name, pred, ref in (("gray", out.gray_f, tgt.gray_c), ("high", out.high_f, tgt.high_c), ("low", out.low_f, tgt.low_c)):
        if pred.shape != np.shape(ref):
            raise T.ShapeError(f"{name}: prediction {pred.shape} vs target {np.shape(ref)}")
    terms = {}
    if w.supervise_gray:
        terms["cs_gray"] = _mse(out.gray_f, tgt.gray_c)
    if w.supervise_high:
        terms["cs_high"] = _mae(out.high_f, tgt.high_c)
    if w.supervise_low:
        terms["cs_low"] = _mse(out.low_f, tgt.low_c)
    if w.self_supervise:
        terms["cs_self"] = _mse(out.gray_f, out.high_f + out.low_f)
    return terms


def cross_supervision_loss(out: MffOutputs, tgt: SupervisionTargets, w: LossWeights | None = None) -> Tensor:
    """Equal-weight sum of the gray/high/low supervision and the self-consistency term."""
    terms = list(cross_supervision_terms(out, tgt, w).values())
    if not terms:
        return Tensor(np.zeros((), dtype=out.gray_f.dtype))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


# ---------------------------------------------------------------- SSIM


@dataclass
class MsSsimConfig:
    alphas: tuple[float, ...] = MS_SSIM_ALPHAS
    window: int = 11
    sigma: float = 1.5
    c1: float = 0.01**2
    c2: float = 0.03**2
    floor: float = 1e-4  # per-scale SSIM is clamped here before the fractional power

    def taps(self) -> np.ndarray:
        x = np.arange(self.window) - (self.window - 1) / 2
        g = np.exp(-(x**2) / (2 * self.sigma**2))
        return g / g.sum()


def _as_nchw(img) -> Tensor:
    if isinstance(img, Tensor):
        return img
    a = np.asarray(img)
    if a.dtype not in (np.float32, np.float64):
        a = a.astype(np.float64)
    if a.ndim == 3:  # H, W, C
        a = a.transpose(2, 0, 1)[None]
    elif a.ndim == 2:
        a = a[None, None]
    return Tensor(a)


def ssim_map(x: Tensor, y: Tensor, cfg: MsSsimConfig) -> Tensor:
    taps = cfg.taps()
    if x.shape != y.shape:
        raise T.ShapeError(f"ssim: shapes {x.shape} and {y.shape} differ")
    if min(x.shape[2:]) < cfg.window:
        raise T.ShapeError(f"ssim: image {x.shape[2:]} smaller than the {cfg.window}px window")
    f = lambda t: T.sep_filter_valid(t, taps)  # noqa: E731
    mu_x, mu_y = f(x), f(y)
    mu_xx = mu_x * mu_x
    mu_yy = mu_y * mu_y
    mu_xy = mu_x * mu_y
    s_xx = f(x * x) - mu_xx
    s_yy = f(y * y) - mu_yy
    s_xy = f(x * y) - mu_xy
    num = (mu_xy * 2.0 + cfg.c1) * (s_xy * 2.0 + cfg.c2)
    den = (mu_xx + mu_yy + cfg.c1) * (s_xx + s_yy + cfg.c2)
    return num / den


def ssim(x, y, cfg: MsSsimConfig | None = None) -> Tensor:
    """Mean Gaussian-windowed SSIM over all pixels and channels (range 1)."""
    cfg = cfg or MsSsimConfig()
    return ssim_map(_as_nchw(x), _as_nchw(y), cfg).mean()


def ms_ssim_scales(size: int, cfg: MsSsimConfig) -> int:
    n = 0
    while n < len(cfg.alphas) and size // (2**n) >= cfg.window:
        n += 1
    return max(n, 1)


def ms_ssim_loss(restored, gt, cfg: MsSsimConfig | None = None) -> Tensor:
    """1 - prod_i SSIM_i^alpha_i over successively halved resolutions.

    Images too small for all scales use the leading scales with their
    weights renormalized to sum to the original total.
    """
    cfg = cfg or MsSsimConfig()
    x, y = _as_nchw(restored), _as_nchw(gt)
    n = ms_ssim_scales(min(x.shape[2:]), cfg)
    alphas = np.asarray(cfg.alphas[:n])
    if n < len(cfg.alphas):
        alphas = alphas / alphas.sum() * sum(cfg.alphas)
    prod = None
    for i in range(n):
        if i:
            h, w = x.shape[2:]
            if h % 2 or w % 2:
                x = _crop_even(x)
                y = _crop_even(y)
            x, y = T.downsample_avg2(x), T.downsample_avg2(y)
        s = T.clamp_min(ssim_map(x, y, cfg).mean(), cfg.floor)
        term = T.pow_scalar(s, float(alphas[i]))
        prod = term if prod is None else prod * term
    return 1.0 - prod


def _crop_even(t: Tensor) -> Tensor:
    h, w = t.shape[2:]

    def bw(g):
        full = np.zeros_like(t.data)
        full[:, :, : h - h % 2, : w - w % 2] = g
        return (full,)

    return T._result(np.ascontiguousarray(t.data[:, :, : h - h % 2, : w - w % 2]), (t,), bw)


# ---------------------------------------------------------------- contrastive regularization


@dataclass
class CrConfig:
    weights: tuple[float, ...] = CR_WEIGHTS
    widths: tuple[int, ...] = (8, 16, 32, 64, 64)
    seed: int = 1234
    floor: float = 1e-6
    weights_path: str | None = None


class FeaturePyramid:
    """Frozen five-stage conv feature extractor standing in for a pretrained classifier.

    Each stage is conv3x3-PReLU-conv3x3-PReLU followed by a 2x average
    downsample (skipped once a spatial dimension is odd). Weights never
    receive updates; gradients still flow to the input image.
    """

    def __init__(self, cfg: CrConfig | None = None, dtype=np.float64):
        self.cfg = cfg or CrConfig()
        if self.cfg.weights_path:
            from .checkpoint import load_checkpoint

            loaded = load_checkpoint(self.cfg.weights_path)
            self.params = {k: Tensor(v.data.astype(dtype)) for k, v in loaded.items()}
            self._validate()
        else:
            self.params = self._random(dtype)

    def _shapes(self):
        out, c_in = [], 3
        for s, c in enumerate(self.cfg.widths, start=1):
            out += [
                (f"stage{s}.c1.w", (c, c_in, 3, 3)), (f"stage{s}.c1.b", (c,)),
                (f"stage{s}.c2.w", (c, c, 3, 3)), (f"stage{s}.c2.b", (c,)),
                (f"stage{s}.act1", (c,)), (f"stage{s}.act2", (c,)),
            ]
            c_in = c
        return out

    def _random(self, dtype):
        rng = np.random.default_rng(self.cfg.seed)
        params = {}
        for name, shape in sorted(self._shapes()):
            if name.endswith(".w"):
                bound = math.sqrt(6.0 / (1.0625 * shape[1] * 9))
                data = rng.uniform(-bound, bound, shape)
            elif name.endswith(".b"):
                data = np.zeros(shape)
            else:
                data = np.full(shape, 0.25)
            params[name] = Tensor(data.astype(dtype))
        return params

    def _validate(self):
        for name, shape in self._shapes():
            if name not in self.params:
                raise ValueError(f"feature weights missing tensor {name!r}")
            if self.params[name].shape != shape:
                raise ValueError(f"feature weights {name!r}: shape {self.params[name].shape}, expected {shape}")

    def astype(self, dtype) -> "FeaturePyramid":
        other = object.__new__(FeaturePyramid)
        other.cfg = self.cfg
        other.params = {k: Tensor(v.data.astype(dtype)) for k, v in self.params.items()}
        return other

    def __call__(self, img: Tensor) -> list[Tensor]:
        P = self.params
        x = _as_nchw(img)
        feats = []
        for s in range(1, len(self.cfg.widths) + 1):
            x = T.prelu(T.conv2d(x, P[f"stage{s}.c1.w"], P[f"stage{s}.c1.b"], 1, 1), P[f"stage{s}.act1"])
            x = T.prelu(T.conv2d(x, P[f"stage{s}.c2.w"], P[f"stage{s}.c2.b"], 1, 1), P[f"stage{s}.act2"])
            h, w = x.shape[2:]
            if h % 2 == 0 and w % 2 == 0:
                x = T.downsample_avg2(x)
            feats.append(x)
        return feats


def feature_pyramid(img, extractor: FeaturePyramid | None = None) -> list[Tensor]:
    return (extractor or FeaturePyramid())(img)


def _l1_per_sample(a: Tensor, b) -> Tensor:
    d = T.abs_(T.sub(a, b))
    return d.mean(axis=tuple(range(1, d.data.ndim)))


def cr_loss(restored, gt, degraded, extractor: FeaturePyramid | None = None) -> Tensor:
    """Sum over stages of w_i * |f(restored) - f(gt)| / |f(degraded) - f(gt)|.

    L1 distances are per-sample means; the ratio is averaged over the batch.
    Denominators are constants floored at ``floor``.
    """
    extractor = extractor or FeaturePyramid()
    r = _as_nchw(restored)
    fr = extractor(r)
    fg = extractor(_as_nchw(gt).detach())
    fd = extractor(_as_nchw(degraded).detach())
    total = None
    for wi, a, p, n in zip(extractor.cfg.weights, fr, fg, fd):
        # same code path as the numerator so restored == degraded gives a ratio of exactly 1
        den = np.maximum(_l1_per_sample(Tensor(n.data), p.data).data, extractor.cfg.floor)
        ratio = (_l1_per_sample(a, p.data) / Tensor(den.astype(a.dtype))).mean() * wi
        total = ratio if total is None else total + ratio
    return total


# ---------------------------------------------------------------- total


@dataclass
class LossContext:
    """Objects reused across training steps."""

    weights: LossWeights = field(default_factory=LossWeights)
    ms_ssim: MsSsimConfig = field(default_factory=MsSsimConfig)
    extractor: FeaturePyramid | None = None


def total_loss(restored, gt, degraded, mff_out: MffOutputs | None, targets: SupervisionTargets | None, weights: LossWeights | None = None, ctx: LossContext | None = None) -> tuple[Tensor, dict[str, float]]:
    """lambda1 * MS-SSIM + lambda2 * CR + lambda_cs * cross supervision, with a breakdown."""
    ctx = ctx or LossContext()
    w = weights or ctx.weights
    parts: dict[str, Tensor] = {}
    parts["msssim"] = ms_ssim_loss(restored, gt, ctx.ms_ssim)
    dtype = parts["msssim"].dtype
    if w.lambda2 > 0:
        ext = ctx.extractor or FeaturePyramid(dtype=dtype)
        if ext.params["stage1.c1.w"].dtype != dtype:
            ext = ext.astype(dtype)
        parts["cr"] = cr_loss(restored, gt, degraded, ext)
    else:
        parts["cr"] = Tensor(np.zeros((), dtype=dtype))
    cs_terms = cross_supervision_terms(mff_out, targets, w) if (mff_out is not None and targets is not None) else {}
    cs = None
    for t in cs_terms.values():
        cs = t if cs is None else cs + t
    parts["cs"] = cs if cs is not None else Tensor(np.zeros((), dtype=dtype))

    total = parts["msssim"] * w.lambda1
    if w.lambda2 > 0:
        total = total + parts["cr"] * w.lambda2
    if cs is not None and w.lambda_cs > 0:
        total = total + cs * w.lambda_cs
    breakdown = {k: float(v.data) for k, v in parts.items()}
    breakdown.update({k: float(v.data) for k, v in cs_terms.items()})
    breakdown["total"] = float(total.data)
    return total, breakdown
