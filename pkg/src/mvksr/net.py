"""The restoration network: mixed residual blocks, en-decoder and fusion heads.

Parameters live in a flat, name-sorted dict (a ParamSet); every forward
function takes that dict plus the name prefix of the block it evaluates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .freq import decompose_multiscale, to_grayscale
from .optim import param_set
from .tensor import Tensor


@dataclass
class NetworkConfig:
    in_channels: int = 9
    level_channels: tuple[int, int, int] = (16, 32, 64)
    level_atrous_rates: tuple[int, int, int] = (12, 6, 3)
    kernel: int = 3
    mff_channels: int = 16
    mff_rate: int = 3
    blocks_per_level: int = 2
    # "additive" highs are signed, so the high head emits 2*sigmoid-1
    decomposition_mode: str = "additive"
    ln_eps: float = 1e-5
    seed: int = 0

    def __post_init__(self):
        self.level_channels = tuple(self.level_channels)
        self.level_atrous_rates = tuple(self.level_atrous_rates)
        if len(self.level_channels) != 3 or len(self.level_atrous_rates) != 3:
            raise ValueError("exactly three levels are supported")
        c, r = self.level_channels, self.level_atrous_rates
        if not (c[0] < c[1] < c[2]):
            raise ValueError(f"level channels must strictly increase, got {c}")
        if not (r[0] > r[1] > r[2]):
            raise ValueError(f"atrous rates must strictly decrease, got {r}")
        if self.kernel % 2 == 0:
            raise ValueError("kernel must be odd")
        if self.mff_channels != c[0]:
            raise ValueError("mff_channels must equal the first level width")


@dataclass
class MffOutputs:
    gray_f: Tensor  # (N, 1, H, W)
    high_f: Tensor
    low_f: Tensor
    restored: Tensor  # (N, 3, H, W)


# ---------------------------------------------------------------- parameters


def _conv_shapes(name: str, c_in: int, c_out: int, k: int) -> list[tuple[str, tuple[int, ...], str]]:
    return [(f"{name}.w", (c_out, c_in, k, k), "conv"), (f"{name}.b", (c_out,), "zeros")]


def _norm_act_shapes(name: str, c: int) -> list[tuple[str, tuple[int, ...], str]]:
    return [
        (f"{name}.ln.g", (c,), "ones"),
        (f"{name}.ln.b", (c,), "zeros"),
        (f"{name}.act", (c,), "slope"),
    ]


def mcl_shapes(name: str, c_in: int, c_out: int, k: int = 3):
    if c_out % 2:
        raise ValueError(f"{name}: MCL output channels must be even, got {c_out}")
    half = c_out // 2
    return (
        _conv_shapes(f"{name}.dil", c_in, half, k)
        + _conv_shapes(f"{name}.std", c_in, half, k)
        + _norm_act_shapes(name, c_out)
    )


def mrb_shapes(name: str, c: int, k: int = 3):
    return (
        mcl_shapes(f"{name}.mcl1", c, c, k)
        + mcl_shapes(f"{name}.mcl2", c, c, k)
        + _conv_shapes(f"{name}.conv", c, c, k)
        + _norm_act_shapes(name, c)
    )


def _head_shapes(name: str, c: int, k: int):
    return (
        _conv_shapes(f"{name}.c1", c, c, k)
        + [(f"{name}.act", (c,), "slope")]
        + _conv_shapes(f"{name}.c2", c, 1, k)
    )


def param_shapes(cfg: NetworkConfig) -> list[tuple[str, tuple[int, ...], str]]:
    c1, c2, c3 = cfg.level_channels
    k = cfg.kernel
    nb = cfg.blocks_per_level
    out = []
    # encoder
    for lvl, (c_in, c) in enumerate(((cfg.in_channels, c1), (c1, c2), (c2, c3)), start=1):
        out += _conv_shapes(f"enc{lvl}.entry", c_in, c, 1)
        for b in range(nb):
            out += mrb_shapes(f"enc{lvl}.mrb{b}", c, k)
    # decoder
    for b in range(nb):
        out += mrb_shapes(f"dec3.mrb{b}", c3, k)
    for lvl, (c_deep, c) in ((2, (c3, c2)), (1, (c2, c1))):
        out += _conv_shapes(f"dec{lvl}.up", c_deep, c, k)
        out += _conv_shapes(f"dec{lvl}.fuse", 2 * c, c, 1)
        for b in range(nb):
            out += mrb_shapes(f"dec{lvl}.mrb{b}", c, k)
    # fusion
    m = cfg.mff_channels
    for head in ("gray", "high", "low"):
        out += _head_shapes(f"mff.ff.{head}", m, k)
    bf_in = m + 3 + cfg.in_channels
    out += _conv_shapes("mff.bf.c1", bf_in, m, k)
    out += [("mff.bf.act", (m,), "slope")]
    out += mrb_shapes("mff.bf.mrb", m, k)
    out += _conv_shapes("mff.bf.out", m, 3, k)
    return out


def init_params(cfg: NetworkConfig, seed: int | None = None, dtype=np.float64) -> dict[str, Tensor]:
    """Seeded init: fan-in scaled uniform convs, zero biases, PReLU slopes 0.25."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    shapes = sorted(param_shapes(cfg))
    params = {}
    for name, shape, kind in shapes:
        if kind == "conv":
            fan_in = shape[1] * shape[2] * shape[3]
            bound = math.sqrt(6.0 / ((1.0 + 0.25**2) * fan_in))
            data = rng.uniform(-bound, bound, shape)
        elif kind == "zeros":
            data = np.zeros(shape)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            data = np.full(shape, 0.25)
        params[name] = Tensor(data.astype(dtype), requires_grad=True)
    return param_set(params)


def count_params(params: dict[str, Tensor]) -> int:
    return int(sum(p.size for p in params.values()))


def cast_params(params: dict[str, Tensor], dtype) -> dict[str, Tensor]:
    return param_set((k, Tensor(v.data.astype(dtype), requires_grad=True)) for k, v in params.items())


# ---------------------------------------------------------------- blocks


def _conv(x: Tensor, P, name: str, dilation: int = 1) -> Tensor:
    w = P[f"{name}.w"]
    k = w.shape[2]
    return T.conv2d(x, w, P[f"{name}.b"], dilation=dilation, padding=dilation * (k - 1) // 2)


def _norm_act(x: Tensor, P, name: str, eps: float = 1e-5) -> Tensor:
    return T.prelu(T.layer_norm(x, P[f"{name}.ln.g"], P[f"{name}.ln.b"], eps), P[f"{name}.act"])


def mcl_forward(x: Tensor, P, name: str, rate: int, eps: float = 1e-5) -> Tensor:
    """Dilated and standard 3x3 branches, concatenated, layer-normed, PReLU."""
    wd, ws = P[f"{name}.dil.w"], P[f"{name}.std.w"]
    if wd.shape[0] != ws.shape[0]:
        raise T.ShapeError(f"{name}: branch widths differ ({wd.shape[0]} vs {ws.shape[0]})")
    atrous = _conv(x, P, f"{name}.dil", dilation=rate)
    standard = _conv(x, P, f"{name}.std")
    return _norm_act(T.concat_channels(atrous, standard), P, name, eps)


def mrb_forward(x: Tensor, P, name: str, rate: int, eps: float = 1e-5) -> Tensor:
    c = P[f"{name}.conv.w"].shape[0]
    if x.shape[1] != c:
        raise T.ShapeError(f"{name}: input has {x.shape[1]} channels, block expects {c}")
    y = mcl_forward(x, P, f"{name}.mcl1", rate, eps)
    y = mcl_forward(y, P, f"{name}.mcl2", rate, eps)
    return _norm_act(_conv(y + x, P, f"{name}.conv"), P, name, eps)


def _mrb_stack(x: Tensor, P, prefix: str, rate: int, cfg: NetworkConfig) -> Tensor:
    for b in range(cfg.blocks_per_level):
        x = mrb_forward(x, P, f"{prefix}.mrb{b}", rate, cfg.ln_eps)
    return x


def mce_forward(views: Tensor, P, cfg: NetworkConfig) -> tuple[Tensor, list[Tensor]]:
    """Encoder-decoder over the 9-channel view stack.

    Returns full-resolution decoder features and the two encoder skips.
    """
    n, c, h, w = views.shape
    if c != cfg.in_channels:
        raise T.ShapeError(f"views have {c} channels, expected {cfg.in_channels}")
    if h % 4 or w % 4:
        raise T.ShapeError(f"spatial size {h}x{w} must be a multiple of 4; pad the image first")
    r1, r2, r3 = cfg.level_atrous_rates
    e1 = _mrb_stack(_conv(views, P, "enc1.entry"), P, "enc1", r1, cfg)
    e2 = _mrb_stack(_conv(T.downsample_avg2(e1), P, "enc2.entry"), P, "enc2", r2, cfg)
    e3 = _mrb_stack(_conv(T.downsample_avg2(e2), P, "enc3.entry"), P, "enc3", r3, cfg)

    d3 = _mrb_stack(e3, P, "dec3", r3, cfg)
    u2 = _conv(T.upsample_nearest2(d3), P, "dec2.up")
    d2 = _mrb_stack(_conv(T.concat_channels(u2, e2), P, "dec2.fuse"), P, "dec2", r2, cfg)
    u1 = _conv(T.upsample_nearest2(d2), P, "dec1.up")
    d1 = _mrb_stack(_conv(T.concat_channels(u1, e1), P, "dec1.fuse"), P, "dec1", r1, cfg)
    return d1, [e1, e2]


def _head(x: Tensor, P, name: str) -> Tensor:
    y = T.prelu(_conv(x, P, f"{name}.c1"), P[f"{name}.act"])
    return _conv(y, P, f"{name}.c2")


def mff_forward(features: Tensor, views: Tensor, P, cfg: NetworkConfig) -> MffOutputs:
    """Front fusion heads (gray/high/low) followed by back fusion to RGB."""
    if features.shape[2:] != views.shape[2:] or features.shape[0] != views.shape[0]:
        raise T.ShapeError(f"features {features.shape} and views {views.shape} disagree")
    gray = T.sigmoid(_head(features, P, "mff.ff.gray"))
    low = T.sigmoid(_head(features, P, "mff.ff.low"))
    high = T.sigmoid(_head(features, P, "mff.ff.high"))
    if cfg.decomposition_mode == "additive":
        high = high * 2.0 - 1.0
    fused = T.concat_channels(features, gray, high, low, views)
    y = T.prelu(_conv(fused, P, "mff.bf.c1"), P["mff.bf.act"])
    y = mrb_forward(y, P, "mff.bf.mrb", cfg.mff_rate, cfg.ln_eps)
    restored = T.sigmoid(_conv(y, P, "mff.bf.out"))
    return MffOutputs(gray, high, low, restored)


def forward_views(views: Tensor, P, cfg: NetworkConfig) -> MffOutputs:
    features, _ = mce_forward(views, P, cfg)
    return mff_forward(features, views, P, cfg)


# ---------------------------------------------------------------- views


@dataclass
class ViewOptions:
    eps: float = 0.1
    mode: str = "additive"
    radii: tuple[int, ...] = (5, 13, 25)
    interpretation: str = "radius"
    subsample: int = 1
    coeffs: str = "red229"
    use_high: bool = True
    use_low: bool = True


def build_views(rgb: np.ndarray, opts: ViewOptions | None = None) -> np.ndarray:
    """(H, W, 3) image -> (9, H, W) stack [R, G, B, highs..., lows...]."""
    opts = opts or ViewOptions()
    gray = to_grayscale(rgb, opts.coeffs)
    stack = decompose_multiscale(gray, opts.eps, opts.mode, opts.radii, opts.interpretation, opts.subsample)
    highs = np.stack(stack.highs) if opts.use_high else np.zeros((len(stack.highs),) + gray.shape)
    lows = np.stack(stack.lows) if opts.use_low else np.zeros((len(stack.lows),) + gray.shape)
    return np.concatenate([rgb.transpose(2, 0, 1), highs, lows], axis=0)


def mvksr_forward(
    degraded_rgb: np.ndarray, P, cfg: NetworkConfig, opts: ViewOptions | None = None
) -> MffOutputs:
    """Restore one (H, W, 3) image or a batch (N, H, W, 3); H and W multiples of 4."""
    batch = degraded_rgb if degraded_rgb.ndim == 4 else degraded_rgb[None]
    dtype = next(iter(P.values())).dtype
    views = np.stack([build_views(img, opts) for img in batch]).astype(dtype)
    return forward_views(Tensor(views), P, cfg)
