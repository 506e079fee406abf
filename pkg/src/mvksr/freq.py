"""Grayscale conversion and multi-scale guided-filter frequency decomposition."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

RED229_COEFFS = (0.229, 0.587, 0.114)
STANDARD_COEFFS = (0.299, 0.587, 0.114)
DEFAULT_RADII = (5, 13, 25)


@dataclass
class GuidedFilterParams:
    k: int = 5
    eps: float = 0.1
    subsample: int = 1

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"window radius must be >= 1, got {self.k}")
        if self.eps <= 0:
            raise ValueError(f"eps must be > 0, got {self.eps}")
        if self.subsample < 1:
            raise ValueError(f"subsample must be >= 1, got {self.subsample}")


@dataclass
class FreqStack:
    """Three low- and three high-frequency layers, ordered by scale."""

    lows: list[np.ndarray]
    highs: list[np.ndarray]
    mode: str = "additive"
    radii: tuple[int, ...] = DEFAULT_RADII

    def stored_highs(self) -> list[np.ndarray]:
        """High layers mapped to [0, 1] for 8-bit storage."""
        if self.mode == "additive":
            return [encode_high(h) for h in self.highs]
        return list(self.highs)


def encode_high(h: np.ndarray) -> np.ndarray:
    return h * 0.5 + 0.5


def decode_high(h: np.ndarray) -> np.ndarray:
    return (h - 0.5) * 2.0


def to_grayscale(rgb: np.ndarray, coeffs: str | tuple[float, float, float] = "red229") -> np.ndarray:
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected an HxWx3 image, got shape {rgb.shape}")
    if isinstance(coeffs, str):
        coeffs = {"red229": RED229_COEFFS, "standard": STANDARD_COEFFS}[coeffs]
    cr, cg, cb = coeffs
    return cr * rgb[:, :, 0] + cg * rgb[:, :, 1] + cb * rgb[:, :, 2]


def resolve_radius(k: int, interpretation: str = "radius") -> int:
    """Map a nominal kernel size to a window radius."""
    if interpretation == "radius":
        return k
    if interpretation == "diameter":
        return max(1, (k - 1) // 2)
    raise ValueError(f"unknown kernel-size interpretation {interpretation!r}")


def _window_bounds(n: int, r: int) -> tuple[np.ndarray, np.ndarray]:
    idx = np.arange(n)
    return np.clip(idx - r, 0, n), np.clip(idx + r + 1, 0, n)


def box_mean(x: np.ndarray, r: int) -> np.ndarray:
    """Mean over the (2r+1)^2 window around each pixel, truncated at the borders.

    Uses summed-area sums along each axis, so the cost is O(1) per pixel.
    """
    h, w = x.shape
    r0, r1 = _window_bounds(h, r)
    c0, c1 = _window_bounds(w, r)
    cs = np.zeros((h + 1, w))
    np.cumsum(x, axis=0, out=cs[1:])
    rows = cs[r1] - cs[r0]
    cs2 = np.zeros((h, w + 1))
    np.cumsum(rows, axis=1, out=cs2[:, 1:])
    sums = cs2[:, c1] - cs2[:, c0]
    counts = (r1 - r0)[:, None] * (c1 - c0)[None, :]
    return sums / counts


def _coefficients(p: np.ndarray, guide: np.ndarray, r: int, eps: float) -> tuple[np.ndarray, np.ndarray]:
    mean_i = box_mean(guide, r)
    mean_p = box_mean(p, r)
    if p is guide:
        corr_ip = corr_ii = box_mean(guide * guide, r)
    else:
        corr_ip = box_mean(guide * p, r)
        corr_ii = box_mean(guide * guide, r)
    var_i = corr_ii - mean_i * mean_i
    cov_ip = corr_ip - mean_i * mean_p
    a = cov_ip / (var_i + eps)
    b = mean_p - a * mean_i
    return a, b


def guided_filter(p: np.ndarray, guide: np.ndarray, params: GuidedFilterParams) -> np.ndarray:
    """Edge-preserving low-pass of ``p`` steered by ``guide`` (exact, O(1) per pixel)."""
    if params.subsample > 1:
        return fast_guided_filter(p, guide, params)
    if p.shape != guide.shape:
        raise ValueError(f"input {p.shape} and guide {guide.shape} differ in shape")
    p = np.asarray(p, dtype=np.float64)
    guide = p if guide is p else np.asarray(guide, dtype=np.float64)
    a, b = _coefficients(p, guide, params.k, params.eps)
    return box_mean(a, params.k) * guide + box_mean(b, params.k)


def guided_filter_reference(p: np.ndarray, guide: np.ndarray, params: GuidedFilterParams) -> np.ndarray:
    """Direct per-window loops; slow, used as an oracle in tests."""
    h, w = p.shape
    r, eps = params.k, params.eps
    a = np.empty((h, w))
    b = np.empty((h, w))
    for i in range(h):
        for j in range(w):
            wi = guide[max(0, i - r) : i + r + 1, max(0, j - r) : j + r + 1]
            wp = p[max(0, i - r) : i + r + 1, max(0, j - r) : j + r + 1]
            mi = wi.mean()
            mp = wp.mean()
            var = ((wi - mi) ** 2).mean()
            cov = ((wi - mi) * (wp - mp)).mean()
            a[i, j] = cov / (var + eps)
            b[i, j] = mp - a[i, j] * mi
    out = np.empty((h, w))
    for i in range(h):
        for j in range(w):
            sa = a[max(0, i - r) : i + r + 1, max(0, j - r) : j + r + 1].mean()
            sb = b[max(0, i - r) : i + r + 1, max(0, j - r) : j + r + 1].mean()
            out[i, j] = sa * guide[i, j] + sb
    return out


def _block_mean(x: np.ndarray, s: int) -> np.ndarray:
    h, w = x.shape
    hp, wp = -(-h // s) * s, -(-w // s) * s
    if (hp, wp) != (h, w):
        x = np.pad(x, ((0, hp - h), (0, wp - w)), mode="edge")
    return x.reshape(hp // s, s, wp // s, s).mean(axis=(1, 3))


def _bilinear_axis(n_out: int, n_in: int, s: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    src = (np.arange(n_out) + 0.5) / s - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def upsample_bilinear(x: np.ndarray, s: int, shape: tuple[int, int]) -> np.ndarray:
    """Bilinear resize by factor ``s`` with pixel-centre alignment, cropped to ``shape``."""
    h, w = shape
    r0, r1, fr = _bilinear_axis(h, x.shape[0], s)
    c0, c1, fc = _bilinear_axis(w, x.shape[1], s)
    rows = x[r0] * (1.0 - fr)[:, None] + x[r1] * fr[:, None]
    return rows[:, c0] * (1.0 - fc) + rows[:, c1] * fc


def fast_guided_filter(p: np.ndarray, guide: np.ndarray, params: GuidedFilterParams) -> np.ndarray:
    """Guided filter with coefficients estimated at 1/s resolution."""
    s = params.subsample
    if s == 1:
        return guided_filter(p, guide, params)
    if s not in (2, 4):
        raise ValueError(f"subsample must be 1, 2 or 4, got {s}")
    if p.shape != guide.shape:
        raise ValueError(f"input {p.shape} and guide {guide.shape} differ in shape")
    self_guided = p is guide
    p = np.asarray(p, dtype=np.float64)
    guide = p if self_guided else np.asarray(guide, dtype=np.float64)
    p_lo = _block_mean(p, s)
    g_lo = p_lo if self_guided else _block_mean(guide, s)
    r = math.ceil(params.k / s)
    a, b = _coefficients(p_lo, g_lo, r, params.eps)
    mean_a = upsample_bilinear(box_mean(a, r), s, p.shape)
    mean_b = upsample_bilinear(box_mean(b, r), s, p.shape)
    return mean_a * guide + mean_b


def decompose_multiscale(
    gray: np.ndarray,
    eps: float = 0.1,
    mode: str = "additive",
    radii: tuple[int, ...] = DEFAULT_RADII,
    interpretation: str = "radius",
    subsample: int = 1,
) -> FreqStack:
    """Self-guided decomposition into one low/high layer pair per window size.

    ``additive``: high = gray - low (so low + high reproduces gray).
    ``complement``: high = 1 - low.
    """
    if mode not in ("additive", "complement"):
        raise ValueError(f"unknown decomposition mode {mode!r}")
    gray = np.asarray(gray, dtype=np.float64)
    lows, highs = [], []
    for k in radii:
        gp = GuidedFilterParams(resolve_radius(k, interpretation), eps, subsample)
        low = guided_filter(gray, gray, gp)
        lows.append(low)
        highs.append(gray - low if mode == "additive" else 1.0 - low)
    return FreqStack(lows, highs, mode, tuple(radii))


def total_variation(x: np.ndarray) -> float:
    return float(np.abs(np.diff(x, axis=0)).sum() + np.abs(np.diff(x, axis=1)).sum())
