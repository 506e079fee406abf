"""Haze, rain and rain+haze degradation models plus procedural generators.

Images are float64 arrays of shape (H, W, C) with values in [0, 1]. Depth
maps, transmission maps and rain fields are (H, W) and broadcast over
channels.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage


@dataclass
class HazeParams:
    A: tuple[float, ...] = (1.0,)
    beta: float = 1.0

    def __post_init__(self):
        self.A = tuple(float(a) for a in np.atleast_1d(self.A))
        if any(not 0.0 <= a <= 1.0 for a in self.A):
            raise ValueError(f"atmospheric light must lie in [0, 1], got {self.A}")
        if self.beta < 0:
            raise ValueError(f"scattering coefficient must be >= 0, got {self.beta}")

    def light(self, channels: int) -> np.ndarray:
        if len(self.A) == 1:
            return np.full(channels, self.A[0])
        if len(self.A) != channels:
            raise ValueError(f"A has {len(self.A)} channels, image has {channels}")
        return np.asarray(self.A)


@dataclass
class RainGenParams:
    angle: float = 0.0
    streak_length: float = 20.0
    density: float = 2.0
    intensity: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if not -30.0 <= self.angle <= 30.0:
            raise ValueError(f"angle {self.angle} outside [-30, 30] degrees")
        if not 8.0 <= self.streak_length <= 40.0:
            raise ValueError(f"streak_length {self.streak_length} outside [8, 40]")
        if self.density != 0 and not 0.5 <= self.density <= 8.0:
            raise ValueError(f"density {self.density} outside [0.5, 8] (or exactly 0)")
        if not 0.0 < self.intensity <= 0.8:
            raise ValueError(f"intensity {self.intensity} outside (0, 0.8]")


@dataclass
class DepthParams:
    mode: str = "smooth-noise"
    d_min: float = 0.0
    d_max: float = 1.0
    seed: int = 0


@dataclass
class DegradationSpec:
    """Everything needed to regenerate one degraded image from its clean source."""

    kind: str  # haze | rain | mixed
    haze: HazeParams = field(default_factory=HazeParams)
    depth: DepthParams = field(default_factory=DepthParams)
    rain: RainGenParams = field(default_factory=RainGenParams)


@dataclass
class DegradedTriple:
    hazy: np.ndarray
    rainy: np.ndarray
    mixed: np.ndarray
    haze: HazeParams
    depth: np.ndarray
    rain: np.ndarray


def _check_map(name: str, m: np.ndarray, img: np.ndarray) -> None:
    if m.shape != img.shape[:2]:
        raise ValueError(f"{name} shape {m.shape} does not match image {img.shape[:2]}")


def transmission_map(d: np.ndarray, beta: float) -> np.ndarray:
    if beta < 0:
        raise ValueError(f"scattering coefficient must be >= 0, got {beta}")
    return np.exp(-beta * np.asarray(d, dtype=np.float64))


def synth_haze(clear: np.ndarray, t: np.ndarray, A: HazeParams) -> np.ndarray:
    _check_map("transmission map", t, clear)
    a = A.light(clear.shape[2])
    tt = t[:, :, None]
    # convex blend; the clip only guards against last-ulp rounding above 1
    return np.clip(clear * tt + a * (1.0 - tt), 0.0, 1.0)


def synth_rain(clear: np.ndarray, S: np.ndarray) -> np.ndarray:
    _check_map("rain field", S, clear)
    return np.clip(clear + S[:, :, None], 0.0, 1.0)


def synth_mixed(clear: np.ndarray, S: np.ndarray, t: np.ndarray, A: HazeParams) -> np.ndarray:
    _check_map("rain field", S, clear)
    _check_map("transmission map", t, clear)
    a = A.light(clear.shape[2])
    tt = t[:, :, None]
    # same operation order as synth_haze so S=0 reproduces it bitwise
    return np.clip((clear + S[:, :, None]) * tt + a * (1.0 - tt), 0.0, 1.0)


def gen_depth(mode: str, h: int, w: int, d_min: float = 0.0, d_max: float = 1.0, seed: int = 0) -> np.ndarray:
    if not (math.isfinite(d_min) and math.isfinite(d_max)) or d_min < 0 or d_min > d_max:
        raise ValueError(f"invalid depth range [{d_min}, {d_max}]")
    if mode == "constant":
        return np.full((h, w), float(d_min))
    if mode == "ramp":
        # far (d_max) at the top row, near (d_min) at the bottom row
        rows = np.linspace(d_max, d_min, h) if h > 1 else np.array([d_max])
        return np.repeat(rows[:, None], w, axis=1).astype(np.float64)
    if mode == "smooth-noise":
        rng = np.random.default_rng(seed)
        noise = rng.standard_normal((h, w))
        smooth = ndimage.gaussian_filter(noise, sigma=max(h, w) / 8.0, mode="reflect")
        # vertical bias so the top of the frame tends to be farther away
        smooth = smooth / (smooth.std() + 1e-12) + np.linspace(1.5, -1.5, h)[:, None]
        lo, hi = smooth.min(), smooth.max()
        if hi - lo < 1e-12:
            return np.full((h, w), float(d_min))
        out = d_min + (smooth - lo) / (hi - lo) * (d_max - d_min)
        return np.clip(out, d_min, d_max)
    raise ValueError(f"unknown depth mode {mode!r}")


def gen_rain_streaks(p: RainGenParams, h: int, w: int) -> np.ndarray:
    """Additive rain field of anti-aliased streaks with a triangular alpha profile."""
    field_ = np.zeros((h, w))
    n = math.ceil(p.density * h * w / 1000.0)
    if n == 0:
        return field_
    rng = np.random.default_rng(p.seed)
    half = p.streak_length / 2.0
    cy = rng.uniform(-half, h + half, n)
    cx = rng.uniform(-half, w + half, n)
    jitter = rng.uniform(-3.0, 3.0, n)
    peaks = p.intensity * rng.uniform(0.5, 1.0, n)
    for y0, x0, dj, peak in zip(cy, cx, jitter, peaks):
        theta = math.radians(p.angle + dj)
        # direction measured from vertical: positive angle leans right
        dy, dx = math.cos(theta), math.sin(theta)
        ext_y = abs(dy) * half + 1.5
        ext_x = abs(dx) * half + 1.5
        r0, r1 = max(0, int(math.floor(y0 - ext_y))), min(h, int(math.ceil(y0 + ext_y)) + 1)
        c0, c1 = max(0, int(math.floor(x0 - ext_x))), min(w, int(math.ceil(x0 + ext_x)) + 1)
        if r0 >= r1 or c0 >= c1:
            continue
        yy, xx = np.mgrid[r0:r1, c0:c1]
        ry = yy + 0.5 - y0
        rx = xx + 0.5 - x0
        along = ry * dy + rx * dx
        perp = np.abs(-ry * dx + rx * dy)
        inside = np.abs(along) <= half
        coverage = np.clip(1.0 - perp, 0.0, 1.0)
        falloff = np.clip(1.0 - np.abs(along) / half, 0.0, 1.0)
        field_[r0:r1, c0:c1] += np.where(inside, peak * coverage * falloff, 0.0)
    return np.clip(field_, 0.0, 1.0)


def degrade(clean: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    """Apply the degradation described by ``spec`` to a clean image."""
    h, w = clean.shape[:2]
    if spec.kind == "rain":
        return synth_rain(clean, gen_rain_streaks(spec.rain, h, w))
    d = gen_depth(spec.depth.mode, h, w, spec.depth.d_min, spec.depth.d_max, spec.depth.seed)
    t = transmission_map(d, spec.haze.beta)
    if spec.kind == "haze":
        return synth_haze(clean, t, spec.haze)
    if spec.kind == "mixed":
        return synth_mixed(clean, gen_rain_streaks(spec.rain, h, w), t, spec.haze)
    raise ValueError(f"unknown degradation kind {spec.kind!r}")


def synth_triple(clean: np.ndarray, spec: DegradationSpec) -> DegradedTriple:
    h, w = clean.shape[:2]
    d = gen_depth(spec.depth.mode, h, w, spec.depth.d_min, spec.depth.d_max, spec.depth.seed)
    t = transmission_map(d, spec.haze.beta)
    S = gen_rain_streaks(spec.rain, h, w)
    return DegradedTriple(
        hazy=synth_haze(clean, t, spec.haze),
        rainy=synth_rain(clean, S),
        mixed=synth_mixed(clean, S, t, spec.haze),
        haze=spec.haze,
        depth=d,
        rain=S,
    )


@dataclass
class SamplingRanges:
    """Per-image parameter ranges used when building a synthetic corpus."""

    A: tuple[float, float] = (0.7, 1.0)
    beta: tuple[float, float] = (0.6, 2.0)
    depth: tuple[float, float] = (0.3, 1.0)
    per_channel_A: bool = False
    fixed_beta: float | None = None
    fixed_A: float | None = None
    rain_angle: tuple[float, float] = (-30.0, 30.0)
    rain_length: tuple[float, float] = (8.0, 40.0)
    rain_density: tuple[float, float] = (2.0, 8.0)
    rain_intensity: tuple[float, float] = (0.4, 0.8)


def sample_spec(kind: str, rng: np.random.Generator, ranges: SamplingRanges | None = None) -> DegradationSpec:
    r = ranges or SamplingRanges()
    if r.fixed_A is not None:
        A = (r.fixed_A,)
    elif r.per_channel_A:
        A = tuple(float(v) for v in rng.uniform(*r.A, 3))
    else:
        A = (float(rng.uniform(*r.A)),)
    beta = r.fixed_beta if r.fixed_beta is not None else float(rng.uniform(*r.beta))
    depth = DepthParams("smooth-noise", r.depth[0], r.depth[1], int(rng.integers(0, 2**31)))
    rain = RainGenParams(
        angle=float(rng.uniform(*r.rain_angle)),
        streak_length=float(rng.uniform(*r.rain_length)),
        density=float(rng.uniform(*r.rain_density)),
        intensity=float(rng.uniform(*r.rain_intensity)),
        seed=int(rng.integers(0, 2**63 - 1)),
    )
    return DegradationSpec(kind, HazeParams(A, beta), depth, rain)


def gen_clean_scene(h: int, w: int, seed: int) -> np.ndarray:
    """Procedural outdoor-like RGB scene: sky gradient, ground, blocks and texture."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w] / np.array([max(h - 1, 1), max(w - 1, 1)])[:, None, None]
    img = np.zeros((h, w, 3))
    horizon = rng.uniform(0.3, 0.6)
    sky_top = rng.uniform([0.2, 0.4, 0.6], [0.5, 0.7, 0.95])
    sky_bot = rng.uniform([0.6, 0.7, 0.75], [0.9, 0.9, 1.0])
    ground = rng.uniform([0.15, 0.15, 0.1], [0.55, 0.5, 0.4])
    sky = sky_top + (sky_bot - sky_top) * (yy[..., None] / horizon)
    gnd = ground * (0.7 + 0.3 * (yy[..., None] - horizon) / (1 - horizon + 1e-9))
    img[:] = np.where(yy[..., None] < horizon, sky, gnd)
    for _ in range(rng.integers(3, 8)):
        color = rng.uniform(0.05, 0.95, 3)
        if rng.random() < 0.6:
            x0, x1 = np.sort(rng.uniform(0, 1, 2))
            top = rng.uniform(0.1, horizon + 0.2)
            mask = (xx >= x0) & (xx <= x0 + max(x1 - x0, 0.05)) & (yy >= top) & (yy <= rng.uniform(top + 0.1, 1.0))
        else:
            cy, cx = rng.uniform(0.2, 1.0), rng.uniform(0, 1)
            ry, rx = rng.uniform(0.05, 0.25, 2)
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        img[mask] = color
    freq = rng.uniform(4, 16)
    phase = rng.uniform(0, 2 * np.pi)
    tex = 0.04 * np.sin(2 * np.pi * freq * (xx + 0.5 * yy) + phase)
    img = img + tex[..., None] + 0.01 * rng.standard_normal((h, w, 1))
    img = ndimage.gaussian_filter(img, sigma=(0.6, 0.6, 0))
    return np.clip(img, 0.0, 1.0)
