"""Central finite-difference checks against reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, backward


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_input: int | None
    worst_index: tuple[int, ...] | None
    checked: int
    tolerance: float
    per_input: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_err < self.tolerance

    def __str__(self) -> str:
        status = "ok" if self.passed else "FAIL"
        return (
            f"{status} max_rel_err={self.max_rel_err:.3e} at input={self.worst_input} "
            f"index={self.worst_index} ({self.checked} coords, tol={self.tolerance:g})"
        )


def rel_err(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def grad_check(
    fn: Callable[[Sequence[Tensor]], Tensor],
    inputs: Sequence[Tensor],
    tolerance: float = 1e-4,
    h: float = 1e-5,
    max_coords: int | None = None,
    exclude: Callable[[int, tuple[int, ...], float], bool] | None = None,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Compare ``backward`` gradients of ``fn(inputs)`` with central differences.

    Every input with ``requires_grad`` is checked. ``max_coords`` caps the
    number of sampled coordinates per input (all coordinates when None).
    ``exclude(input_idx, index, value)`` skips coordinates, e.g. kinks.
    A failing check is reported, never raised.
    """
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        t.grad = None
    loss = fn(inputs)
    backward(loss)
    analytic = [None if t.grad is None else t.grad.copy() for t in inputs]

    worst = 0.0
    worst_at: tuple[int | None, tuple[int, ...] | None] = (None, None)
    checked = 0
    per_input: list[float] = []
    for ii, t in enumerate(inputs):
        if not t.requires_grad:
            per_input.append(0.0)
            continue
        ga = analytic[ii] if analytic[ii] is not None else np.zeros_like(t.data)
        flat_n = t.data.size
        if max_coords is None or max_coords >= flat_n:
            coords = np.arange(flat_n)
        else:
            coords = rng.choice(flat_n, size=max_coords, replace=False)
        local = 0.0
        for fi in coords:
            idx = np.unravel_index(int(fi), t.shape)
            orig = t.data[idx]
            if exclude is not None and exclude(ii, idx, float(orig)):
                continue
            t.data[idx] = orig + h
            fp = float(fn(inputs).data)
            t.data[idx] = orig - h
            fm = float(fn(inputs).data)
            t.data[idx] = orig
            numeric = (fp - fm) / (2 * h)
            e = rel_err(float(ga[idx]), numeric, floor)
            checked += 1
            local = max(local, e)
            if e > worst:
                worst = e
                worst_at = (ii, tuple(int(v) for v in idx))
        per_input.append(local)
    for t in inputs:
        t.grad = None
    return GradCheckReport(worst, worst_at[0], worst_at[1], checked, tolerance, per_input)


def projected(op: Callable[..., Tensor], weights: np.ndarray | None = None, seed: int = 0):
    """Turn a tensor-valued op into a scalar function via a fixed random projection."""
    cache: dict[str, np.ndarray] = {}

    def fn(inputs):
        out = op(*inputs)
        if "w" not in cache:
            cache["w"] = (
                weights if weights is not None else np.random.default_rng(seed).standard_normal(out.shape)
            ).astype(out.dtype)
        return (out * Tensor(cache["w"])).sum()

    return fn


def directional_check(
    fn: Callable[[Sequence[Tensor]], Tensor],
    inputs: Sequence[Tensor],
    tolerance: float = 1e-4,
    h: float = 1e-5,
    rng: np.random.Generator | None = None,
    floor: float = 1e-6,
) -> GradCheckReport:
    """Directional-derivative check: one random unit direction per input.

    Compares <grad, v> with (f(x + h v) - f(x - h v)) / 2h, which exercises
    every coordinate of an input at the cost of two extra evaluations.
    """
    rng = rng or np.random.default_rng(0)
    for t in inputs:
        t.grad = None
    backward(fn(inputs))
    worst, worst_in, per_input = 0.0, None, []
    for ii, t in enumerate(inputs):
        if not t.requires_grad:
            per_input.append(0.0)
            continue
        ga = t.grad if t.grad is not None else np.zeros_like(t.data)
        v = rng.standard_normal(t.shape)
        v /= np.linalg.norm(v)
        orig = t.data.copy()
        t.data[...] = orig + h * v
        fp = float(fn(inputs).data)
        t.data[...] = orig - h * v
        fm = float(fn(inputs).data)
        t.data[...] = orig
        e = rel_err(float((ga * v).sum()), (fp - fm) / (2 * h), floor)
        per_input.append(e)
        if e > worst:
            worst, worst_in = e, ii
    for t in inputs:
        t.grad = None
    return GradCheckReport(worst, worst_in, None, len(per_input), tolerance, per_input)
