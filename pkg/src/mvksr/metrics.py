"""Full-reference metrics (PSNR, SSIM) and batch reports."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .losses import MsSsimConfig, ssim

log = logging.getLogger(__name__)

PSNR_CAP = 99.0
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


def psnr(x: np.ndarray, y: np.ndarray) -> float:
    """PSNR in dB for images in [0, 1], averaged jointly over all channels."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"psnr: shapes {x.shape} and {y.shape} differ")
    mse = float(np.mean((x - y) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


def ssim_metric(x: np.ndarray, y: np.ndarray, cfg: MsSsimConfig | None = None) -> float:
    if np.shape(x) != np.shape(y):
        raise ValueError(f"ssim: shapes {np.shape(x)} and {np.shape(y)} differ")
    return float(ssim(np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64), cfg).data)


@dataclass
class MetricReport:
    psnr: dict[str, float] = field(default_factory=dict)
    ssim: dict[str, float] = field(default_factory=dict)
    skipped: list[str] = field(default_factory=list)

    @property
    def count(self) -> int:
        return len(self.psnr)

    def stats(self, metric: str) -> tuple[float, float]:
        """Mean and population standard deviation."""
        vals = np.array(list(getattr(self, metric).values()), dtype=np.float64)
        if vals.size == 0:
            return float("nan"), float("nan")
        return float(vals.mean()), float(vals.std())

    def add(self, name: str, restored: np.ndarray, gt: np.ndarray) -> None:
        self.psnr[name] = psnr(restored, gt)
        self.ssim[name] = ssim_metric(restored, gt)

    def records(self, prefix: str = "") -> list[str]:
        lines = []
        for metric in ("psnr", "ssim"):
            for name, v in getattr(self, metric).items():
                lines.append(f"{prefix}{metric}.{name}={v!r}")
            mean, std = self.stats(metric)
            lines.append(f"{prefix}{metric}.mean={mean!r}")
            lines.append(f"{prefix}{metric}.std={std!r}")
        lines.append(f"{prefix}count={self.count}")
        return lines

    def table(self, title: str = "") -> str:
        width = max([len(n) for n in self.psnr] + [5])
        rows = [title] if title else []
        rows.append(f"{'image':<{width}}  {'PSNR':>8}  {'SSIM':>6}  FSIM  VSI")
        for name in self.psnr:
            rows.append(f"{name:<{width}}  {self.psnr[name]:8.3f}  {self.ssim[name]:6.3f}   --   --")
        pm, ps = self.stats("psnr")
        sm, ss = self.stats("ssim")
        rows.append(f"{'mean':<{width}}  {pm:.2f}±{ps:.2f}  {sm:.3f}±{ss:.3f}")
        return "\n".join(rows)


def parse_records(text: str) -> dict[str, str]:
    out = {}
    for line in text.splitlines():
        if line.strip() and "=" in line:
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out


def _images(d: Path) -> dict[str, Path]:
    return {p.name: p for p in sorted(d.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}


def eval_batch(restored_dir, gt_dir) -> MetricReport:
    """Pair images by filename and compute per-image PSNR/SSIM."""
    from .imageio import read_image

    rest = _images(Path(restored_dir))
    gts = _images(Path(gt_dir))
    common = sorted(set(rest) & set(gts))
    report = MetricReport()
    report.skipped = sorted(set(rest) ^ set(gts))
    for name in report.skipped:
        log.warning("no counterpart for %s; skipped", name)
    if not common:
        raise ValueError(f"no matching filenames between {restored_dir} and {gt_dir}")
    for name in common:
        report.add(name, read_image(rest[name]), read_image(gts[name]))
    return report
