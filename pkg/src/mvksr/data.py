"""Synthetic corpus construction and the line-oriented dataset manifest."""

from __future__ import annotations

import logging
import os
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .imageio import atomic_write_text, encode_png, atomic_write_bytes, read_image, write_image
from .physics import (
    DegradationSpec,
    DepthParams,
    HazeParams,
    RainGenParams,
    SamplingRanges,
    degrade,
    gen_clean_scene,
    sample_spec,
)

log = logging.getLogger(__name__)

MANIFEST_FORMAT = "mvksr-manifest"
MANIFEST_VERSION = 1
KINDS = ("haze", "rain", "mixed")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class ManifestError(ValueError):
    """The manifest text is malformed or has an unsupported version."""


@dataclass
class Record:
    index: int
    kind: str
    clean_path: str
    degraded_path: str
    spec: DegradationSpec
    split: str = "train"


@dataclass
class DatasetManifest:
    records: list[Record]
    seed: int
    version: int = MANIFEST_VERSION
    root: Path = field(default_factory=Path)

    def resolve(self, p: str) -> Path:
        q = Path(p)
        return q if q.is_absolute() else self.root / q

    def split(self, name: str) -> list[Record]:
        if name == "all":
            return list(self.records)
        return [r for r in self.records if r.split == name]

    def kind_counts(self, split: str = "all") -> dict[str, int]:
        out = {k: 0 for k in KINDS}
        for r in self.split(split):
            out[r.kind] += 1
        return out


@dataclass
class DatasetConfig:
    kinds: tuple[str, ...] = KINDS
    # "all": every clean image yields one degraded image per kind;
    # "one": each clean image gets a single kind drawn from ``fractions``;
    # "cycle": a single kind per image, rotating through ``kinds``
    assignment: str = "all"
    fractions: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    seed: int = 0
    test_fraction: float = 0.2
    ranges: SamplingRanges = field(default_factory=SamplingRanges)

    def __post_init__(self):
        if abs(sum(self.fractions) - 1.0) > 1e-9:
            raise ValueError(f"kind fractions must sum to 1, got {self.fractions}")
        for k in self.kinds:
            if k not in KINDS:
                raise ValueError(f"unknown degradation kind {k!r}")


# ---------------------------------------------------------------- serialization


def _spec_fields(spec: DegradationSpec) -> list[tuple[str, str]]:
    return [
        ("A", ",".join(repr(a) for a in spec.haze.A)),
        ("beta", repr(spec.haze.beta)),
        ("depth_mode", spec.depth.mode),
        ("depth_min", repr(spec.depth.d_min)),
        ("depth_max", repr(spec.depth.d_max)),
        ("depth_seed", str(spec.depth.seed)),
        ("rain_angle", repr(spec.rain.angle)),
        ("rain_length", repr(spec.rain.streak_length)),
        ("rain_density", repr(spec.rain.density)),
        ("rain_intensity", repr(spec.rain.intensity)),
        ("rain_seed", str(spec.rain.seed)),
    ]


def _spec_from(kv: dict[str, str], kind: str) -> DegradationSpec:
    return DegradationSpec(
        kind,
        HazeParams(tuple(float(a) for a in kv["A"].split(",")), float(kv["beta"])),
        DepthParams(kv["depth_mode"], float(kv["depth_min"]), float(kv["depth_max"]), int(kv["depth_seed"])),
        RainGenParams(
            float(kv["rain_angle"]),
            float(kv["rain_length"]),
            float(kv["rain_density"]),
            float(kv["rain_intensity"]),
            int(kv["rain_seed"]),
        ),
    )


def format_manifest(m: DatasetManifest) -> str:
    blocks = [
        "\n".join(
            [f"format={MANIFEST_FORMAT}", f"version={m.version}", f"seed={m.seed}", f"count={len(m.records)}"]
        )
    ]
    for r in m.records:
        lines = [
            f"index={r.index}",
            f"kind={r.kind}",
            f"split={r.split}",
            f"clean_path={r.clean_path}",
            f"degraded_path={r.degraded_path}",
        ]
        lines += [f"{k}={v}" for k, v in _spec_fields(r.spec)]
        blocks.append("\n".join(lines))
    return "\n\n".join(blocks) + "\n"


def parse_manifest(text: str, root: Path | None = None) -> DatasetManifest:
    blocks = []
    cur: dict[str, str] = {}
    for line in text.splitlines():
        if not line.strip():
            if cur:
                blocks.append(cur)
                cur = {}
            continue
        if "=" not in line:
            raise ManifestError(f"manifest line without '=': {line!r}")
        k, v = line.split("=", 1)
        cur[k.strip()] = v.strip()
    if cur:
        blocks.append(cur)
    if not blocks or blocks[0].get("format") != MANIFEST_FORMAT:
        raise ManifestError("not a dataset manifest (missing format header)")
    head = blocks[0]
    if int(head.get("version", -1)) != MANIFEST_VERSION:
        raise ManifestError(f"unsupported manifest version {head.get('version')}")
    try:
        records = [
            Record(int(b["index"]), b["kind"], b["clean_path"], b["degraded_path"], _spec_from(b, b["kind"]), b.get("split", "train"))
            for b in blocks[1:]
        ]
    except (KeyError, ValueError) as e:
        raise ManifestError(f"malformed manifest record: {e}") from e
    if "count" in head and int(head["count"]) != len(records):
        raise ManifestError(f"manifest declares {head['count']} records but holds {len(records)}")
    return DatasetManifest(records, int(head["seed"]), MANIFEST_VERSION, root or Path("."))


def save_manifest(m: DatasetManifest, path) -> None:
    atomic_write_text(path, format_manifest(m))


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    return parse_manifest(path.read_text(encoding="utf-8"), path.parent)


# ---------------------------------------------------------------- building


def assign_splits(records: list[Record], test_fraction: float = 0.2) -> None:
    """Deterministic hold-out: the records with the smallest index hashes go to test."""
    n_test = int(round(test_fraction * len(records)))
    ranked = sorted(records, key=lambda r: (zlib.crc32(str(r.index).encode()), r.index))
    test = {id(r) for r in ranked[:n_test]}
    for r in records:
        r.split = "test" if id(r) in test else "train"


def list_images(d) -> list[Path]:
    return [p for p in sorted(Path(d).iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES and p.is_file()]


def build_dataset(clean_dir, cfg: DatasetConfig, out_dir) -> DatasetManifest:
    """Degrade every clean image per ``cfg`` and write PNGs plus ``manifest.txt``."""
    out_dir = Path(out_dir)
    paths = list_images(clean_dir)
    if not paths:
        raise ValueError(f"no images in {clean_dir}")
    records: list[Record] = []
    usable = 0
    for ci, path in enumerate(paths):
        try:
            clean = read_image(path)
        except Exception as e:  # unreadable input is skipped, not fatal
            log.warning("skipping unreadable image %s: %s", path, e)
            continue
        usable += 1
        rng = np.random.default_rng([cfg.seed, ci])
        if cfg.assignment == "all":
            kinds = list(cfg.kinds)
        elif cfg.assignment == "cycle":
            kinds = [cfg.kinds[ci % len(cfg.kinds)]]
        elif cfg.assignment == "one":
            kinds = [str(rng.choice(KINDS, p=np.asarray(cfg.fractions)))]
        else:
            raise ValueError(f"unknown kind assignment {cfg.assignment!r}")
        for kind in kinds:
            spec = sample_spec(kind, rng, cfg.ranges)
            img = degrade(clean, spec)
            rel = Path("degraded") / f"{path.stem}_{kind}.png"
            atomic_write_bytes(out_dir / rel, encode_png(img))
            records.append(Record(len(records), kind, os.path.relpath(path.resolve(), out_dir.resolve()), str(rel), spec))
    if usable == 0:
        raise ValueError(f"no decodable images in {clean_dir}")
    assign_splits(records, cfg.test_fraction)
    manifest = DatasetManifest(records, cfg.seed, MANIFEST_VERSION, out_dir)
    save_manifest(manifest, out_dir / "manifest.txt")
    return manifest


def replay(manifest: DatasetManifest, record: Record) -> np.ndarray:
    """Regenerate a degraded image (float, pre-quantization) from its clean source and spec."""
    return degrade(read_image(manifest.resolve(record.clean_path)), record.spec)


def make_clean_scenes(out_dir, n: int, h: int = 64, w: int = 64, seed: int = 0) -> list[Path]:
    out_dir = Path(out_dir)
    paths = []
    for i in range(n):
        p = out_dir / f"scene_{i:04d}.png"
        write_image(p, gen_clean_scene(h, w, seed * 100003 + i))
        paths.append(p)
    return paths
