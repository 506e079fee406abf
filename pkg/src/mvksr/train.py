"""Training loop, learning-rate schedule, checkpointed state, restore and evaluation."""

from __future__ import annotations

import logging
import re
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .checkpoint import load_checkpoint, save_checkpoint
from .data import KINDS, DatasetManifest, Record
from .imageio import read_image, write_image
from .losses import CrConfig, FeaturePyramid, LossContext, LossWeights, SupervisionTargets, make_targets, total_loss
from .metrics import MetricReport
from .net import MffOutputs, NetworkConfig, ViewOptions, build_views, forward_views, init_params
from .optim import AdamState, adam_step
from .tensor import Tensor

log = logging.getLogger(__name__)

ADAM_M = "adam.m."
ADAM_V = "adam.v."
META = "meta."


class NumericalError(RuntimeError):
    """Raised when a forward or backward pass produces NaN or Inf."""


@dataclass
class TrainConfig:
    patch_size: int = 64
    batch_size: int = 4
    epochs: int = 90
    base_lr: float = 1e-3
    lr_step: int = 30
    lr_gamma: float = 0.1
    seed: int = 0
    split: str = "train"
    # input-view ablations
    use_high_input: bool = True
    use_low_input: bool = True
    # loss ablations and weights
    supervise_gray: bool = True
    supervise_high: bool = True
    supervise_low: bool = True
    self_supervise: bool = True
    lambda1: float = 0.8
    lambda2: float = 0.2
    lambda_cs: float = 1.0
    flips: bool = True
    checkpoint_every: int = 10
    dtype: str = "float32"
    net: NetworkConfig = field(default_factory=NetworkConfig)
    cr: CrConfig = field(default_factory=CrConfig)

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError("base_lr must be > 0")
        if self.patch_size % 4:
            raise ValueError("patch_size must be a multiple of 4")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            self.lambda1,
            self.lambda2,
            self.lambda_cs,
            self.supervise_gray,
            self.supervise_high,
            self.supervise_low,
            self.self_supervise,
        )

    def view_options(self, fast: bool = False) -> ViewOptions:
        return ViewOptions(
            mode=self.net.decomposition_mode,
            subsample=2 if fast else 1,
            use_high=self.use_high_input,
            use_low=self.use_low_input,
        )


def lr_schedule(epoch: int, base_lr: float = 1e-3, step: int = 30, gamma: float = 0.1) -> float:
    """Step decay: ``base_lr * gamma ** (epoch // step)``.

    When ``1/gamma`` is a whole number the decay is applied as a division,
    which keeps 1e-3 -> 1e-4 -> 1e-5 exact in binary floating point.
    """
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    k = epoch // step
    inv = 1.0 / gamma
    if inv == round(inv):
        return base_lr / round(inv) ** k
    return base_lr * gamma**k


# ---------------------------------------------------------------- training state


@dataclass
class TrainState:
    params: dict[str, Tensor]
    adam: AdamState
    epoch: int = 0  # completed epochs


def state_tensors(state: TrainState) -> dict[str, np.ndarray]:
    out: dict[str, np.ndarray] = {k: v.data for k, v in state.params.items()}
    for k, m in state.adam.m.items():
        out[ADAM_M + k] = m
        out[ADAM_V + k] = state.adam.v[k]
    out[META + "epoch"] = np.array([state.epoch], dtype=np.float64)
    out[META + "t"] = np.array([state.adam.t], dtype=np.float64)
    return out


def model_tensors(tensors: dict) -> dict:
    return {k: v for k, v in tensors.items() if not k.startswith((ADAM_M, ADAM_V, META))}


def state_from_tensors(tensors: dict[str, Tensor], dtype=np.float32) -> TrainState:
    params = {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in model_tensors(tensors).items()}
    adam = AdamState()
    for k in params:
        if ADAM_M + k in tensors:
            adam.m[k] = tensors[ADAM_M + k].data.astype(dtype)
            adam.v[k] = tensors[ADAM_V + k].data.astype(dtype)
    adam.t = int(tensors[META + "t"].data[0]) if META + "t" in tensors else 0
    epoch = int(tensors[META + "epoch"].data[0]) if META + "epoch" in tensors else 0
    return TrainState(params, adam, epoch)


def state_path(ckpt_path) -> Path:
    p = Path(ckpt_path)
    return p.with_name(p.name + ".state")


def config_from_params(params: dict) -> NetworkConfig:
    """Recover the structural settings that vary between saved models."""
    blocks = {int(m.group(1)) for k in params if (m := re.match(r"enc1\.mrb(\d+)\.", k))}
    return NetworkConfig(blocks_per_level=max(blocks) + 1 if blocks else 1)


# ---------------------------------------------------------------- data


@dataclass
class _Sample:
    views: np.ndarray  # (9, H, W)
    clean: np.ndarray  # (3, H, W)
    degraded: np.ndarray  # (3, H, W)
    gray: np.ndarray  # (1, H, W)
    high: np.ndarray
    low: np.ndarray


def _load_samples(manifest: DatasetManifest, records: list[Record], cfg: TrainConfig, dtype) -> list[_Sample]:
    opts = cfg.view_options()
    samples = []
    for r in records:
        clean = read_image(manifest.resolve(r.clean_path))
        degraded = read_image(manifest.resolve(r.degraded_path))
        if min(clean.shape[:2]) < cfg.patch_size:
            raise ValueError(f"image {r.clean_path} is smaller than the {cfg.patch_size}px patch")
        tg = make_targets(clean, mode=cfg.net.decomposition_mode)
        samples.append(
            _Sample(
                build_views(degraded, opts).astype(dtype),
                clean.transpose(2, 0, 1).astype(dtype),
                degraded.transpose(2, 0, 1).astype(dtype),
                tg.gray_c[0].astype(dtype),
                tg.high_c[0].astype(dtype),
                tg.low_c[0].astype(dtype),
            )
        )
    return samples


def _batch(samples: list[_Sample], idx, rng: np.random.Generator, cfg: TrainConfig):
    p = cfg.patch_size
    cols = {f: [] for f in ("views", "clean", "degraded", "gray", "high", "low")}
    for i in idx:
        s = samples[i]
        h, w = s.clean.shape[1:]
        y = int(rng.integers(0, h - p + 1))
        x = int(rng.integers(0, w - p + 1))
        flip = cfg.flips and bool(rng.integers(0, 2))
        for f in cols:
            a = getattr(s, f)[:, y : y + p, x : x + p]
            cols[f].append(a[:, :, ::-1] if flip else a)
    return {f: np.ascontiguousarray(np.stack(v)) for f, v in cols.items()}


def first_nonfinite(named) -> str | None:
    for name, arr in named:
        if arr is not None and not np.all(np.isfinite(arr)):
            return name
    return None


# ---------------------------------------------------------------- loop


@dataclass
class TrainResult:
    state: TrainState
    log_lines: list[str]
    history: list[dict[str, float]]


def format_log_line(epoch: int, lr: float, means: dict[str, float]) -> str:
    return f"epoch={epoch} lr={lr!r} loss={means['total']!r} msssim={means['msssim']!r} cr={means['cr']!r} cs={means['cs']!r}"


def train_loop(
    manifest: DatasetManifest,
    cfg: TrainConfig,
    out_path=None,
    resume: TrainState | None = None,
    stop_after: int | None = None,
    on_epoch=None,
) -> TrainResult:
    """Train on the manifest's ``cfg.split`` records.

    ``resume`` continues from a saved state; ``stop_after`` ends the run once
    that many epochs are complete (used to emulate an interruption).
    Checkpoints go to ``out_path`` (model only) and ``out_path.state``
    (model plus optimizer state) every ``checkpoint_every`` epochs and at the end.
    """
    dtype = np.dtype(cfg.dtype)
    records = manifest.split(cfg.split)
    if not records:
        raise ValueError(f"manifest has no records in split {cfg.split!r}")
    samples = _load_samples(manifest, records, cfg, dtype)
    if resume is None:
        state = TrainState(init_params(cfg.net, dtype=dtype), AdamState(lr=cfg.base_lr))
    else:
        state = resume
    ctx = LossContext(cfg.loss_weights(), extractor=FeaturePyramid(cfg.cr, dtype=dtype))
    end = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
    lines, history = [], []
    n = len(samples)
    for epoch in range(state.epoch, end):
        lr = lr_schedule(epoch, cfg.base_lr, cfg.lr_step, cfg.lr_gamma)
        state.adam.lr = lr
        rng = np.random.default_rng([cfg.seed, epoch])
        order = rng.permutation(n)
        sums: dict[str, float] = {}
        batches = 0
        for b0 in range(0, n, cfg.batch_size):
            bt = _batch(samples, order[b0 : b0 + cfg.batch_size], rng, cfg)
            parts = train_step(state, bt, ctx, cfg)
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v
            batches += 1
        means = {k: v / batches for k, v in sums.items()}
        state.epoch = epoch + 1
        line = format_log_line(epoch, lr, means)
        lines.append(line)
        history.append(means)
        log.info(line)
        if on_epoch is not None:
            on_epoch(line)
        if out_path is not None and (state.epoch % cfg.checkpoint_every == 0 or state.epoch == end):
            save_training(state, out_path)
    return TrainResult(state, lines, history)


def train_step(state: TrainState, bt: dict[str, np.ndarray], ctx: LossContext, cfg: TrainConfig) -> dict[str, float]:
    P = state.params
    out = forward_views(Tensor(bt["views"]), P, cfg.net)
    targets = SupervisionTargets(bt["gray"], bt["high"], bt["low"])
    loss, parts = total_loss(out.restored, bt["clean"], bt["degraded"], out, targets, ctx=ctx)
    if not np.isfinite(parts["total"]):
        bad = first_nonfinite(
            [("gray_f", out.gray_f.data), ("high_f", out.high_f.data), ("low_f", out.low_f.data), ("restored", out.restored.data)]
            + [(f"loss.{k}", np.asarray(v)) for k, v in parts.items()]
        )
        raise NumericalError(f"non-finite loss; first non-finite tensor: {bad}")
    T.backward(loss)
    bad = first_nonfinite((f"grad[{k}]", p.grad) for k, p in P.items())
    if bad:
        raise NumericalError(f"non-finite gradient; first non-finite tensor: {bad}")
    adam_step(P, state.adam)
    return parts


def save_training(state: TrainState, out_path) -> None:
    save_checkpoint(model_tensors(state_tensors(state)), out_path)
    save_checkpoint(state_tensors(state), state_path(out_path))


def load_training(path, dtype=np.float32) -> TrainState:
    p = Path(path)
    if not p.name.endswith(".state") and state_path(p).exists():
        p = state_path(p)
    return state_from_tensors(load_checkpoint(p, requires_grad=False), dtype)


# ---------------------------------------------------------------- inference


@dataclass
class RestoreTiming:
    decompose_s: float
    inference_s: float

    def __str__(self) -> str:
        return f"decompose={self.decompose_s:.3f}s inference={self.inference_s:.3f}s"


def load_model(path) -> tuple[dict[str, Tensor], NetworkConfig]:
    params = model_tensors(load_checkpoint(path, requires_grad=False))
    return params, config_from_params(params)


def restore_array(
    img: np.ndarray,
    params: dict[str, Tensor],
    net: NetworkConfig | None = None,
    fast: bool = False,
    opts: ViewOptions | None = None,
) -> tuple[np.ndarray, RestoreTiming, MffOutputs]:
    """Restore an (H, W, 3) image of any size; returns the cropped (H, W, 3) result."""
    h, w = img.shape[:2]
    if h == 0 or w == 0:
        raise ValueError("cannot restore an empty image")
    net = net or config_from_params(params)
    if opts is None:
        opts = ViewOptions(mode=net.decomposition_mode, subsample=2 if fast else 1)
    ph, pw = -h % 4, -w % 4
    padded = np.pad(img, ((0, ph), (0, pw), (0, 0)), mode="reflect" if min(h, w) > 1 else "edge")
    dtype = next(iter(params.values())).dtype
    t0 = time.perf_counter()
    views = build_views(padded, opts).astype(dtype)[None]
    t1 = time.perf_counter()
    out = forward_views(Tensor(views), params, net)
    t2 = time.perf_counter()
    restored = out.restored.data[0].transpose(1, 2, 0)[:h, :w].astype(np.float64)
    return restored, RestoreTiming(t1 - t0, t2 - t1), out


def restore_image(ckpt_path, image_path, out_path, fast: bool = False) -> tuple[np.ndarray, RestoreTiming]:
    params, net = load_model(ckpt_path)
    img = read_image(image_path)
    restored, timing, _ = restore_array(img, params, net, fast)
    write_image(out_path, restored)
    return restored, timing


@dataclass
class DatasetEvaluation:
    restored: dict[str, MetricReport]
    baseline: dict[str, MetricReport]

    def records(self) -> list[str]:
        lines = []
        for kind in self.restored:
            lines += self.restored[kind].records(f"{kind}.restored.")
            lines += self.baseline[kind].records(f"{kind}.degraded.")
        return lines

    def summary(self) -> str:
        rows = [f"{'kind':<7} {'n':>3}  {'restored PSNR/SSIM':>20}  {'degraded PSNR/SSIM':>20}  {'gain dB':>7}"]
        for kind in self.restored:
            r, b = self.restored[kind], self.baseline[kind]
            rp, bp = r.stats("psnr")[0], b.stats("psnr")[0]
            rows.append(
                f"{kind:<7} {r.count:>3}  {rp:>10.3f} / {r.stats('ssim')[0]:.3f}  {bp:>10.3f} / {b.stats('ssim')[0]:.3f}  {rp - bp:>7.3f}"
            )
        return "\n".join(rows)

    def gain(self, kind: str) -> float:
        return self.restored[kind].stats("psnr")[0] - self.baseline[kind].stats("psnr")[0]


def evaluate_dataset(
    params: dict[str, Tensor],
    manifest: DatasetManifest,
    split: str = "test",
    net: NetworkConfig | None = None,
    opts: ViewOptions | None = None,
) -> DatasetEvaluation:
    """Per-kind PSNR/SSIM of restored and of unprocessed degraded images against clean."""
    restored = {k: MetricReport() for k in KINDS}
    baseline = {k: MetricReport() for k in KINDS}
    records = manifest.split(split)
    if not records:
        raise ValueError(f"manifest has no records in split {split!r}")
    for r in records:
        clean = read_image(manifest.resolve(r.clean_path))
        degraded = read_image(manifest.resolve(r.degraded_path))
        out, _, _ = restore_array(degraded, params, net, opts=opts)
        name = Path(r.degraded_path).name
        restored[r.kind].add(name, out, clean)
        baseline[r.kind].add(name, degraded, clean)
    present = [k for k in KINDS if restored[k].count]
    return DatasetEvaluation({k: restored[k] for k in present}, {k: baseline[k] for k in present})
