"""Overfit a handful of synthetic pairs and report loss reduction and training-set PSNR."""

from __future__ import annotations

import argparse
import logging
import tempfile
import time
from pathlib import Path

import numpy as np

from mvksr.data import DatasetConfig, build_dataset, make_clean_scenes
from mvksr.train import TrainConfig, evaluate_dataset, train_loop


def run(workdir: Path, pairs: int = 8, size: int = 64, epochs: int = 200, lr_step: int = 150, batch: int = 2, seed: int = 0, log_fn=print):
    clean = workdir / "clean"
    make_clean_scenes(clean, pairs, size, size, seed=seed)
    manifest = build_dataset(clean, DatasetConfig(assignment="cycle", seed=seed, test_fraction=0.0), workdir / "data")
    cfg = TrainConfig(epochs=epochs, lr_step=lr_step, batch_size=batch, seed=seed, split="all", patch_size=size)
    t0 = time.perf_counter()
    result = train_loop(manifest, cfg, workdir / "model.ckpt", on_epoch=log_fn)
    elapsed = time.perf_counter() - t0
    ev = evaluate_dataset(result.state.params, manifest, "all", opts=cfg.view_options())
    psnrs = [v for rep in ev.restored.values() for v in rep.psnr.values()]
    return {
        "initial_loss": result.history[0]["total"],
        "final_loss": result.history[-1]["total"],
        "train_psnr": float(np.mean(psnrs)),
        "min_psnr": float(np.min(psnrs)),
        "seconds": elapsed,
        "summary": ev.summary(),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--pairs", type=int, default=8)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--epochs", type=int, default=200)
    ap.add_argument("--lr-step", type=int, default=150)
    ap.add_argument("--batch", type=int, default=2)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--workdir", type=Path)
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)
    with tempfile.TemporaryDirectory() as tmp:
        wd = args.workdir or Path(tmp)
        res = run(wd, args.pairs, args.size, args.epochs, args.lr_step, args.batch, args.seed)
    print(res.pop("summary"))
    for k, v in res.items():
        print(f"{k}={v}")
    print(f"loss_ratio={res['final_loss'] / res['initial_loss']}")


if __name__ == "__main__":
    main()
