"""Train on synthetic pairs, evaluate on held-out pairs, and compare against a model without frequency inputs."""

from __future__ import annotations

import argparse
import logging
import tempfile
import time
from pathlib import Path

from mvksr.data import DatasetConfig, build_dataset, make_clean_scenes
from mvksr.train import TrainConfig, evaluate_dataset, train_loop


def _held_out_psnr(ev) -> float:
    vals = [v for rep in ev.restored.values() for v in rep.psnr.values()]
    return sum(vals) / len(vals)


def run(
    workdir: Path,
    n_train: int = 64,
    n_test: int = 16,
    size: int = 96,
    epochs: int = 90,
    seed: int = 0,
    ablation: bool = True,
    log_fn=print,
) -> dict:
    """Returns per-kind gains over the degraded input and, with ``ablation``, both held-out PSNRs."""
    n = n_train + n_test
    make_clean_scenes(workdir / "clean", n, size, size, seed=seed + 1)
    ds = DatasetConfig(assignment="cycle", seed=seed, test_fraction=n_test / n)
    manifest = build_dataset(workdir / "clean", ds, workdir / "data")
    out: dict = {"test_counts": manifest.kind_counts("test")}

    def train(name, **flags):
        cfg = TrainConfig(epochs=epochs, seed=seed, **flags)
        t0 = time.perf_counter()
        res = train_loop(manifest, cfg, workdir / f"{name}.ckpt", on_epoch=lambda line: log_fn(f"[{name}] {line}"))
        ev = evaluate_dataset(res.state.params, manifest, "test", cfg.net, cfg.view_options())
        return ev, time.perf_counter() - t0

    full, secs = train("full")
    out["summary"] = full.summary()
    out["gains"] = {k: full.gain(k) for k in full.restored}
    out["psnr_full"] = _held_out_psnr(full)
    out["seconds"] = secs
    if ablation:
        plain, secs2 = train("nofreq", use_high_input=False, use_low_input=False)
        out["summary_nofreq"] = plain.summary()
        out["psnr_nofreq"] = _held_out_psnr(plain)
        out["seconds"] += secs2
    return out


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--train", type=int, default=64)
    ap.add_argument("--test", type=int, default=16)
    ap.add_argument("--size", type=int, default=96)
    ap.add_argument("--epochs", type=int, default=90)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--no-ablation", action="store_true")
    ap.add_argument("--workdir", type=Path)
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)
    with tempfile.TemporaryDirectory() as tmp:
        wd = args.workdir or Path(tmp)
        res = run(wd, args.train, args.test, args.size, args.epochs, args.seed, not args.no_ablation)
    print(res.pop("summary"))
    if "summary_nofreq" in res:
        print("without frequency inputs:")
        print(res.pop("summary_nofreq"))
    for k, v in res.items():
        print(f"{k}={v}")


if __name__ == "__main__":
    main()
