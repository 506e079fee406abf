"""Time the exact and subsampled guided filters, and optionally a full restoration, at one image size."""

from __future__ import annotations

import argparse
import time

import numpy as np

from mvksr.freq import GuidedFilterParams, guided_filter
from mvksr.net import NetworkConfig, init_params
from mvksr.train import load_model, restore_array


def best_of(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def test_image(w, h, seed=0):
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    return np.clip(0.5 + 0.3 * np.sin(6 * xx) * np.cos(4 * yy) + 0.02 * rng.standard_normal((h, w)), 0, 1)


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--width", type=int, default=1080)
    ap.add_argument("--height", type=int, default=720)
    ap.add_argument("--radii", default="5,13,25")
    ap.add_argument("--repeats", type=int, default=3)
    ap.add_argument("--inference", action="store_true")
    ap.add_argument("--ckpt")
    args = ap.parse_args()

    img = test_image(args.width, args.height)
    print(f"{'k':>3} {'exact s':>9} {'s=2 s':>9} {'s=4 s':>9} {'dev s=2':>9}")
    for k in (int(r) for r in args.radii.split(",")):
        ps = {s: GuidedFilterParams(k, 0.1, s) for s in (1, 2, 4)}
        times = {s: best_of(lambda p=p: guided_filter(img, img, p), args.repeats) for s, p in ps.items()}
        dev = np.abs(guided_filter(img, img, ps[1]) - guided_filter(img, img, ps[2])).mean()
        print(f"{k:>3} {times[1]:9.4f} {times[2]:9.4f} {times[4]:9.4f} {dev:9.2e}")

    if args.inference:
        if args.ckpt:
            params, net = load_model(args.ckpt)
        else:
            net = NetworkConfig()
            params = init_params(net, dtype=np.float32)
        rgb = np.repeat(img[:, :, None], 3, axis=2)
        for fast in (False, True):
            _, timing, _ = restore_array(rgb, params, net, fast=fast)
            print(f"restore {'fast ' if fast else 'exact'} {args.width}x{args.height}: {timing}")


if __name__ == "__main__":
    main()
