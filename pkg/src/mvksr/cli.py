"""Command-line entry point: synth, decompose, train, restore, eval, gradcheck, bench."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np
from PIL import UnidentifiedImageError

from .checkpoint import CheckpointError
from .data import KINDS, DatasetConfig, ManifestError, build_dataset, load_manifest
from .freq import GuidedFilterParams, decompose_multiscale, encode_high, guided_filter, to_grayscale
from .imageio import atomic_write_text, read_image, write_image
from .physics import SamplingRanges

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC, EXIT_FORMAT = 0, 1, 2, 3, 4

log = logging.getLogger("mvksr")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _size(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WIDTHxHEIGHT, got {text!r}") from None


def _mode(text: str) -> str:
    # legacy alias for the complement mode
    mode = {"paper": "complement"}.get(text, text)
    if mode not in ("complement", "additive"):
        raise argparse.ArgumentTypeError(f"mode must be complement or additive, got {text!r}")
    return mode


def _kinds(text: str) -> tuple[str, ...]:
    kinds = tuple(k.strip() for k in text.split(",") if k.strip())
    bad = [k for k in kinds if k not in KINDS]
    if bad or not kinds:
        raise argparse.ArgumentTypeError(f"kinds must be a comma list drawn from {','.join(KINDS)}")
    return kinds


def read_config_file(path) -> dict[str, str]:
    """``key=value`` lines; ``#`` starts a comment. Keys use flag names (dashes or underscores)."""
    out = {}
    for raw in Path(path).read_text(encoding="utf-8").splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line without '=': {raw!r}")
        k, v = line.split("=", 1)
        out[k.strip().lstrip("-").replace("-", "_")] = v.strip()
    return out


def _apply_config(parser: argparse.ArgumentParser, args: argparse.Namespace) -> None:
    if not getattr(args, "config", None):
        return
    actions = {a.dest: a for a in parser._actions}
    for key, value in read_config_file(args.config).items():
        act = actions.get(key)
        if act is None or key in ("help", "config"):
            raise UsageError(f"unknown config key {key!r}")
        if act.nargs == 0:  # store_true / store_false
            truthy = value.lower() in ("1", "true", "yes", "on")
            setattr(args, key, truthy if act.const is True else not truthy)
        else:
            setattr(args, key, act.type(value) if act.type else value)


# ---------------------------------------------------------------- commands


def cmd_synth(args) -> int:
    ranges = SamplingRanges(fixed_beta=args.beta, fixed_A=args.atm_light)
    cfg = DatasetConfig(
        kinds=args.kinds,
        assignment=args.assignment,
        seed=args.seed,
        test_fraction=args.test_fraction,
        ranges=ranges,
    )
    m = build_dataset(args.clean, cfg, args.out)
    counts = m.kind_counts()
    print(f"wrote {len(m.records)} degraded images ({', '.join(f'{k}={v}' for k, v in counts.items())}) to {args.out}")
    return EXIT_OK


def cmd_decompose(args) -> int:
    img = read_image(args.inp)
    gray = to_grayscale(img, args.coeffs)
    st = decompose_multiscale(gray, args.eps, args.mode, interpretation=args.interpretation, subsample=args.subsample)
    stem = Path(args.inp).stem
    out = Path(args.out)
    for k, lo, hi in zip(st.radii, st.lows, st.stored_highs()):
        write_image(out / f"{stem}_lo{k}.png", lo)
        write_image(out / f"{stem}_hi{k}.png", hi)
    print(f"wrote 6 layers for {stem} to {out} (mode={args.mode})")
    return EXIT_OK


def _train_config(args):
    from .net import NetworkConfig
    from .train import TrainConfig

    return TrainConfig(
        patch_size=args.patch_size,
        batch_size=args.batch_size,
        epochs=args.epochs,
        base_lr=args.lr,
        lr_step=args.lr_step,
        seed=args.seed,
        split=args.split,
        use_high_input=not args.no_high_input,
        use_low_input=not args.no_low_input,
        supervise_gray=not args.no_gray_sup,
        supervise_high=not args.no_high_sup,
        supervise_low=not args.no_low_sup,
        self_supervise=not args.no_self_sup,
        lambda1=args.lambda1,
        lambda2=args.lambda2,
        lambda_cs=args.lambda_cs,
        flips=not args.no_flips,
        checkpoint_every=args.checkpoint_every,
        dtype="float64" if args.float64 else "float32",
        net=NetworkConfig(blocks_per_level=args.blocks, seed=args.seed),
    )


def cmd_train(args) -> int:
    from .train import load_training, train_loop

    cfg = _train_config(args)
    manifest = load_manifest(args.manifest)
    resume = load_training(args.resume, np.dtype(cfg.dtype)) if args.resume else None
    log_path = Path(args.log) if args.log else Path(str(args.out) + ".log")
    lines: list[str] = []
    if resume is not None and log_path.exists():
        lines = [ln for ln in log_path.read_text(encoding="utf-8").splitlines() if ln][: resume.epoch]

    def on_epoch(line):
        lines.append(line)
        print(line, flush=True)
        atomic_write_text(log_path, "\n".join(lines) + "\n")

    train_loop(manifest, cfg, args.out, resume=resume, on_epoch=on_epoch)
    print(f"checkpoint: {args.out}")
    return EXIT_OK


def cmd_restore(args) -> int:
    from .train import restore_image

    if not Path(args.ckpt).is_file():
        raise FileNotFoundError(f"checkpoint not found: {args.ckpt}")
    _, timing = restore_image(args.ckpt, args.inp, args.out, fast=args.fast)
    print(f"restored {args.inp} -> {args.out} ({timing})")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import eval_batch
    from .net import ViewOptions
    from .train import evaluate_dataset, load_model

    if args.restored or args.gt:
        if not (args.restored and args.gt):
            raise UsageError("eval: --restored and --gt go together")
        rep = eval_batch(args.restored, args.gt)
        print(rep.table())
        lines = rep.records()
    else:
        if not (args.ckpt and args.manifest):
            raise UsageError("eval: need --ckpt and --manifest (or --restored and --gt)")
        params, net = load_model(args.ckpt)
        opts = ViewOptions(use_high=not args.no_high_input, use_low=not args.no_low_input)
        ev = evaluate_dataset(params, load_manifest(args.manifest), args.split, net, opts)
        print(ev.summary())
        lines = ev.records()
    if args.report:
        atomic_write_text(args.report, "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import SUITES, run_suite

    suites = args.suites.split(",") if args.suites else list(SUITES)
    results = run_suite(args.tol, args.seed, suites, log_fn=print)
    worst = max(r.report.max_rel_err for r in results)
    failed = [r.name for r in results if not r.report.passed]
    print(f"worst rel. err = {worst:.3e} (tol {args.tol:g}); {len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_NUMERIC


def _timeit(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def cmd_bench(args) -> int:
    w, h = args.size
    rng = np.random.default_rng(args.seed)
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    img = np.clip(0.5 + 0.3 * np.sin(6 * xx) * np.cos(4 * yy) + 0.02 * rng.standard_normal((h, w)), 0, 1)
    exact_p = GuidedFilterParams(args.k, 0.1, 1)
    fast_p = GuidedFilterParams(args.k, 0.1, args.subsample)
    te = _timeit(lambda: guided_filter(img, img, exact_p), args.repeats)
    tf = _timeit(lambda: guided_filter(img, img, fast_p), args.repeats)
    dev = float(np.abs(guided_filter(img, img, exact_p) - guided_filter(img, img, fast_p)).mean())
    print(f"guided filter {w}x{h} k={args.k}: exact={te:.4f}s fast(s={args.subsample})={tf:.4f}s speedup={te / tf:.2f}x mean_abs_dev={dev:.2e}")
    if args.inference:
        from .net import NetworkConfig, init_params
        from .train import load_model, restore_array

        if args.ckpt:
            params, net = load_model(args.ckpt)
        else:
            net = NetworkConfig()
            params = init_params(net, dtype=np.float32)
        rgb = np.repeat(img[:, :, None], 3, axis=2)
        for fast in (False, True):
            _, timing, _ = restore_array(rgb, params, net, fast=fast)
            print(f"inference {w}x{h} {'fast' if fast else 'exact'}: {timing}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mvksr", description="Multi-view haze/rain scene recovery toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log at INFO level")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--config", metavar="F", help="key=value file whose entries override flags")
        return sp

    s = add("synth", "Build a degraded corpus and manifest from a folder of clean images.")
    s.add_argument("--clean", required=True, help="folder of clean images")
    s.add_argument("--out", required=True, help="output folder (degraded/ and manifest.txt)")
    s.add_argument("--kinds", type=_kinds, default=KINDS, help="comma list of haze,rain,mixed")
    s.add_argument("--assignment", choices=("all", "cycle", "one"), default="all", help="one image per kind per clean image (all), rotate kinds (cycle), or draw one kind (one)")
    s.add_argument("--seed", type=int, default=0, help="corpus seed")
    s.add_argument("--beta", type=float, default=None, help="fixed scattering coefficient instead of sampling")
    s.add_argument("--atm-light", type=float, default=None, help="fixed atmospheric light instead of sampling")
    s.add_argument("--test-fraction", type=float, default=0.2, help="held-out fraction")
    s.set_defaults(func=cmd_synth)

    d = add("decompose", "Write the six low/high frequency layers of an image.")
    d.add_argument("--in", dest="inp", required=True, help="input image")
    d.add_argument("--out", required=True, help="output folder")
    d.add_argument("--mode", type=_mode, default="additive", help="complement (high = 1 - low) or additive (high = gray - low, stored as h/2 + 0.5)")
    d.add_argument("--eps", type=float, default=0.1, help="guided filter regularizer")
    d.add_argument("--coeffs", choices=("red229", "standard"), default="red229", help="grayscale weights: red 0.229 or Rec. 601 (0.299)")
    d.add_argument("--interpretation", choices=("radius", "diameter"), default="radius", help="meaning of the window sizes 5/13/25")
    d.add_argument("--subsample", type=int, choices=(1, 2, 4), default=1, help="fast guided filter factor")
    d.set_defaults(func=cmd_decompose)

    t = add("train", "Train a model on a manifest.")
    t.add_argument("--manifest", required=True, help="dataset manifest")
    t.add_argument("--out", required=True, help="checkpoint path (optimizer state goes to <out>.state)")
    t.add_argument("--epochs", type=int, default=90)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--batch-size", type=int, default=4)
    t.add_argument("--patch-size", type=int, default=64)
    t.add_argument("--lr", type=float, default=1e-3, help="initial learning rate")
    t.add_argument("--lr-step", type=int, default=30, help="epochs between tenfold LR decays")
    t.add_argument("--split", default="train", help="train, test or all")
    t.add_argument("--blocks", type=int, default=2, help="residual blocks per en-decoder level")
    t.add_argument("--lambda1", type=float, default=0.8, help="MS-SSIM weight")
    t.add_argument("--lambda2", type=float, default=0.2, help="contrastive weight")
    t.add_argument("--lambda-cs", type=float, default=1.0, help="cross-supervision weight")
    t.add_argument("--no-high-input", action="store_true", help="zero the high-frequency input views")
    t.add_argument("--no-low-input", action="store_true", help="zero the low-frequency input views")
    t.add_argument("--no-gray-sup", action="store_true", help="drop the grayscale supervision term")
    t.add_argument("--no-high-sup", action="store_true", help="drop the high-frequency supervision term")
    t.add_argument("--no-low-sup", action="store_true", help="drop the low-frequency supervision term")
    t.add_argument("--no-self-sup", action="store_true", help="drop the gray = high + low consistency term")
    t.add_argument("--no-flips", action="store_true", help="disable horizontal flip augmentation")
    t.add_argument("--checkpoint-every", type=int, default=10)
    t.add_argument("--float64", action="store_true", help="train in 64-bit precision")
    t.add_argument("--resume", metavar="CKPT", help="continue from a checkpoint written by train")
    t.add_argument("--log", help="training log path (default <out>.log)")
    t.set_defaults(func=cmd_train)

    r = add("restore", "Restore one image with a trained checkpoint.")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--in", dest="inp", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--fast", action="store_true", help="use the subsampled guided filter")
    r.set_defaults(func=cmd_restore)

    e = add("eval", "PSNR/SSIM of a checkpoint on a manifest split, or of two image folders.")
    e.add_argument("--ckpt")
    e.add_argument("--manifest")
    e.add_argument("--split", default="test")
    e.add_argument("--report", help="write key=value records here")
    e.add_argument("--restored", help="folder of restored images (folder mode)")
    e.add_argument("--gt", help="folder of ground-truth images (folder mode)")
    e.add_argument("--no-high-input", action="store_true", help="model was trained without high-frequency views")
    e.add_argument("--no-low-input", action="store_true", help="model was trained without low-frequency views")
    e.set_defaults(func=cmd_eval)

    g = add("gradcheck", "Run the finite-difference gradient suite.")
    g.add_argument("--tol", type=float, default=1e-4)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--suites", help="comma list from ops,blocks,losses,model (default all)")
    g.set_defaults(func=cmd_gradcheck)

    b = add("bench", "Time exact vs fast guided filtering and full inference.")
    b.add_argument("--size", type=_size, default=(1080, 720), help="WIDTHxHEIGHT")
    b.add_argument("--k", type=int, default=25, help="window radius")
    b.add_argument("--subsample", type=int, choices=(2, 4), default=2)
    b.add_argument("--repeats", type=int, default=3)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--inference", action="store_true", help="also time a full forward pass")
    b.add_argument("--ckpt", help="checkpoint for --inference (random init otherwise)")
    b.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        sp = parser._subparsers._group_actions[0].choices[args.command]
        _apply_config(sp, args)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
        return args.func(args)
    except SystemExit as e:  # --help
        return int(e.code or 0)
    except UsageError as e:
        print(e, file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, ManifestError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FORMAT
    except (FileNotFoundError, IsADirectoryError, PermissionError, UnidentifiedImageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ArithmeticError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except RuntimeError as e:
        from .train import NumericalError

        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC if isinstance(e, NumericalError) else EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
