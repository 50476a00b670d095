"""Command-line interface: make-data, train, eval, sr, analyze, gradcheck.

Options resolve in this order: command-line flag, ``--config-file`` entry
(``key=value`` lines keyed by option name), ``--preset``, built-in default.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import analysis, checks
from .checkpoint import load_checkpoint
from .data import (list_images, load_pgm, load_split_pairs, mod_crop,
                   save_pgm, synth_scene, write_dataset)
from .model import LkformerConfig, LkraConfig
from .tensor import Rng
from .train import TrainConfig, ablation_configs, evaluate, mean_psnr, mean_ssim, super_resolve, train

log = logging.getLogger("lkformer")

MODEL_DEFAULTS = {
    "scale": 2, "channels": 48, "rtb": 6, "tl": 6, "kernels": "11,21,31",
    "local_pair": True, "inner_residual": True, "expansion": 2,
}
TRAIN_DEFAULTS = {
    "steps": 2000, "batch": 8, "patch": 32, "lr": 2e-4, "seed": 0,
    "checkpoint_interval": 0, "log_interval": 100, "val_images": 0,
}
PRESETS = {
    "default": {},
    "toy": {"channels": 16, "rtb": 2, "tl": 2, "scale": 2, "steps": 2000, "batch": 8, "patch": 32,
            "lr": 1e-3, "log_interval": 500},
}


class CliError(Exception):
    """User-facing failure: printed without a traceback, exit code 1."""


def parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_ints(text: str) -> tuple[int, ...]:
    """Comma-separated integers; ``-``, ``none`` or empty give ()."""
    text = text.strip()
    if text in ("", "-", "none"):
        return ()
    return tuple(int(k) for k in text.split(","))


def read_config_file(path) -> dict[str, str]:
    """``key=value`` lines; blank lines and ``#`` comments are skipped."""
    values: dict[str, str] = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read config file {path}: {exc.strerror}") from None
    for number, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise CliError(f"{path}:{number}: expected key=value, got {line!r}")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


# options whose file values need converting; everything else is a string
_CONVERTERS = {
    "scale": int, "channels": int, "rtb": int, "tl": int, "expansion": int,
    "local_pair": parse_bool, "inner_residual": parse_bool,
    "steps": int, "batch": int, "patch": int, "lr": float, "seed": int,
    "checkpoint_interval": int, "log_interval": int, "val_images": int,
    "height": int, "width": int,
}


def resolve(args: argparse.Namespace, keys: Sequence[str], defaults: dict) -> dict:
    """Merge flag values over the config file, the preset and ``defaults``."""
    file_values = read_config_file(args.config_file) if getattr(args, "config_file", None) else {}
    unknown = sorted(set(file_values) - set(keys))
    if unknown:
        raise CliError(f"unknown config-file keys: {', '.join(unknown)}")
    preset = PRESETS[getattr(args, "preset", None) or "default"]
    out = {}
    for key in keys:
        flag = getattr(args, key, None)
        if flag is not None:
            out[key] = flag
        elif key in file_values:
            try:
                out[key] = _CONVERTERS.get(key, str)(file_values[key])
            except ValueError as exc:
                raise CliError(f"config file entry {key}: {exc}") from None
        elif key in preset:
            out[key] = preset[key]
        else:
            out[key] = defaults.get(key)
    return out


def model_config(values: dict) -> LkformerConfig:
    try:
        lkra = LkraConfig(parse_ints(str(values["kernels"])), values["local_pair"],
                          values["inner_residual"])
        return LkformerConfig(channels=values["channels"], rtb_count=values["rtb"],
                              tl_count=values["tl"], scale=values["scale"], lkra=lkra,
                              gpfn_expansion=values["expansion"])
    except ValueError as exc:
        raise CliError(f"invalid model configuration: {exc}") from None


def _add_model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--scale", type=int, choices=(2, 4))
    g.add_argument("--channels", type=int, help="embedding width C (default 48)")
    g.add_argument("--rtb", type=int, help="number of residual transformer blocks N (default 6)")
    g.add_argument("--tl", type=int, help="transformer layers per block n (default 6)")
    g.add_argument("--kernels", help="comma-separated large-kernel sizes (default 11,21,31; '-' for none)")
    g.add_argument("--local-pair", dest="local_pair", action=argparse.BooleanOptionalAction,
                   default=None, help="keep the 7x1/1x7 local pair (default on)")
    g.add_argument("--inner-residual", dest="inner_residual", action=argparse.BooleanOptionalAction,
                   default=None, help="residual connection inside each large-kernel block (default on)")
    g.add_argument("--expansion", type=int, help="feed-forward expansion factor (default 2)")


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config-file", help="key=value overrides; command-line flags take precedence")
    p.add_argument("--preset", choices=sorted(PRESETS), help="named starting configuration")


# -- subcommands ----------------------------------------------------------------

def cmd_make_data(args) -> int:
    scales = parse_ints(args.scales)
    if not scales or any(s not in (2, 4) for s in scales):
        raise CliError(f"--scales must list 2 and/or 4, got {args.scales!r}")
    rng = Rng(args.seed)
    modulus = int(np.lcm.reduce(scales))
    if args.hr_dir:
        files = list_images(args.hr_dir)
        if not files:
            raise CliError(f"no .pgm images in {args.hr_dir}")
        images = [mod_crop(load_pgm(f), modulus) for f in files]
        names = [f.name for f in files]
    else:
        if args.count < 1 or args.size < modulus:
            raise CliError("--count must be >= 1 and --size at least the largest scale")
        size = args.size - args.size % modulus
        images = [synth_scene(rng.derive(0, i), size, size) for i in range(args.count)]
        names = None
    train_names, test_names = write_dataset(args.out, images, scales, rng.derive(1), args.train_fraction,
                                              names=names)
    print(f"wrote {len(images)} images to {args.out}: {len(train_names)} train, {len(test_names)} test, "
          f"scales {','.join(str(s) for s in scales)}")
    return 0


def cmd_train(args) -> int:
    values = resolve(args, list(MODEL_DEFAULTS) + list(TRAIN_DEFAULTS) + ["data", "out"],
                     {**MODEL_DEFAULTS, **TRAIN_DEFAULTS})
    if not values["data"] or not values["out"]:
        raise CliError("train needs --data and --out")
    cfg = model_config(values)
    try:
        tcfg = TrainConfig(lr=values["lr"], batch_size=values["batch"], patch_size=values["patch"],
                           steps=values["steps"], seed=values["seed"],
                           checkpoint_interval=values["checkpoint_interval"],
                           log_interval=values["log_interval"], val_images=values["val_images"])
    except ValueError as exc:
        raise CliError(str(exc)) from None
    train_pairs = load_split_pairs(values["data"], cfg.scale, "train")
    val_pairs = load_split_pairs(values["data"], cfg.scale, "test")
    result = train(tcfg, cfg, train_pairs, val_pairs, out_dir=values["out"], resume=args.resume)
    step, loss, val_psnr = result.log[-1]
    print(f"trained {step} steps: loss {loss:.5f}, val PSNR {val_psnr:.3f} dB; "
          f"checkpoint {Path(values['out']) / 'final.lkf'}")
    return 0


def cmd_eval(args) -> int:
    cfg = params = None
    if args.checkpoint:
        cfg, params = load_checkpoint(args.checkpoint)
    scale = cfg.scale if cfg is not None else args.scale
    methods = [("Bicubic", None, None)]
    if params is not None:
        methods.append(("LKFormer", cfg, params))
    names = [Path(d).name or str(d) for d in args.data]
    pairs = [load_split_pairs(d, scale, args.split) for d in args.data]
    cells = {}
    records = []
    for label, mcfg, mparams in methods:
        for name, ds in zip(names, pairs):
            rows = evaluate(ds, mcfg, mparams, with_ssim=True)
            cells[label, name] = (mean_psnr(rows), mean_ssim(rows))
            records += [(label, name, r.name, r.psnr, r.ssim) for r in rows]
    width = max(len(m[0]) for m in methods) + 2
    head = f"{'Method':<{width}}{'Scale':>6}" + "".join(f"{n:>20}" for n in names)
    print(head)
    for label, _, _ in methods:
        line = f"{label:<{width}}{'x' + str(scale):>6}"
        for name in names:
            p, s = cells[label, name]
            line += f"{p:>11.2f}/{s:.4f}"
        print(line)
    if args.per_image:
        for label, name, image, p, s in records:
            print(f"{label} {name}/{image} psnr {p:.4f} ssim {s:.6f}")
    if args.csv:
        with open(args.csv, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["method", "dataset", "image", "scale", "psnr", "ssim"])
            for label, name, image, p, s in records:
                writer.writerow([label, name, image, scale, repr(p), repr(s)])
    return 0


def cmd_sr(args) -> int:
    cfg, params = load_checkpoint(args.checkpoint)
    lr = load_pgm(args.input)
    if min(lr.shape) < 8:
        raise CliError(f"input {lr.shape} is below the 8x8 minimum")
    sr = super_resolve(lr, cfg, params)
    save_pgm(args.output, sr)
    print(f"{args.input} {lr.shape[1]}x{lr.shape[0]} -> {args.output} {sr.shape[1]}x{sr.shape[0]}")
    return 0


def cmd_analyze(args) -> int:
    values = resolve(args, list(MODEL_DEFAULTS) + ["height", "width"],
                     {**MODEL_DEFAULTS, "height": 64, "width": 64})
    base = model_config(values)
    h, w = values["height"], values["width"]
    if h < 1 or w < 1:
        raise CliError("--height and --width must be positive")
    if args.ablation:
        configs = ablation_configs(base)
        reports = [analysis.analyze(c, h, w) for c in configs.values()]
        labels = list(configs)
    else:
        reports = [analysis.analyze(base, h, w)]
        labels = ["config"]
    if args.csv:
        lines = analysis.format_csv(reports).splitlines()
        print("row," + lines[0])
        for label, line in zip(labels, lines[1:]):
            print(f"{label},{line}")
        return 0
    for label, line in zip(["row"] + labels, analysis.format_table(reports).splitlines()):
        print(f"{label:<16}{line}")
    if not args.ablation:
        r = reports[0]
        print(f"\nparams {r.params}  FLOPs {r.flops}  omega_msa {r.omega_msa}  "
              f"omega_lkra {r.omega_lkra}  crossover hw {r.crossover_hw}")
    return 0


def cmd_gradcheck(args) -> int:
    failed = 0
    total = 0
    for case in checks.suite(args.config, args.seed):
        report = case.run()
        total += 1
        failed += not report.passed
        print(report.table(f"[{'PASS' if report.passed else 'FAIL'}] {case.name}"))
        print()
    print(f"{total - failed}/{total} gradient checks passed (max relative error < 1e-4)")
    return 0 if failed == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lkformer", description=__doc__.splitlines()[0])
    parser.add_argument("-q", "--quiet", action="store_true", help="only print results")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-data", help="write a synthetic (or converted) LR/HR dataset")
    p.add_argument("--out", required=True, help="dataset root to create")
    p.add_argument("--count", type=int, default=200, help="synthetic scenes (default 200)")
    p.add_argument("--size", type=int, default=64, help="synthetic HR side length (default 64)")
    p.add_argument("--scales", default="2,4", help="LR scales to derive (default 2,4)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--train-fraction", type=float, default=0.8)
    p.add_argument("--hr-dir", help="use these .pgm images instead of synthetic scenes")
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("train", help="L1 + Adam training")
    p.add_argument("--data", help="dataset root written by make-data")
    p.add_argument("--out", help="output directory for checkpoints and train_log.csv")
    p.add_argument("--resume", help="checkpoint to continue from")
    _add_config_flags(p)
    _add_model_flags(p)
    g = p.add_argument_group("optimization")
    g.add_argument("--steps", type=int)
    g.add_argument("--batch", type=int)
    g.add_argument("--patch", type=int, help="LR patch side length")
    g.add_argument("--lr", type=float)
    g.add_argument("--seed", type=int)
    g.add_argument("--checkpoint-interval", dest="checkpoint_interval", type=int)
    g.add_argument("--log-interval", dest="log_interval", type=int)
    g.add_argument("--val-images", dest="val_images", type=int)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="mean PSNR/SSIM per dataset, bicubic baseline included")
    p.add_argument("--checkpoint", help="model to score (omit for the bicubic row only)")
    p.add_argument("--data", action="append", required=True, help="dataset root; repeatable")
    p.add_argument("--split", default="test", choices=("train", "test"))
    p.add_argument("--scale", type=int, default=2, choices=(2, 4), help="scale when no checkpoint is given")
    p.add_argument("--per-image", dest="per_image", action="store_true", help="also print every image's scores")
    p.add_argument("--csv", help="write per-image scores to this CSV file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sr", help="super-resolve one PGM image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_sr)

    p = sub.add_parser("analyze", help="parameter, FLOP and attention-cost report")
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--csv", action="store_true")
    p.add_argument("--ablation", action="store_true", help="report every ablation row")
    _add_config_flags(p)
    _add_model_flags(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    p.add_argument("--config", default="toy", choices=checks.PRESETS)
    p.add_argument("--seed", type=int, default=checks.DEFAULT_SEED)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (CliError, ValueError, FloatingPointError, OSError) as exc:
        print(f"lkformer {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
