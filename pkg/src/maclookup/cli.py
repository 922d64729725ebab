"""Command-line entry point: ``maclookup <command> [options]``.

Exit codes: 0 success, 1 usage error, 2 data or file error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import config as config_io
from .autograd import NonFiniteError, precision
from .data import DatasetError, PpmError, dataset_from_root, read_ppm, synthesize_pairs, write_dataset, write_ppm
from .gradcheck import ALL_CASES, TOL, run_suite
from .lut import FitAbortedError, LutConfigError, export_cube, fit_lut
from .maae import MacLookup, enhance_array
from .train import (TrainConfig, TrainingError, evaluate_pairs, make_checkpoint, model_from_checkpoint,
                    train_run)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

logger = logging.getLogger("maclookup")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write_manifest(out_dir: Path, command: str, entries: dict, cfg=None) -> None:
    lines = [f"command = {command}"] + [f"{k} = {config_io.format_value(v)}" for k, v in entries.items()]
    text = "\n".join(lines) + "\n"
    if cfg is not None:
        text += "# resolved configuration\n" + config_io.dumps(cfg)
    (out_dir / "manifest.txt").write_text(text, encoding="utf-8")


def _ensure_dir(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DatasetError(f"cannot create output directory {path}: {exc}") from exc
    return path


# ---------------------------------------------------------------- train

def _resolve_train_config(args) -> TrainConfig:
    values = config_io.read_file(args.config) if args.config else {}
    flag_map = {
        "epochs": "epochs", "batch": "batch", "lr_init": "lr_init", "lr_min": "lr_min", "seed": "seed",
        "checkpoint_every": "checkpoint_every", "val_count": "val_count", "crop": "aug.crop",
    }
    for attr, key in flag_map.items():
        v = getattr(args, attr)
        if v is not None:
            values[key] = str(v)
    if args.no_cltcc:
        values["model.use_cltcc"] = "false"
    if args.no_maae:
        values["model.use_maae"] = "false"
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        values[k.strip()] = v.strip()
    cfg = config_io.apply(TrainConfig(), values)
    if not (cfg.model.use_cltcc or cfg.model.use_maae):
        raise UsageError("--no-cltcc and --no-maae together leave nothing to train")
    return cfg


def cmd_train(args) -> int:
    cfg = _resolve_train_config(args)
    dataset = dataset_from_root(args.data)
    out = _ensure_dir(Path(args.out))
    _write_manifest(out, "train", {"data": args.data, "out": args.out, "seed": cfg.seed}, cfg)
    resume = ckpt_io.load(args.resume) if args.resume else None

    def report(rec):
        logger.info("epoch %d/%d lr %.3g l_total %.5f val_psnr %.3f val_ssim %.4f",
                    rec.epoch + 1, cfg.epochs, rec.lr, rec.l_total, rec.val_psnr, rec.val_ssim)

    result = train_run(dataset, cfg, out_dir=out, resume=resume, on_epoch=report)
    if result.history:
        last = result.history[-1]
        print(f"trained {len(result.history)} epochs: l_total {last.l_total:.5f} "
              f"val_psnr {last.val_psnr:.3f} dB val_ssim {last.val_ssim:.4f}")
    print(f"checkpoint: {out / 'model.macl'}")
    return EXIT_OK


# ---------------------------------------------------------------- enhance / evaluate

def _load_model(args) -> MacLookup:
    ck = ckpt_io.load(args.model)
    try:
        return model_from_checkpoint(ck, use_cltcc=False if args.no_cltcc else None,
                                     use_maae=False if args.no_maae else None)
    except ValueError as exc:
        raise DatasetError(f"{args.model}: {exc}") from exc


def cmd_enhance(args) -> int:
    model = _load_model(args)
    src = Path(args.input)
    if src.is_dir():
        files = sorted(src.glob("*.ppm"))
        if not files:
            raise DatasetError(f"no .ppm files in {src}")
    elif src.is_file():
        files = [src]
    else:
        raise DatasetError(f"input not found: {src}")
    out = _ensure_dir(Path(args.out))
    for f in files:
        write_ppm(out / f.name, enhance_array(model, read_ppm(f)))
    _write_manifest(out, "enhance", {"model": args.model, "input": args.input, "out": args.out,
                                     "no_cltcc": args.no_cltcc, "no_maae": args.no_maae,
                                     "images": len(files)})
    print(f"enhanced {len(files)} image(s) into {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    model = _load_model(args)
    dataset = dataset_from_root(args.data)
    pairs = dataset.load()
    scores = evaluate_pairs(model, pairs, quantize=True)
    report = Path(args.report)
    if report.parent != Path(""):
        _ensure_dir(report.parent)
    mean_p = float(np.mean([s[0] for s in scores]))
    mean_s = float(np.mean([s[1] for s in scores]))
    try:
        with open(report, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["image", "psnr_db", "ssim"])
            for name, (p, s) in zip(dataset.names(), scores):
                w.writerow([name, f"{p:.6f}", f"{s:.6f}"])
            w.writerow(["mean", f"{mean_p:.6f}", f"{mean_s:.6f}"])
    except OSError as exc:
        raise DatasetError(f"cannot write report {report}: {exc}") from exc
    _write_manifest(report.parent if report.parent != Path("") else Path("."), "evaluate",
                    {"model": args.model, "data": args.data, "report": args.report,
                     "no_cltcc": args.no_cltcc, "no_maae": args.no_maae})
    for name, (p, s) in zip(dataset.names(), scores):
        print(f"{name:<24} {p:8.3f} dB  {s:.4f}")
    print(f"{'mean':<24} {mean_p:8.3f} dB  {mean_s:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- LUT tools

def cmd_fit_lut(args) -> int:
    values = config_io.read_file(args.config) if args.config else {}
    values["model.use_maae"] = "false"
    values["model.use_cltcc"] = "true"
    values["seed"] = str(args.seed)
    cfg = config_io.apply(TrainConfig(), values)
    pairs = dataset_from_root(args.data).load()
    rng = np.random.default_rng(cfg.seed)
    xs = np.concatenate([p[0].reshape(-1, 3) for p in pairs])
    ts = np.concatenate([p[1].reshape(-1, 3) for p in pairs])
    idx = rng.choice(len(xs), size=min(args.pixels, len(xs)), replace=False)
    with precision(cfg.precision):
        model = MacLookup(cfg.model, seed=cfg.seed)
        if model.lut.cond_dim:
            raise UsageError("fit-lut fits an unconditional LUT; set model.lut.cond_dim = 0")
        trace = fit_lut(model.lut, xs[idx], ts[idx], args.steps, lr=args.lr)
    ck = make_checkpoint(model, cfg, None, None, 0, [])
    ck.meta["lut_fit"] = {"steps": args.steps, "pixels": int(len(idx)), "final_l1": trace[-1]}
    out = Path(args.out)
    if out.parent != Path(""):
        _ensure_dir(out.parent)
    ckpt_io.save(out, ck)
    _write_manifest(out.parent if out.parent != Path("") else Path("."), "fit-lut",
                    {"data": args.data, "out": args.out, "steps": args.steps, "lr": args.lr,
                     "pixels": int(len(idx)), "seed": cfg.seed}, cfg)
    print(f"LUT fit: L1 {trace[0]:.5f} -> {trace[-1]:.5f} over {args.steps} steps; wrote {out}")
    return EXIT_OK


def cmd_export_lut(args) -> int:
    model = model_from_checkpoint(ckpt_io.load(args.model))
    if model.lut is None:
        raise DatasetError(f"{args.model} has no CLTCC component")
    cond = None
    if model.lut.cond_dim:
        cond = np.full(model.lut.cond_dim, 0.5) if args.cond is None else np.array(args.cond, dtype=float)
    export_cube(model.lut, args.size, cond=cond, path=args.out, title=args.title)
    print(f"wrote {args.size}^3 LUT to {args.out}")
    return EXIT_OK


# ---------------------------------------------------------------- gradcheck / synth

def cmd_gradcheck(args) -> int:
    if args.list:
        print("\n".join(ALL_CASES))
        return EXIT_OK
    print(f"tolerances: rel64 <= {TOL['float64']:g}, rel32 <= {TOL['float32']:g}")
    try:
        results = run_suite(args.op, instances=args.instances, log=print)
    except KeyError as exc:
        raise UsageError(str(exc.args[0])) from None
    failed = [r.name for r in results if not r.passed]
    if failed:
        print(f"FAILED: {', '.join(failed)}")
        return EXIT_NUMERIC
    print(f"all {len(results)} checks passed")
    return EXIT_OK


def cmd_synth(args) -> int:
    pairs = synthesize_pairs(args.count, args.size, args.seed)
    root = _ensure_dir(Path(args.out))
    names = write_dataset(root, pairs)
    _write_manifest(root, "synth", {"count": args.count, "size": args.size, "seed": args.seed})
    print(f"wrote {len(names)} synthetic pairs under {root}")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _ablation_flags(p) -> None:
    p.add_argument("--no-cltcc", action="store_true", help="bypass the LUT colour correction")
    p.add_argument("--no-maae", action="store_true", help="bypass the multi-stage refinement")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="maclookup", description="LUT colour correction plus multi-axis refinement "
                                                   "for underwater images.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    _add = sub.add_parser
    sub.add_parser = lambda name, **kw: _add(name, parents=[common], **kw)

    p = sub.add_parser("train", help="train a model on <root>/input and <root>/gt")
    p.add_argument("--data", required=True, help="dataset root holding input/ and gt/")
    p.add_argument("--config", help="key = value config file (flags override it)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, help="random seed")
    p.add_argument("--epochs", type=int, help="number of epochs")
    p.add_argument("--batch", type=int, help="pairs per optimizer step")
    p.add_argument("--lr-init", type=float, help="initial learning rate")
    p.add_argument("--lr-min", type=float, help="final learning rate")
    p.add_argument("--crop", type=int, help="random crop size for augmentation")
    p.add_argument("--val-count", type=int, help="hold out this many trailing pairs for validation")
    p.add_argument("--checkpoint-every", type=int, help="write a checkpoint every k epochs")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key")
    _ablation_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("enhance", help="enhance a PPM file or a directory of PPMs")
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--in", dest="input", required=True, help="input .ppm file or directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="accepted for reproducible scripting; inference is deterministic")
    _ablation_flags(p)
    p.set_defaults(func=cmd_enhance)

    p = sub.add_parser("evaluate", help="PSNR/SSIM report on a paired dataset")
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="dataset root holding input/ and gt/")
    p.add_argument("--report", required=True, help="CSV report path")
    p.add_argument("--seed", type=int, default=0, help="accepted for reproducible scripting; evaluation is deterministic")
    _ablation_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("fit-lut", help="fit the LUT network alone on dataset pixel pairs")
    p.add_argument("--data", required=True, help="dataset root holding input/ and gt/")
    p.add_argument("--out", required=True, help="checkpoint to write")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--steps", type=int, default=2000, help="Adam steps")
    p.add_argument("--lr", type=float, default=3e-2, help="initial step size (cosine decay to 1/100)")
    p.add_argument("--pixels", type=int, default=4096, help="number of sampled pixel pairs")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.set_defaults(func=cmd_fit_lut)

    p = sub.add_parser("export-lut", help="write the LUT of a checkpoint as a .cube file")
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--size", type=int, default=33, help="lattice points per axis")
    p.add_argument("--out", required=True, help=".cube file to write")
    p.add_argument("--title", help="TITLE line")
    p.add_argument("--cond", type=float, nargs="+", help="condition vector for conditional LUTs")
    p.set_defaults(func=cmd_export_lut)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--op", action="append", help="check only this case (repeatable)")
    p.add_argument("--instances", type=int, default=5, help="random instances per case")
    p.add_argument("--list", action="store_true", help="list case names and exit")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", help="write synthetic degraded/clean pairs as a dataset")
    p.add_argument("--out", required=True, help="dataset root to create")
    p.add_argument("--count", type=int, default=4, help="number of pairs")
    p.add_argument("--size", type=int, default=64, help="image side length")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command is None:
        parser.print_usage(sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"maclookup: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (config_io.ConfigError, LutConfigError) as exc:
        print(f"maclookup: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, PpmError, ckpt_io.FormatError, OSError) as exc:
        print(f"maclookup: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, NonFiniteError, FitAbortedError) as exc:
        print(f"maclookup: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
