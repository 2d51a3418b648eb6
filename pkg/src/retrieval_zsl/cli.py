"""File-based command line: synth -> train -> calibrate -> eval, plus sweep and gradcheck.

Exit codes: 0 success, 1 I/O, 2 validation, 3 numerics, 4 check failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

from . import __version__
from .embedding_model import METRICS, load_checkpoint, save_checkpoint
from .errors import (ArgumentError, DataError, EmptyClassError, FormatError, IoError,
                     NumericsError, ShapeError, SplitError)
from .evaluation import alpha_sweep, evaluate, mixing_sweep, parse_grid, write_report
from .feature_store import SynthConfig, load_bundle, load_split, save_bundle, save_split, synth_generate
from .trainer import TrainConfig, gradcheck, gradcheck_fixture, train

EXIT_OK, EXIT_IO, EXIT_USAGE, EXIT_NUMERICS, EXIT_CHECK = 0, 1, 2, 3, 4


class CheckFailed(Exception):
    pass


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("CLAREL_THREADS", "1")))
    except ValueError:
        return 1


def _unit_interval(text: str) -> float:
    value = float(text)
    if not 0.0 <= value <= 1.0:
        raise argparse.ArgumentTypeError(f"{text} is outside [0, 1]")
    return value


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"{text} must be >= 1")
    return value


def _nonneg_float(text: str) -> float:
    value = float(text)
    if not value >= 0:
        raise argparse.ArgumentTypeError(f"{text} must be >= 0")
    return value


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    p.add_argument("--lambda", dest="lam", type=_unit_interval, default=d.lam)
    p.add_argument("--kappa", type=_unit_interval, default=d.kappa)
    p.add_argument("--metric", choices=METRICS, default=d.metric)
    p.add_argument("--embed-dim", type=_positive_int, default=d.embed_dim)
    p.add_argument("--batch-size", type=_positive_int, default=d.batch_size)
    p.add_argument("--steps", type=int, default=d.steps)
    p.add_argument("--lr", type=float, default=d.lr)
    p.add_argument("--lr-decay-every", type=_positive_int, default=d.lr_decay_every)
    p.add_argument("--lr-decay-factor", type=float, default=d.lr_decay_factor)
    p.add_argument("--seed", type=int, default=d.seed)


def _train_config(args) -> TrainConfig:
    return TrainConfig(batch_size=args.batch_size, steps=args.steps, lr=args.lr,
                       lr_decay_factor=args.lr_decay_factor, lr_decay_every=args.lr_decay_every,
                       lam=args.lam, kappa=args.kappa, metric=args.metric,
                       embed_dim=args.embed_dim, seed=args.seed)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="retrieval-zsl", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic two-modality bundle and split")
    d = SynthConfig()
    p.add_argument("--seen", type=_positive_int, default=d.num_seen)
    p.add_argument("--unseen", type=_positive_int, default=d.num_unseen)
    p.add_argument("--per-class", type=_positive_int, default=d.instances_per_class)
    p.add_argument("--dv", type=_positive_int, default=d.Dv)
    p.add_argument("--dt", type=_positive_int, default=d.Dt)
    p.add_argument("--descriptions", "-T", type=_positive_int, default=d.T)
    p.add_argument("--latent-dim", type=_positive_int, default=d.latent_dim)
    p.add_argument("--sigma", type=_nonneg_float, default=d.noise_sigma)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--format", choices=("binary", "csv"), default="binary")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("train", help="train projection heads with SGD")
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("--split", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    _add_train_flags(p)

    p = sub.add_parser("calibrate", help="choose alpha by maximising H on validation")
    _add_eval_inputs(p)
    p.add_argument("--grid", default="0:4:0.05")

    p = sub.add_parser("eval", help="GZSL (or ZSL) report on the test lists")
    _add_eval_inputs(p)
    p.add_argument("--alpha", type=_nonneg_float, default=None)
    p.add_argument("--calibration", type=Path, default=None,
                   help="calibration.json from `calibrate`; used when --alpha is absent")
    p.add_argument("--zsl", action="store_true", help="unseen-only prototype table")
    p.add_argument("--per-sample", action="store_true",
                   help="average accuracy over samples instead of classes")

    p = sub.add_parser("sweep", help="sweep alpha, lambda or kappa")
    p.add_argument("--param", required=True)
    p.add_argument("--grid", default=None)
    p.add_argument("--repeats", type=_positive_int, default=10)
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("--split", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, default=None, help="required for --param alpha")
    p.add_argument("--out", type=Path, required=True)
    _add_train_flags(p)

    p = sub.add_parser("gradcheck", help="compare backward() with central differences")
    p.add_argument("--batch-size", type=_positive_int, default=4)
    p.add_argument("--embed-dim", type=_positive_int, default=8)
    p.add_argument("--dv", type=_positive_int, default=6)
    p.add_argument("--dt", type=_positive_int, default=5)
    p.add_argument("--classes", type=_positive_int, default=3)
    p.add_argument("--descriptions", "-T", type=_positive_int, default=2)
    p.add_argument("--lambda", dest="lam", type=_unit_interval, default=0.5)
    p.add_argument("--kappa", type=_unit_interval, default=0.5)
    p.add_argument("--metric", choices=METRICS, default="sqeuclid")
    p.add_argument("--h", type=float, default=1e-4)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--perturb", type=float, default=0.0, help=argparse.SUPPRESS)
    return parser


def _add_eval_inputs(p: argparse.ArgumentParser) -> None:
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--bundle", type=Path, required=True)
    p.add_argument("--split", type=Path, required=True)
    p.add_argument("--metric", choices=METRICS, default="sqeuclid")
    p.add_argument("--out", type=Path, required=True)


def _require_files(*paths: Path) -> None:
    for path in paths:
        if path is not None and not path.is_file():
            raise IoError(f"missing input file: {path}")


def _load_inputs(args):
    _require_files(args.bundle, args.split)
    bundle = load_bundle(args.bundle, "csv" if args.bundle.suffix == ".csv" else "binary")
    split = load_split(args.split)
    split.validate(bundle)
    return bundle, split


# --- commands ---------------------------------------------------------------

def cmd_synth(args) -> dict:
    config = SynthConfig(args.seen, args.unseen, args.per_class, args.dv, args.dt,
                         args.descriptions, args.latent_dim, args.sigma, args.seed)
    bundle, split = synth_generate(config)
    ext = "cmf" if args.format == "binary" else "csv"
    bundle_path = args.out / f"bundle.{ext}"
    split_path = args.out / "split.json"
    save_bundle(bundle, bundle_path, args.format)
    save_split(split, split_path)
    print(f"wrote {bundle.n} instances to {bundle_path}")
    return {"config": asdict(config), "outputs": [str(bundle_path), str(split_path)], "seed": args.seed}


def cmd_train(args) -> dict:
    config = _train_config(args)
    bundle, split = _load_inputs(args)
    params, log = train(bundle, split, config)
    ckpt = args.out / "checkpoint.cmp"
    log_path = args.out / "train_log.csv"
    save_checkpoint(params, ckpt)
    log.write_csv(log_path)
    totals = log.totals()
    if totals:
        print(f"total loss {totals[0]:.4f} -> {totals[-1]:.4f} over {len(totals)} steps")
    return {"config": asdict(config), "inputs": [str(args.bundle), str(args.split)],
            "outputs": [str(ckpt), str(log_path)], "seed": config.seed}


def _alpha_sweep_files(args, grid, prefix):
    _require_files(args.checkpoint)
    params = load_checkpoint(args.checkpoint)
    bundle, split = _load_inputs(args)
    result = alpha_sweep(params, bundle, split, grid, args.metric)
    csv_path = args.out / f"{prefix}.csv"
    result.write_csv(csv_path)
    return result, csv_path


def cmd_calibrate(args) -> dict:
    grid = parse_grid(args.grid)
    result, csv_path = _alpha_sweep_files(args, grid, "alpha_sweep")
    best = result.best
    json_path = args.out / "calibration.json"
    json_path.write_text(json.dumps({"alpha": best.value, "H": best.H, "u": best.u, "s": best.s,
                                     "grid": args.grid, "metric": args.metric},
                                    indent=2, sort_keys=True) + "\n")
    print(f"alpha*={best.value} H={best.H:.4f}")
    return {"config": {"grid": args.grid, "metric": args.metric},
            "inputs": [str(args.checkpoint), str(args.bundle), str(args.split)],
            "outputs": [str(csv_path), str(json_path)]}


def cmd_eval(args) -> dict:
    alpha = args.alpha
    if alpha is None:
        if args.calibration is None:
            alpha = 0.0
        else:
            _require_files(args.calibration)
            alpha = float(json.loads(args.calibration.read_text())["alpha"])
    _require_files(args.checkpoint)
    params = load_checkpoint(args.checkpoint)
    bundle, split = _load_inputs(args)
    report = evaluate(params, bundle, split, alpha=alpha, metric=args.metric, subset="test",
                      per_class_average=not args.per_sample, zsl=args.zsl)
    json_path, csv_path = args.out / "report.json", args.out / "report.csv"
    write_report(report, json_path, csv_path)
    fmt = lambda v: "NA" if v is None else f"{v:.4f}"
    print(f"u={fmt(report.u)} s={fmt(report.s)} H={fmt(report.H)} alpha={alpha}")
    return {"config": {"alpha": alpha, "zsl": args.zsl, "metric": args.metric,
                       "per_sample": args.per_sample},
            "inputs": [str(args.checkpoint), str(args.bundle), str(args.split)],
            "outputs": [str(json_path), str(csv_path)]}


def cmd_sweep(args) -> dict:
    if args.param not in ("alpha", "lambda", "kappa"):
        raise ArgumentError(f"unknown sweep parameter {args.param!r}; use alpha, lambda or kappa")
    if args.param == "alpha":
        if args.checkpoint is None:
            raise ArgumentError("--param alpha needs --checkpoint")
        grid = parse_grid(args.grid or "0:4:0.05")
        result, csv_path = _alpha_sweep_files(args, grid, "sweep")
        config = {"param": "alpha", "grid": args.grid or "0:4:0.05", "metric": args.metric}
    else:
        grid = parse_grid(args.grid or "0:1:0.1")
        base = _train_config(args)
        bundle, split = _load_inputs(args)
        result = mixing_sweep(bundle, split, args.param, grid, base, repeats=args.repeats,
                              workers=_threads())
        csv_path = args.out / "sweep.csv"
        result.write_csv(csv_path)
        config = {"param": args.param, "grid": grid, "repeats": args.repeats,
                  "base_config": asdict(base)}
    json_path = args.out / "sweep.json"
    json_path.write_text(json.dumps(result.to_json(), indent=2, sort_keys=True) + "\n")
    print(f"best {args.param}={result.best.value} H={result.best.H}")
    return {"config": config, "inputs": [str(args.bundle), str(args.split)],
            "outputs": [str(csv_path), str(json_path)], "seed": args.seed}


def cmd_gradcheck(args) -> dict:
    raw, params = gradcheck_fixture(args.batch_size, args.dv, args.dt, args.embed_dim,
                                    args.classes, args.descriptions, args.seed)
    result = gradcheck(raw, params, args.lam, args.kappa, args.metric, args.h, args.tolerance,
                       perturb=args.perturb)
    for name, err in result.max_rel_error.items():
        flag = "ok" if err < result.tolerance else "FAIL"
        print(f"{name:3s} max_rel_err={err:.3e} {flag}")
    print("PASS" if result.passed else "FAIL")
    if not result.passed:
        raise CheckFailed("gradient check failed")
    return {}


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "calibrate": cmd_calibrate,
            "eval": cmd_eval, "sweep": cmd_sweep, "gradcheck": cmd_gradcheck}


def _write_manifest(out: Path, command: str, body: dict, started: float) -> None:
    manifest = {
        "command": command,
        "config": body.get("config"),
        "seed": body.get("seed"),
        "inputs": body.get("inputs", []),
        "outputs": body.get("outputs", []),
        "version": __version__,
        "started_at": time.strftime("%Y-%m-%dT%H:%M:%S%z", time.localtime(started)),
        "duration_s": round(time.time() - started, 3),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on malformed flags
    started = time.time()
    out = getattr(args, "out", None)
    try:
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        body = COMMANDS[args.command](args)
        if out is not None:
            _write_manifest(out, args.command, body, started)
        return EXIT_OK
    except CheckFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK
    except NumericsError as exc:
        print(f"numerics error: {exc}", file=sys.stderr)
        return EXIT_NUMERICS
    except (IoError, FormatError, DataError, OSError) as exc:
        print(f"io error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ArgumentError, ShapeError, SplitError, EmptyClassError, ValueError) as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
