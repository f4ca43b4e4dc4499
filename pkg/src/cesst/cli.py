"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
``CESST_THREADS`` pins the BLAS thread count for deterministic runs.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from contextlib import nullcontext
from pathlib import Path
from typing import Optional, Sequence

from .config import CesstConfig, ConfigError, load_config
from .data import DataError, Dataset, save_cube, write_synthetic_dataset
from .serialize import FormatError, load_tensor
from .tensor import NonFiniteError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, default=str))


def _manifest(path: str) -> Path:
    p = Path(path)
    if p.is_dir():
        p = p / "manifest.json"
    if not p.exists():
        raise DataError(f"dataset manifest not found: {p}")
    return p


def _model_config(path: Optional[str]) -> CesstConfig:
    if path is None:
        return CesstConfig().validate()
    try:
        return load_config(path)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def _train_config(args, steps: int):
    from .train import TrainConfig

    base = {}
    if args.train_config:
        try:
            base = json.loads(Path(args.train_config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read training config {args.train_config}: {exc}") from exc
        if not isinstance(base, dict):
            raise ConfigError("training config must be a JSON object")
    base["steps"] = steps
    for key in ("batch_size", "crop", "lr0", "lr_min", "checkpoint_every", "eval_every", "grad_clip", "seed"):
        v = getattr(args, key, None)
        if v is not None:
            base[key] = v
    if getattr(args, "no_augment", False):
        base["augment"] = False
    return TrainConfig.from_dict(base)


# ---------------------------------------------------------------- commands
def cmd_synth_data(args) -> int:
    if args.count < 1 or args.size < 16 or args.size % 16:
        raise ConfigError("--count must be >= 1 and --size a positive multiple of 16")
    manifest = write_synthetic_dataset(args.out, args.count, args.size, args.seed, with_rgb=args.with_rgb)
    _emit({"manifest": str(manifest), "count": args.count, "size": args.size, "seed": args.seed})
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import train

    cfg = _model_config(args.config)
    tcfg = _train_config(args, args.steps)
    ds = Dataset.from_manifest(_manifest(args.data), seed=tcfg.seed)
    heldout = Dataset.from_manifest(_manifest(args.heldout), seed=tcfg.seed) if args.heldout else None
    res = train(cfg, ds, tcfg, out_dir=args.out, resume=args.resume, stop_at=args.stop_at, heldout=heldout)
    last = res.record.steps[-1] if res.record.steps else {}
    _emit({"checkpoint": res.checkpoint, "step": res.step, "last": last})
    return EXIT_OK


def cmd_eval(args) -> int:
    from .train import evaluate, load_model

    model, _, _ = load_model(args.ckpt)
    ds = Dataset.from_manifest(_manifest(args.data))
    rep = evaluate(model, ds)
    report = Path(args.report)
    report.parent.mkdir(parents=True, exist_ok=True)
    report.write_text(rep.to_json())
    band_csv = report.with_suffix(".bands.csv")
    band_csv.write_text(rep.band_csv())
    _emit({"report": str(report), "bands_csv": str(band_csv), **rep.to_dict()})
    return EXIT_OK


def cmd_infer(args) -> int:
    from .model import cesst_infer
    from .train import load_model

    model, _, _ = load_model(args.ckpt)
    try:
        rgb = load_tensor(args.rgb)
    except OSError as exc:
        raise DataError(f"cannot read RGB tensor {args.rgb}: {exc}") from exc
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise DataError(f"RGB tensor must be [3, H, W], got {rgb.shape}")
    cube = cesst_infer(model, rgb)
    save_cube(args.out, cube)
    _emit({"out": args.out, "shape": list(cube.data.shape)})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_suite

    seeds = [int(s) for s in args.seeds.split(",")]
    results = run_suite(args.scope, seeds)
    failed = [r for r in results if not r.passed]
    _emit({"scope": args.scope, "checked": len(results), "failed": [r.__dict__ for r in failed],
           "max_rel_error": max(r.rel_error for r in results)})
    return EXIT_NUMERIC if failed else EXIT_OK


def cmd_ablate(args) -> int:
    from .model import ABLATION_ROWS
    from .train import ablation_csv, run_ablation

    rows = [r.strip() for r in args.rows.split(",") if r.strip()]
    unknown = [r for r in rows if r not in ABLATION_ROWS]
    if unknown or not rows:
        raise ConfigError(f"unknown ablation rows {unknown}; expected some of {sorted(ABLATION_ROWS)}")
    cfg = _model_config(args.config)
    tcfg = _train_config(args, args.budget)
    if args.data:
        ds = Dataset.from_manifest(_manifest(args.data), seed=tcfg.seed)
    else:
        ds = Dataset.synthetic(args.count, args.size, seed=tcfg.seed)
    table = run_ablation(rows, args.budget, cfg, ds, tcfg=tcfg)
    text = ablation_csv(table)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_bench(args) -> int:
    from .bench import bench_csv, bench_scaling

    variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    try:
        sizes = [int(s) for s in args.sizes.split(",")]
        rows, r2 = bench_scaling(variants, sizes, C=args.channels, heads=args.heads, M=args.window,
                                 repeats=args.repeats, batch=args.batch)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    text = bench_csv(rows, r2)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# ---------------------------------------------------------------- parser
def _add_train_opts(p) -> None:
    p.add_argument("--config", help="model config JSON (defaults to the toy config)")
    p.add_argument("--train-config", help="training config JSON (TrainConfig fields)")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--crop", type=int)
    p.add_argument("--lr", dest="lr0", type=float)
    p.add_argument("--lr-min", dest="lr_min", type=float)
    p.add_argument("--grad-clip", dest="grad_clip", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--no-augment", dest="no_augment", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="cesst", description="RGB to 31-band hyperspectral reconstruction")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth-data", help="write a deterministic synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--out", required=True)
    p.add_argument("--with-rgb", dest="with_rgb", action="store_true", help="also store RGB tensors")
    p.set_defaults(func=cmd_synth_data)

    p = sub.add_parser("train", help="train (or resume) a model")
    _add_train_opts(p)
    p.add_argument("--data", required=True, help="manifest JSON or dataset directory")
    p.add_argument("--steps", type=int, required=True, help="schedule horizon in steps")
    p.add_argument("--out", required=True)
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--stop-at", dest="stop_at", type=int, help="stop early at this step")
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--heldout", help="held-out manifest evaluated every --eval-every steps")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report", required=True, help="JSON report path; per-band CSV written alongside")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="reconstruct a cube from an RGB tensor file")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--rgb", required=True, help="TNSR tensor [3, H, W] in [0, 1]")
    p.add_argument("--out", required=True, help="output HSIC cube")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("gradcheck", help="finite-difference gradient checks (float64)")
    p.add_argument("--scope", choices=("ops", "blocks", "model"), default="ops")
    p.add_argument("--seeds", default="0,1,2")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train ablation variants under one budget")
    _add_train_opts(p)
    p.add_argument("--rows", required=True, help="comma-separated row ids")
    p.add_argument("--budget", type=int, required=True, help="training steps per row")
    p.add_argument("--data", help="manifest (default: synthetic scenes)")
    p.add_argument("--count", type=int, default=4)
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="MSA complexity benchmark")
    p.add_argument("--variants", default="window,shuffle_window,spectral")
    p.add_argument("--sizes", default="64,256,1024,4096", help="token counts, ascending")
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--window", type=int, default=4)
    p.add_argument("--repeats", type=int, default=5)
    p.add_argument("--batch", type=int, default=32, help="images per timed call")
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(func=cmd_bench)
    return ap


def _thread_limit():
    raw = os.environ.get("CESST_THREADS")
    if raw is None:
        return nullcontext()
    try:
        n = int(raw)
        if n < 1:
            raise ValueError
    except ValueError:
        raise ConfigError(f"CESST_THREADS must be a positive integer, got {raw!r}")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        with _thread_limit():
            return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FormatError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NonFiniteError, FloatingPointError) as exc:
        snap = getattr(exc, "snapshot", None)
        print(f"numerical failure: {exc}" + (f" (snapshot: {snap})" if snap else ""), file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
