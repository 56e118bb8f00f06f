"""``opreg`` command line: datagen, train, eval, compare, verify.

Exit codes: 0 success, 1 usage/config error, 2 data or layout error,
3 numerical failure.  Failures print one ``opreg-error`` line on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ._threads import limited_threads
from .checkpoint import load_checkpoint
from .config import Config, parse_config
from .configs import build_model, darcy_desk, darcy_full
from .darcy import generate_fields, lattice
from .data import assemble_dataset, read_dataset, split_indices, write_dataset
from .errors import ConfigError, DataFormatError, LayoutError, NumericalError, ShapeError
from .models import MODEL_KINDS
from .training import METHOD_NAMES, TrainConfig, compare, evaluate, metrics_csv, split_sizes, train
from .verify import run_all

log = logging.getLogger("opreg")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
N_TRAIN, N_TEST = 1000, 200


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value config file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("-v", "--verbose", action="store_true")


def _training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--dropout", type=float)
    p.add_argument("--pod-modes", dest="pod_modes", type=int)
    p.add_argument("--n-train", dest="n_train", type=int, default=N_TRAIN)
    p.add_argument("--n-test", dest="n_test", type=int, default=N_TEST)
    p.add_argument("--arch", choices=("desk", "full"), default="desk", help="network widths (default: desk)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="opreg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("datagen", help="generate a Darcy dataset (ONDS file)")
    _common(p)
    p.add_argument("--problem")
    p.add_argument("--resolution", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--mode", choices=("aligned", "unaligned"))
    p.add_argument("--grf-modes", dest="grf_modes", type=int)
    p.add_argument("--out")
    p.add_argument("--dump-fields", dest="dump_fields", help="directory for per-sample (x, y, value) CSVs")

    p = sub.add_parser("train", help="train one model")
    _common(p)
    _training_flags(p)
    p.add_argument("--model", choices=MODEL_KINDS)
    p.add_argument("--ckpt")
    p.add_argument("--metrics", help="per-epoch metrics CSV")

    p = sub.add_parser("eval", help="MSE of a checkpoint on a split")
    _common(p)
    p.add_argument("--data")
    p.add_argument("--ckpt")
    p.add_argument("--split", choices=("train", "test", "all"), default="test")
    p.add_argument("--n-train", dest="n_train", type=int)
    p.add_argument("--n-test", dest="n_test", type=int)
    p.add_argument("--out", help="append-free CSV with the result")

    p = sub.add_parser("compare", help="method comparison table")
    _common(p)
    _training_flags(p)
    p.add_argument("--models", default="deeponet,decoder,multi-decoder", help="comma-separated model kinds")
    p.add_argument("--out")

    p = sub.add_parser("verify", help="run the numerical self-checks")
    p.add_argument("--only", help="comma-separated subset of checks")
    p.add_argument("-v", "--verbose", action="store_true")
    return parser


def _resolve(args: argparse.Namespace) -> Config:
    base = parse_config(args.config) if getattr(args, "config", None) else Config()
    keys = set(Config.__dataclass_fields__)
    cfg = base.merged({k: v for k, v in vars(args).items() if k in keys})
    log.info("resolved config: %s", json.dumps(cfg.as_dict(), sort_keys=True))
    return cfg


def _need(value, flag: str):
    if value is None:
        raise UsageError(f"{flag} is required (flag or config key)")
    return value


def _train_config(cfg: Config, args, kind: str | None = None) -> TrainConfig:
    return TrainConfig(
        model=kind or cfg.model,
        lr=cfg.lr,
        epochs=cfg.epochs,
        batch=cfg.batch,
        seed=cfg.seed,
        dropout=cfg.dropout,
        pod_modes=cfg.pod_modes,
        n_train=args.n_train,
        n_test=args.n_test,
        data=cfg.data,
        ckpt=cfg.ckpt,
    )


def _architecture(arch: str):
    builder = darcy_full if arch == "full" else darcy_desk
    return lambda kind, data, tc: builder(kind, data.resolution, pod_modes=tc.pod_modes)


# ---------------------------------------------------------------- subcommands


def cmd_datagen(args) -> int:
    cfg = _resolve(args)
    out = _need(cfg.out, "--out")
    fields = generate_fields(cfg.resolution, cfg.samples, cfg.seed, grf_modes=cfg.grf_modes)
    n_train, n_test = split_sizes(cfg.samples, N_TRAIN, N_TEST) if cfg.samples >= 2 else (cfg.samples, 0)
    mean_rows = split_indices(cfg.samples, n_train, n_test, cfg.seed)[0] if cfg.samples >= 2 else [0]
    ds = assemble_dataset(fields, cfg.mode, seed=cfg.seed, mean_rows=mean_rows)
    write_dataset(ds, out)
    s = ds.shapes()
    log.info("wrote %s: N=%d k=%d K=%d d=%d", out, ds.n_samples, ds.n_sensors, ds.n_points, ds.dim)
    print(f"{out}: function {list(s['function'])} grid {list(s['grid'])} output {list(s['output'])}")
    if args.dump_fields:
        _dump_fields(Path(args.dump_fields), fields)
    return EXIT_OK


def _dump_fields(folder: Path, fields) -> None:
    folder.mkdir(parents=True, exist_ok=True)
    pts = lattice(fields[0].resolution)
    for i, f in enumerate(fields):
        for name, arr in (("k", f.k), ("h", f.h)):
            with open(folder / f"sample{i:05d}_{name}.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(("x", "y", "value"))
                for (x, y), v in zip(pts, arr.reshape(-1)):
                    w.writerow((repr(float(x)), repr(float(y)), repr(float(v))))


def cmd_train(args) -> int:
    cfg = _resolve(args)
    data = read_dataset(_need(cfg.data, "--data"))
    tc = _train_config(cfg, args)
    model = build_model(_architecture(args.arch)(tc.model, data, tc), seed=cfg.seed, dropout=cfg.dropout)
    _, history = train(model, data, tc)
    if args.metrics:
        Path(args.metrics).write_text(metrics_csv(history), encoding="utf-8")
    last = history[-1]
    print(f"{METHOD_NAMES[tc.model]} epochs={last.epoch} train_mse={last.train_mse!r} test_mse={last.test_mse!r}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _resolve(args)
    data = read_dataset(_need(cfg.data, "--data"))
    model = load_checkpoint(_need(cfg.ckpt, "--ckpt"))
    meta = model.meta
    tc = TrainConfig(
        model=model.kind,
        seed=args.seed if args.seed is not None else int(meta.get("seed", cfg.seed)),
        n_train=args.n_train or int(meta.get("n_train", N_TRAIN)),
        n_test=args.n_test or int(meta.get("n_test", N_TEST)),
    )
    mse = evaluate(model, data, args.split, tc)
    print(repr(mse))
    if cfg.out:
        with open(cfg.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("method", "split", "mse"))
            w.writerow((METHOD_NAMES[model.kind], args.split, repr(mse)))
    return EXIT_OK


def cmd_compare(args) -> int:
    cfg = _resolve(args)
    paths = [p for p in _need(cfg.data, "--data").split(",") if p]
    kinds = [k.strip() for k in args.models.split(",") if k.strip()]
    for k in kinds:
        if k not in MODEL_KINDS:
            raise UsageError(f"unknown model kind {k!r} in --models")
    text = compare(paths, kinds, _train_config(cfg, args, kind=kinds[0] if kinds else None), out=cfg.out, architecture=_architecture(args.arch))
    sys.stdout.write(text)
    return EXIT_OK


def cmd_verify(args) -> int:
    only = [s.strip() for s in args.only.split(",")] if args.only else None
    results = run_all(only, report=print)
    failed = [r.name for r in results if not r.passed]
    if not results:
        raise UsageError(f"no checks match --only {args.only!r}")
    if failed:
        raise NumericalError(f"{len(failed)} verification check(s) failed: {', '.join(failed)}")
    print(f"all {len(results)} checks passed")
    return EXIT_OK


COMMANDS = {"datagen": cmd_datagen, "train": cmd_train, "eval": cmd_eval, "compare": cmd_compare, "verify": cmd_verify}


def _fail(code: int, exc: BaseException) -> int:
    reason = " ".join(str(exc).split()) or type(exc).__name__
    print(f"opreg-error exit={code} type={type(exc).__name__} reason={reason}", file=sys.stderr)
    return code


def run(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(f"expected a subcommand: {' | '.join(COMMANDS)}")
        logging.basicConfig(
            level=logging.DEBUG if getattr(args, "verbose", False) else logging.INFO,
            format="%(levelname)s %(name)s: %(message)s",
            stream=sys.stderr,
            force=True,
        )
        with limited_threads():
            return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        return _fail(EXIT_USAGE, exc)
    except (LayoutError, ShapeError, DataFormatError, OSError) as exc:
        return _fail(EXIT_DATA, exc)
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return _fail(EXIT_NUMERICAL, exc)
    except ValueError as exc:  # e.g. a malformed OPREG_THREADS
        return _fail(EXIT_USAGE, exc)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
