"""Command-line entry point: ``dpsw gen|train|eval|ablate``.

Exit codes: 0 success, 1 configuration error, 2 data error, 3 numerical
abort. Log verbosity comes from ``DPSW_LOG_LEVEL`` (default WARNING).
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from ..datagen import gen_synthetic, load_csv, split, write_csv
from ..errors import (
    ConfigurationError,
    DataError,
    DegenerateFitError,
    InvalidInputError,
    InvalidParameterError,
    NumericalAbort,
    ShapeError,
)
from ..estimator import DPSWModel, Hyperparams, parse_mode, predict_cate, train
from .harness import run_experiment
from .metrics import attribution, pehe

log = logging.getLogger("dpsw")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
LOG_ENV = "DPSW_LOG_LEVEL"
TRAIN_KEYS = {"hyperparams", "mode", "seed", "split", "data"}


def _setup_logging():
    level = os.environ.get(LOG_ENV, "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None


def _load_data(path):
    try:
        return load_csv(path)
    except OSError as exc:
        raise DataError(f"cannot read data {path}: {exc.strerror}") from None


def cmd_gen(args):
    data = gen_synthetic(args.d, args.n, args.seed)
    write_csv(data, args.out)
    log.info("wrote %d rows (treated fraction %.3f) to %s", data.n, data.treated_fraction, args.out)


def cmd_train(args):
    cfg = _read_json(args.config)
    if not isinstance(cfg, dict):
        raise ConfigurationError("train config must be a JSON object")
    unknown = set(cfg) - TRAIN_KEYS
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    mode = parse_mode(args.mode or cfg.get("mode", "dpsw"))
    seed = int(cfg.get("seed", 0))
    hp = Hyperparams.from_dict({**cfg.get("hyperparams", {}), "seed": seed})
    ratios = cfg.get("split", [0.5, 0.25, 0.25])
    data_path = args.data or cfg.get("data")
    if not data_path:
        raise ConfigurationError("no data path given (--data or config 'data')")
    data = _load_data(data_path)
    tr, va, _ = split(data, ratios, seed)
    log_path = args.log or args.out + ".log.jsonl"
    with open(log_path, "w") as fh:
        def on_round(record):
            fh.write(json.dumps(record, sort_keys=True) + "\n")

        model, tlog = train(tr, va, hp, mode, on_round=on_round)
    model.save(args.out, {"best_round": tlog.best_round, "best_val": tlog.best_val, "split": list(ratios),
                          "fallbacks": tlog.fallbacks})
    log.info("mode=%s best_round=%d val=%.6f", mode.value, tlog.best_round, tlog.best_val)


def cmd_eval(args):
    try:
        model, meta = DPSWModel.load(args.checkpoint)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {args.checkpoint}: {exc.strerror}") from None
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise DataError(f"{args.checkpoint} is not a JSON checkpoint") from None
    data = _load_data(args.data)
    tau_hat = predict_cate(model, data.x)
    metrics = {"mode": model.mode.value, "n": data.n, "ate_hat": float(np.mean(tau_hat))}
    if data.has_potential_outcomes:
        metrics["pehe"] = pehe(data.y0, data.y1, tau_hat)
        metrics["ate_true"] = float(np.mean(data.y1 - data.y0))
    if data.feature_blocks is not None:
        for name in ("gamma", "delta", "upsilon"):
            net = model.nets.get("phi" if "phi" in model.nets else name)
            if net is None:
                continue
            try:
                metrics[f"attribution_{name}"] = attribution(net.first_layer, data.feature_blocks[name])
            except DegenerateFitError as exc:
                log.warning("attribution for %s skipped: %s", name, exc)
    with open(args.out, "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_ablate(args):
    cfg = _read_json(args.config)
    if args.workers is not None:
        cfg = {**cfg, "workers": args.workers}
    result = run_experiment(cfg, args.out_dir)
    for agg in result.aggregates:
        mean = "nan" if agg.pehe_mean is None else f"{agg.pehe_mean:.5f}"
        print(f"d={agg.d} mode={agg.mode} ok={agg.n_ok} failed={agg.n_failed} pehe_mean={mean}")


def build_parser():
    p = argparse.ArgumentParser(prog="dpsw", description="Differentiable Pareto-smoothed weighting for CATE estimation")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic dataset to CSV")
    g.add_argument("--d", type=int, required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train one model and save a checkpoint")
    t.add_argument("--config", required=True)
    t.add_argument("--data")
    t.add_argument("--mode")
    t.add_argument("--out", required=True)
    t.add_argument("--log", help="per-round JSON lines (default: <out>.log.jsonl)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a CSV dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="multi-seed, multi-mode experiment")
    a.add_argument("--config", required=True)
    a.add_argument("--out-dir", required=True)
    a.add_argument("--workers", type=int)
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None):
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except NumericalAbort as exc:
        log.error("numerical abort: %s", exc)
        return EXIT_NUMERIC
    except (DataError, ShapeError, InvalidInputError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except (ConfigurationError, InvalidParameterError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG
    except OSError as exc:
        log.error("cannot write output: %s", exc)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
