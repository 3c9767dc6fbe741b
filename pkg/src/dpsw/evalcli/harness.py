"""Multi-seed, multi-mode experiment harness with deterministic result files.

Every replicate derives its seeds from the master seed by fixed offsets, so
a rerun with the same config reproduces the output files byte for byte.
Nothing time-dependent is written.
"""

import csv
import itertools
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from ..datagen import gen_synthetic, split
from ..errors import ConfigurationError, DegenerateFitError, DPSWError, NumericalAbort
from ..estimator import Hyperparams, Mode, parse_mode, predict_cate, train
from .metrics import attribution, pehe

log = logging.getLogger(__name__)

SPLIT_OFFSET = 10_000
TRAIN_OFFSET = 20_000
SMOOTHING_KEYS = ("epsilon", "kappa")

DEFAULT_CONFIG = {
    "d": [18],
    "n": 4000,
    "seeds": 10,
    "master_seed": 0,
    "modes": ["dpsw_norm", "dpsw", "drcfr_raw", "single_encoder"],
    "split": [0.5, 0.25, 0.25],
    "hyperparams": {},
    "grid": {},
    "workers": 1,
    "write_logs": True,
}


def normalize_config(cfg):
    """Fill defaults and validate; raises ConfigurationError."""
    if not isinstance(cfg, dict):
        raise ConfigurationError("experiment config must be a JSON object")
    unknown = set(cfg) - set(DEFAULT_CONFIG)
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    out = {**DEFAULT_CONFIG, **cfg}
    ds = out["d"] if isinstance(out["d"], list) else [out["d"]]
    if not ds or any(not isinstance(d, int) or d < 3 or d % 3 for d in ds):
        raise ConfigurationError(f"d must be a positive multiple of 3 (or a list of them), got {out['d']}")
    out["d"] = ds
    if not isinstance(out["n"], int) or out["n"] < 12:
        raise ConfigurationError(f"n must be an integer >= 12, got {out['n']}")
    seeds = out["seeds"]
    if isinstance(seeds, int):
        if seeds < 1:
            raise ConfigurationError("seeds must be positive")
    elif not (isinstance(seeds, list) and seeds and all(isinstance(s, int) and s >= 0 for s in seeds)):
        raise ConfigurationError("seeds must be a count or a list of nonnegative replicate indices")
    if not isinstance(out["master_seed"], int) or out["master_seed"] < 0:
        raise ConfigurationError("master_seed must be a nonnegative integer")
    out["modes"] = [parse_mode(m).value for m in out["modes"]]
    if not out["modes"]:
        raise ConfigurationError("at least one mode is required")
    if len(out["split"]) != 3:
        raise ConfigurationError("split must list train/validation/test fractions")
    Hyperparams.from_dict(out["hyperparams"])
    grid = out["grid"]
    if not isinstance(grid, dict) or any(not isinstance(v, list) or not v for v in grid.values()):
        raise ConfigurationError("grid must map hyperparameter names to nonempty lists")
    for combo in _grid_points(grid):
        Hyperparams.from_dict({**out["hyperparams"], **combo})
    if not isinstance(out["workers"], int) or out["workers"] < 1:
        raise ConfigurationError("workers must be a positive integer")
    return out


def replicates(cfg):
    seeds = cfg["seeds"]
    return list(range(seeds)) if isinstance(seeds, int) else list(seeds)


def derived_seeds(master_seed, replicate):
    """(data, split, train) seeds for one replicate."""
    base = master_seed + replicate
    return base, base + SPLIT_OFFSET, base + TRAIN_OFFSET


def _grid_points(grid):
    keys = sorted(grid)
    return [dict(zip(keys, values)) for values in itertools.product(*(grid[k] for k in keys))]


def _mode_grid(grid, mode):
    if not Mode(mode).smoothed:
        grid = {k: v for k, v in grid.items() if k not in SMOOTHING_KEYS}
    return _grid_points(grid)


@dataclass
class SeedRecord:
    d: int
    replicate: int
    data_seed: int
    mode: str
    status: str = "ok"
    pehe: float = None
    attribution_gamma: float = None
    attribution_delta: float = None
    attribution_upsilon: float = None
    fits: int = 0
    fallbacks: int = 0
    unreliable_fits: int = 0
    rounds: int = 0
    best_round: int = -1
    val_objective: float = None
    epsilon: float = None
    kappa: float = None
    xi_trace: list = field(default_factory=list)
    error: str = ""


@dataclass
class AggregateRecord:
    d: int
    mode: str
    n_ok: int
    n_failed: int
    pehe_mean: float
    pehe_std: float
    attribution_gamma_mean: float
    attribution_delta_mean: float
    attribution_upsilon_mean: float
    fallbacks_total: int


RECORD_FIELDS = [f.name for f in fields(SeedRecord)]
AGGREGATE_FIELDS = [f.name for f in fields(AggregateRecord)]
_INT_FIELDS = {"d", "replicate", "data_seed", "fits", "fallbacks", "unreliable_fits", "rounds", "best_round",
               "n_ok", "n_failed", "fallbacks_total"}
_STR_FIELDS = {"mode", "status", "error"}


def _mean(values):
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def aggregate(records):
    """Per (d, mode) mean and sample std of PEHE over successful seeds."""
    out = []
    keys = sorted({(r.d, r.mode) for r in records}, key=lambda k: (k[0], k[1]))
    for d, mode in keys:
        group = [r for r in records if r.d == d and r.mode == mode]
        ok = [r for r in group if r.status == "ok"]
        pehes = [r.pehe for r in ok]
        out.append(
            AggregateRecord(
                d=d,
                mode=mode,
                n_ok=len(ok),
                n_failed=len(group) - len(ok),
                pehe_mean=_mean(pehes),
                pehe_std=float(np.std(pehes, ddof=1)) if len(pehes) > 1 else (0.0 if pehes else None),
                attribution_gamma_mean=_mean(r.attribution_gamma for r in ok),
                attribution_delta_mean=_mean(r.attribution_delta for r in ok),
                attribution_upsilon_mean=_mean(r.attribution_upsilon for r in ok),
                fallbacks_total=sum(r.fallbacks for r in group),
            )
        )
    return out


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, list):
        return ";".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return "nan" if math.isnan(value) else f"{value:.6g}"
    return str(value)


def _parse(name, text):
    if name in _STR_FIELDS:
        return text
    if name == "xi_trace":
        return [float(v) for v in text.split(";")] if text else []
    if text == "":
        return None
    return int(text) if name in _INT_FIELDS else float(text)


def _round6(value):
    if isinstance(value, float):
        return float(f"{value:.6g}")
    if isinstance(value, list):
        return [_round6(v) for v in value]
    return value


def _jsonable(value):
    if isinstance(value, float) and not math.isfinite(value):
        return None
    if isinstance(value, list):
        return [_jsonable(v) for v in value]
    return value


@dataclass
class ExperimentResult:
    records: list
    config: dict = field(default_factory=dict)

    @property
    def aggregates(self):
        return aggregate(self.records)

    def rounded(self):
        """Copy with every float cut to the 6 significant digits the CSV keeps."""
        return ExperimentResult(
            [SeedRecord(**{k: _round6(v) for k, v in asdict(r).items()}) for r in self.records], self.config
        )

    def write_csv(self, path):
        _write_rows(path, RECORD_FIELDS, [asdict(r) for r in self.records])

    def write_aggregate_csv(self, path):
        _write_rows(path, AGGREGATE_FIELDS, [asdict(a) for a in self.aggregates])

    def to_json(self):
        payload = {
            "config": self.config,
            "records": [{k: _jsonable(v) for k, v in asdict(r).items()} for r in self.records],
            "aggregates": [{k: _jsonable(v) for k, v in asdict(a).items()} for a in self.aggregates],
        }
        return json.dumps(payload, indent=2, sort_keys=True) + "\n"

    def write(self, out_dir):
        os.makedirs(out_dir, exist_ok=True)
        self.write_csv(os.path.join(out_dir, "results.csv"))
        self.write_aggregate_csv(os.path.join(out_dir, "aggregate.csv"))
        with open(os.path.join(out_dir, "results.json"), "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def read_csv(cls, path, config=None):
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames != RECORD_FIELDS:
                raise ConfigurationError(f"{path}: unexpected header {reader.fieldnames}")
            records = [SeedRecord(**{k: _parse(k, row[k]) for k in RECORD_FIELDS}) for row in reader]
        return cls(records, config or {})

    @classmethod
    def from_json(cls, text):
        payload = json.loads(text)
        records = [SeedRecord(**r) for r in payload["records"]]
        return cls(records, payload.get("config", {}))


def _write_rows(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(row[k]) for k in header])


def _attributions(model, blocks):
    if model.mode is Mode.SINGLE_ENCODER:
        sources = {name: model.nets["phi"] for name in ("gamma", "delta", "upsilon")}
    else:
        sources = {name: model.nets.get(name) for name in ("gamma", "delta", "upsilon")}
    out = {}
    for name, net in sources.items():
        if net is None:
            out[name] = None
            continue
        try:
            out[name] = attribution(net.first_layer, blocks[name])
        except DegenerateFitError:
            out[name] = None
    return out


def _log_path(log_dir, d, replicate, mode):
    return None if log_dir is None else os.path.join(log_dir, f"d{d}_rep{replicate}_{mode}.jsonl")


def run_job(job):
    """Train one (d, replicate, mode) cell; returns a SeedRecord. Picklable."""
    cfg, d, replicate, mode, log_dir = job
    data_seed, split_seed, train_seed = derived_seeds(cfg["master_seed"], replicate)
    rec = SeedRecord(d=d, replicate=replicate, data_seed=data_seed, mode=mode)
    data = gen_synthetic(d, cfg["n"], data_seed)
    tr, va, te = split(data, cfg["split"], split_seed)
    best = None
    try:
        for combo in _mode_grid(cfg["grid"], mode):
            hp = Hyperparams.from_dict({**cfg["hyperparams"], **combo, "seed": train_seed})
            model, tlog = train(tr, va, hp, mode)
            if best is None or tlog.best_val < best[1].best_val:
                best = (model, tlog, hp)
    except NumericalAbort as exc:
        rec.status, rec.error = "numerical_abort", str(exc)
        log.warning("d=%d replicate=%d mode=%s aborted: %s", d, replicate, mode, exc)
        return rec
    except DPSWError as exc:
        rec.status, rec.error = "failed", f"{type(exc).__name__}: {exc}"
        log.warning("d=%d replicate=%d mode=%s failed: %s", d, replicate, mode, exc)
        return rec
    model, tlog, hp = best
    rec.pehe = pehe(te.y0, te.y1, predict_cate(model, te.x))
    attr = _attributions(model, data.feature_blocks)
    rec.attribution_gamma, rec.attribution_delta, rec.attribution_upsilon = attr["gamma"], attr["delta"], attr["upsilon"]
    rec.fits = tlog.fits
    rec.fallbacks = tlog.fallbacks
    rec.unreliable_fits = sum(r["unreliable_fits"] for r in tlog.rounds)
    rec.rounds = len(tlog.rounds)
    rec.best_round = tlog.best_round
    rec.val_objective = tlog.best_val
    if Mode(mode).smoothed:
        rec.epsilon, rec.kappa = float(hp.epsilon), float(hp.kappa)
    rec.xi_trace = [r["xi_mean"] for r in tlog.rounds if r["xi_mean"] is not None]
    path = _log_path(log_dir, d, replicate, mode)
    if path is not None:
        with open(path, "w") as fh:
            for r in tlog.rounds:
                fh.write(json.dumps(r, sort_keys=True) + "\n")
    log.info("d=%d replicate=%d mode=%s pehe=%.5f rounds=%d", d, replicate, mode, rec.pehe, rec.rounds)
    return rec


def run_experiment(config, out_dir=None):
    """Run every (d, replicate, mode) cell; optionally write result files to ``out_dir``."""
    cfg = normalize_config(config)
    log_dir = None
    if out_dir is not None and cfg["write_logs"]:
        log_dir = os.path.join(out_dir, "logs")
        os.makedirs(log_dir, exist_ok=True)
    jobs = [(cfg, d, r, m, log_dir) for d in cfg["d"] for r in replicates(cfg) for m in cfg["modes"]]
    if cfg["workers"] > 1:
        with ProcessPoolExecutor(max_workers=cfg["workers"]) as pool:
            records = list(pool.map(run_job, jobs))
    else:
        records = [run_job(job) for job in jobs]
    result = ExperimentResult(records, cfg)
    if out_dir is not None:
        result.write(out_dir)
    return result
