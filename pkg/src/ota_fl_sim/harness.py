"""Experiment runner: single runs, sweeps, variant comparisons and channel checks.

Every run writes ``rounds.csv``, ``manifest.json`` and a model checkpoint into
its own directory. Given the same config and seed the CSV is byte-identical
across reruns; only the manifest timestamps change.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import channel as ch
from .config import AXIS_KEYS, config_hash, load_config_file, resolve_config, set_key
from .diagnostics import diagnostics_report
from .exceptions import ConfigError, SchemaError
from .model import save_checkpoint
from .protocol import RECORD_COLUMNS, VARIANTS, RunConfig, record_row, run_training

CSV_SCHEMA_VERSION = 1
SWEEP_COLUMNS = ("variant", "axis", "value", "repeat", "master_seed", "rounds", "diverged",
                 "final_accuracy", "window_accuracy", "window_loss", "window_grad_norm_sq",
                 "run_dir")
PLOT_COLUMNS = ("variant", "round", "repeat", "value")


def output_root(out=None) -> Path:
    return Path(out or os.environ.get("OTA_FL_SIM_OUT") or "runs")


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return "" if v is None else str(v)


def write_rounds_csv(records, path):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_COLUMNS)
        for rec in records:
            w.writerow([_fmt(v) for v in record_row(rec)])


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def write_run(result, run_dir, input_hashes=None, extra=None, started_at=None) -> Path:
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    cfg = result.config
    write_rounds_csv(result.records, run_dir / "rounds.csv")
    save_checkpoint(result.theta, cfg.model_spec(), run_dir / "model.bin")
    manifest = {
        "schema_version": CSV_SCHEMA_VERSION,
        "code_version": __version__,
        "variant": cfg.variant,
        "config_hash": config_hash(cfg),
        "config": cfg.to_dict(),
        "input_hashes": dict(input_hashes or {}),
        "csv_columns": list(RECORD_COLUMNS),
        "T": cfg.T,
        "rounds_completed": len(result.records),
        "diverged": result.diverged,
        "diverged_round": result.diverged_round,
        "partition": list(result.partition),
        "diagnostics": diagnostics_report(result),
        "started_at": started_at or _now(),
        "finished_at": _now(),
    }
    if cfg.data.source == "csv" and "data" not in manifest["input_hashes"]:
        manifest["input_hashes"]["data"] = file_sha256(cfg.data.path)
    manifest.update(extra or {})
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, default=_json_default) + "\n")
    return run_dir


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, float) and not math.isfinite(o):
        return None
    return str(o)


def execute_run(cfg: RunConfig, run_dir, input_hashes=None, extra=None):
    """Train and persist one configuration; returns the :class:`RunResult`."""
    started = _now()
    result = run_training(cfg)
    write_run(result, run_dir, input_hashes, extra, started)
    return result


def _window_mean(records, attr, window):
    vals = [getattr(r, attr) for r in records[-window:]]
    vals = [v for v in vals if math.isfinite(v)]
    return float(np.mean(vals)) if vals else math.nan


@dataclass(frozen=True)
class SweepSpec:
    base: dict
    axis: str
    values: tuple
    repeats: int = 1
    variants: tuple = ()
    final_window: int = 10

    def __post_init__(self):
        if self.axis not in AXIS_KEYS:
            raise ConfigError(f"must be one of {sorted(AXIS_KEYS)}", field="axis")
        if not self.values:
            raise ConfigError("must be non-empty", field="values")
        if self.repeats < 1:
            raise ConfigError("must be >= 1", field="repeats")
        for v in self.variants:
            if v not in VARIANTS:
                raise ConfigError(f"unknown variant {v!r}", field="variants")
        if self.final_window < 1:
            raise ConfigError("must be >= 1", field="final_window")


def load_sweep_file(path) -> SweepSpec:
    from .config import tomllib, _validated

    path = Path(path)
    try:
        raw = tomllib.loads(path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse sweep file: {exc}") from None
    unknown = set(raw) - {"base", "axis", "values", "repeats", "variants", "final_window"}
    if unknown:
        raise ConfigError("unknown key", field=sorted(unknown)[0])
    base = raw.get("base")
    if isinstance(base, str):
        base_path = Path(base) if Path(base).is_absolute() else path.parent / base
        base = load_config_file(base_path)
    elif isinstance(base, dict):
        base = _validated(base)
    else:
        raise ConfigError("must be a config path or a table of config keys", field="base")
    if "axis" not in raw or "values" not in raw:
        raise ConfigError("sweep needs 'axis' and 'values'", field="axis")
    return SweepSpec(base, raw["axis"], tuple(raw["values"]), int(raw.get("repeats", 1)),
                     tuple(raw.get("variants", ())), int(raw.get("final_window", 10)))


def cell_seed(base_seed, value_index, repeat) -> int:
    ss = np.random.SeedSequence(int(base_seed), spawn_key=(1000 + value_index, repeat))
    return int(ss.generate_state(1, np.uint64)[0] % (2**63))


def _run_cell(args):
    cfg, run_dir, row = args
    result = execute_run(cfg, run_dir, extra={"repeat": row["repeat"], "sweep_axis": row["axis"],
                                              "sweep_value": row["value"]})
    w = row.pop("window")
    row.update(
        rounds=len(result.records), diverged=result.diverged,
        final_accuracy=result.final_accuracy,
        window_accuracy=_window_mean(result.records, "test_accuracy", w),
        window_loss=_window_mean(result.records, "global_loss", w),
        window_grad_norm_sq=_window_mean(result.records, "grad_norm_sq", w),
    )
    return row


def sweep_cells(sweep: SweepSpec, seed_override=None):
    """Resolved ``(variant, value, repeat, RunConfig)`` cells in deterministic order."""
    base_seed = sweep.base.get("master_seed", 0) if seed_override is None else seed_override
    variants = sweep.variants or (sweep.base.get("variant", "NoROTA"),)
    key = AXIS_KEYS[sweep.axis]
    cells = []
    for vi, value in enumerate(sweep.values):
        raw = set_key(sweep.base, key, value)
        for rep in range(sweep.repeats):
            seed = cell_seed(base_seed, vi, rep)
            for variant in variants:
                cfg = resolve_config(set_key(raw, "variant", variant), seed_override=seed)
                cells.append((variant, value, rep, cfg))
    return cells


def run_sweep(sweep: SweepSpec, out_dir, jobs=1, seed_override=None) -> list:
    out_dir = Path(out_dir)
    tasks = []
    for variant, value, rep, cfg in sweep_cells(sweep, seed_override):
        name = f"{variant}_{sweep.axis}={value}_r{rep}"
        row = {"variant": variant, "axis": sweep.axis, "value": value, "repeat": rep,
               "master_seed": cfg.master_seed, "run_dir": str(out_dir / "cells" / name),
               "window": sweep.final_window}
        tasks.append((cfg, out_dir / "cells" / name, row))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_cell, tasks))
    else:
        rows = [_run_cell(t) for t in tasks]
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "sweep.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in SWEEP_COLUMNS])
    return rows


def run_compare(raw: dict, variants, out_dir, jobs=1, seed_override=None) -> list:
    """Run several variants on one base config with a shared seed."""
    out_dir = Path(out_dir)
    tasks = []
    for v in variants:
        cfg = resolve_config(set_key(raw, "variant", v), seed_override=seed_override)
        row = {"variant": v, "axis": "variant", "value": v, "repeat": 0,
               "master_seed": cfg.master_seed, "run_dir": str(out_dir / v), "window": 10}
        tasks.append((cfg, out_dir / v, row))
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_run_cell, tasks))
    else:
        rows = [_run_cell(t) for t in tasks]
    with (out_dir / "compare.csv").open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in SWEEP_COLUMNS])
    return rows


@dataclass
class ChannelCheck:
    name: str
    measured: float
    expected: float
    deviation: float
    limit: float

    @property
    def ok(self) -> bool:
        return self.deviation <= self.limit


def _rel_dev(measured, expected):
    if expected == 0:
        return abs(measured)
    return abs(measured - expected) / abs(expected)


def verify_channel(trials=100_000, K=3, p_t=0.25, sigma2=1.0, K_hat=None, r_hat=None,
                   participation=2 / 3, K_fading=30, d=1, seed=0, tolerance=0.05) -> list:
    """Monte-Carlo checks of the decoded-noise laws and the power constraint.

    Decoded noise is measured as ``decode(y) - decode(y_noiseless)`` so a
    noiseless channel gives exactly zero.
    """
    if trials < 1:
        raise ValueError("trials must be positive")
    rng = np.random.default_rng(seed)
    K_hat = max(1, K - 1) if K_hat is None else K_hat
    if r_hat is None:
        r_hat = ch.r_hat_for_participation(participation)
        target = participation
    else:
        target = ch.participation_probability(r_hat)
    prev = rng.standard_normal(d)
    thetas = prev + rng.standard_normal((max(K, K_fading), d))
    checks = []

    def noise_var(n_users, decode):
        xs = [ch.encode(thetas[k], prev, p_t) for k in range(n_users)]
        y_clean = ch.mac_superpose(xs, 0.0, None)
        base = decode(y_clean)
        acc = 0.0
        for _ in range(trials):
            # superposition is linear, so noise can be added to the clean sum
            e = decode(ch.mac_superpose([y_clean], sigma2, rng)) - base
            acc += float(e @ e)
        return acc / (trials * d), float(np.max(np.abs(base - thetas[:n_users].mean(axis=0))))

    var, rt_full = noise_var(K, lambda y: ch.decode_full(y, K, p_t, prev))
    want = ch.decoded_noise_variance(sigma2, K, p_t)
    checks.append(ChannelCheck("full: decoded noise variance", var, want, _rel_dev(var, want), tolerance))
    var, rt_part = noise_var(K_hat, lambda y: ch.decode_partial(y, K_hat, p_t, prev))
    want = ch.decoded_noise_variance(sigma2, K_hat, p_t)
    checks.append(ChannelCheck("partial: decoded noise variance", var, want, _rel_dev(var, want), tolerance))

    # fading: normalise each round's noise by its own |K_t|-dependent variance
    ratio_sum, counted, part_sum, rt_fade = 0.0, 0, 0, 0.0
    scale = r_hat * math.sqrt(p_t)
    for _ in range(trials):
        r = np.fromiter((dr.r for dr in ch.draw_fading(K_fading, rng)), float, K_fading)
        ids = np.flatnonzero(r > r_hat)
        part_sum += ids.size
        if not ids.size:
            continue
        y_clean = ch.mac_superpose(list(scale * (thetas[ids] - prev)), 0.0, None)
        base = ch.decode_fading(y_clean, r_hat, ids.size, p_t, prev)
        e = ch.decode_fading(ch.mac_superpose([y_clean], sigma2, rng), r_hat, ids.size, p_t, prev) - base
        rt_fade = max(rt_fade, float(np.max(np.abs(base - thetas[ids].mean(axis=0)))))
        v = ch.decoded_noise_variance(sigma2, ids.size, p_t, r_hat)
        ratio_sum += float(e @ e) / d / v if v > 0 else float(e @ e)
        counted += 1
    ratio = ratio_sum / max(counted, 1)
    checks.append(ChannelCheck("fading: decoded noise / law", ratio, 1.0 if sigma2 > 0 else 0.0,
                               _rel_dev(ratio, 1.0 if sigma2 > 0 else 0.0), tolerance))
    frac = part_sum / (trials * K_fading)
    checks.append(ChannelCheck("fading: participation rate", frac, target, _rel_dev(frac, target), 0.03))

    worst = 0.0
    for _ in range(100):
        q = rng.dirichlet(np.ones(K))
        deltas = rng.standard_normal((K, d)) * rng.uniform(0.1, 10.0, size=(K, 1))
        p = ch.compute_precoding_factor(np.einsum("ij,ij->i", deltas, deltas), q, 1.0)
        power = sum(qk * float(x @ x) for qk, x in zip(q, (ch.encode(dk, 0.0, p) for dk in deltas)))
        worst = max(worst, abs(power - 1.0))
    checks.append(ChannelCheck("oracle precoding: average power residual", worst, 0.0, worst, 1e-9))
    rt = max(rt_full, rt_part, rt_fade)
    checks.append(ChannelCheck("noiseless round trip: max |decoded - mean|", rt, 0.0, rt, 1e-12))
    return checks


def emit_plot_data(run_dirs, metric, out_path=None) -> list:
    """Merge per-run round CSVs into long format ``(variant, round, repeat, value)``.

    Runs are truncated to the shortest run with a warning.
    """
    if metric not in RECORD_COLUMNS or metric == "t":
        raise SchemaError(f"unknown metric {metric!r}; expected one of {RECORD_COLUMNS[1:]}")
    runs = []
    for d in run_dirs:
        d = Path(d)
        man = d / "manifest.json"
        if not man.is_file():
            raise SchemaError(f"{d}: no manifest.json")
        meta = json.loads(man.read_text())
        with (d / "rounds.csv").open(newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        runs.append((meta.get("variant", "?"), meta.get("repeat", 0), rows))
    if not runs:
        return []
    lengths = {len(r[2]) for r in runs}
    n = min(lengths)
    if len(lengths) > 1:
        warnings.warn(f"runs have different lengths {sorted(lengths)}; truncating to {n} rounds",
                      RuntimeWarning, stacklevel=2)
    out = [(variant, int(row["t"]), rep, row[metric])
           for variant, rep, rows in runs for row in rows[:n]]
    if out_path is not None:
        with Path(out_path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(PLOT_COLUMNS)
            w.writerows(out)
    return out
