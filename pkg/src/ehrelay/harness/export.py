"""Plot-ready files: one table per figure analog plus a metadata sidecar.

  fig2   occupancy trace     controller, axis, value, seed, slot, occupancy, running_mean, cumulative_drops
  fig3   policy snapshots    controller, axis, value, seed, cycle, relay, local_state, action, probability
  fig4   summary vs lambda   controller, value, seeds, failures, mean_occupancy(_se), drop_rate(_se), delay_ms(_se)
  fig5   summary vs N_E      same columns
  fig6   summary vs mu       same columns
  runs   one row per run     controller, axis, value, seed, summary metrics, error
  cycles per-cycle learning  controller, axis, value, seed, cycle, end_slot, length, alpha, r_hat, grad_norm

Floats are written with repr() so re-reading reproduces them exactly.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .. import __version__
from ..baselines import hr_stand_in_note
from .config import ExperimentConfig
from .experiment import SUMMARY_KEYS, MetricSeries, aggregate

FIG_AXES = {"fig4": "mean_arrival", "fig5": "battery_capacity", "fig6": "mean_harvest"}
RUN_KEY = ["controller", "axis", "value", "seed"]
COLUMNS = {
    "fig2": RUN_KEY + ["slot", "occupancy", "running_mean", "cumulative_drops"],
    "fig3": RUN_KEY + ["cycle", "relay", "local_state", "action", "probability"],
    "cycles": RUN_KEY + ["cycle", "end_slot", "length", "alpha", "r_hat", "grad_norm"],
    "runs": RUN_KEY + list(SUMMARY_KEYS) + ["error"],
    "summary": ["controller", "axis", "value", "seeds", "failures", "mean_occupancy", "mean_occupancy_se",
                "drop_rate", "drop_rate_se", "delay_ms", "delay_ms_se"],
}
for _f in FIG_AXES:
    COLUMNS[_f] = COLUMNS["summary"]


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return str(int(v))
    return str(v)


def tables(series: list[MetricSeries]) -> dict[str, list[list]]:
    out: dict[str, list[list]] = {k: [] for k in ("fig2", "fig3", "cycles", "runs")}
    for s in series:
        key = [s.controller, s.axis, s.value, s.seed]
        out["fig2"].extend(key + list(row) for row in s.trace)
        out["fig3"].extend(key + list(row) for row in s.snapshots)
        out["cycles"].extend(key + list(row) for row in s.cycles)
        out["runs"].append(key + [s.summary.get(k) for k in SUMMARY_KEYS] + [s.error])
    agg = aggregate(series)
    cols = COLUMNS["summary"]
    out["summary"] = [[r[c] for c in cols] for r in agg]
    for fig, axis in FIG_AXES.items():
        rows = [[r[c] for c in cols] for r in agg if r["axis"] == axis]
        if rows:
            out[fig] = rows
    return out


def metadata(cfg: ExperimentConfig) -> dict:
    hr = "online-hr" in cfg.controllers
    return {
        "version": f"ehrelay-{__version__}",
        "config_hash": cfg.digest(),
        "seeds": list(cfg.seeds),
        "controllers": list(cfg.controllers),
        "horizon": cfg.horizon,
        "warmup": cfg.warmup_slots,
        "hr_stand_in": hr,
        "hr_stand_in_note": hr_stand_in_note() if hr else "",
        "stream_kinds": {"channel": 1, "arrival": 2, "harvest": 3, "policy": 4, "init": 5},
        "config": cfg.canonical(),
    }


def export(series: list[MetricSeries], cfg: ExperimentConfig, out_dir, fmt: str = "csv") -> list[Path]:
    """Write every table and the metadata sidecar; returns the paths written."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, rows in tables(series).items():
        cols = COLUMNS[name]
        if fmt == "csv":
            path = out / f"{name}.csv"
            with open(path, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(cols)
                w.writerows([_fmt(v) for v in row] for row in rows)
        elif fmt == "json":
            path = out / f"{name}.json"
            path.write_text(json.dumps({"columns": cols, "rows": rows}, allow_nan=True) + "\n")
        else:
            raise ValueError(f"unknown format {fmt!r}")
        written.append(path)
    for s in series:
        if s.policy_json is not None and s.error is None:
            path = out / f"policy_{s.controller}_{s.axis}_{s.value}_{s.seed}.json"
            path.write_text(s.policy_json + "\n")
            written.append(path)
    meta = out / "metadata.json"
    meta.write_text(json.dumps(metadata(cfg), indent=2, sort_keys=True) + "\n")
    written.append(meta)
    return written


def _parse(v: str):
    if v == "":
        return None
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


def read_table(path) -> tuple[list[str], list[list]]:
    """Parse a written CSV or JSON table back into (columns, rows)."""
    p = Path(path)
    if p.suffix == ".json":
        d = json.loads(p.read_text())
        return d["columns"], d["rows"]
    with open(p, newline="") as fh:
        r = csv.reader(fh)
        cols = next(r)
        return cols, [[_parse(v) for v in row] for row in r]
