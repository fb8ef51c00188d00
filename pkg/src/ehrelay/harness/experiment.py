"""Run controllers over sweep points and seeds, collect and aggregate metrics."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..baselines import HRController, NaiveController, FixedPolicyController, TableController, BaselineContext
from ..dltpc import DLTPCController
from ..env import RelayNetwork
from ..exact import build_kernel, little_delay, rvi_solve
from ..policy import PolicyParams
from ..sim import Run
from .config import ExperimentConfig

log = logging.getLogger(__name__)


class RunInterrupted(RuntimeError):
    """Raised when a run is stopped on purpose after writing its checkpoint."""


@dataclass
class MetricSeries:
    """Everything recorded for one (controller, sweep point, seed) run."""

    controller: str
    axis: str
    value: float
    seed: int
    trace: list = field(default_factory=list)        # [slot, b, running mean b, cumulative drops]
    cycles: list = field(default_factory=list)       # [cycle, end slot, length, alpha, r_hat, grad norm]
    snapshots: list = field(default_factory=list)    # [cycle, relay, local state, action, probability]
    summary: dict = field(default_factory=dict)
    error: str | None = None
    policy_json: str | None = None


SUMMARY_KEYS = ("mean_occupancy", "drop_rate", "delay_ms", "delay_simplified_ms", "mean_reward",
                "slots", "arrivals", "drops", "cycles", "stream_digest")


def _axis_label(axis: str | None) -> str:
    return axis or "none"


def default_track(params, num_bins: int) -> list[tuple[int, int]]:
    """Per relay: the local state with full buffer, best channels and a full battery."""
    out = []
    for k in range(params.num_relays):
        lay = PolicyParams.for_system(params, num_bins).layouts[k]
        out.append((k, lay.index(params.buffer_capacity, num_bins - 1, num_bins - 1, params.battery_capacity[k])))
    return out


class _Solved:
    """Per-point cache of the exact optimal policy."""

    def __init__(self):
        self._cache: dict = {}

    def get(self, cfg: ExperimentConfig, key):
        if key not in self._cache:
            params = cfg.params
            kernel = build_kernel(params, cfg.channel, cfg.anchor_for(params), cfg.size_cap)
            self._cache[key] = (kernel, rvi_solve(kernel))
        return self._cache[key]


def make_controller(name: str, cfg: ExperimentConfig, seed: int, solved: _Solved | None = None, key=None):
    params = cfg.params
    nb = cfg.channel.num_bins
    if name == "dltpc":
        theta = PolicyParams.random(params, nb, seed, cfg.init_scale)
        track = list(cfg.track) if cfg.track else default_track(params, nb)
        return DLTPCController(params, theta, seed, anchor=cfg.anchor_for(params), schedule=cfg.schedule,
                               mode=cfg.mode, max_cycle_length=cfg.max_cycle_length, track=track,
                               snapshot_every=cfg.snapshot_every)
    if name == "naive":
        return NaiveController(params)
    if name == "online-hr":
        return HRController(params, BaselineContext.from_params(params, cfg.channel.mean_gain))
    if name == "fixed-policy":
        pol = PolicyParams.from_json(Path(cfg.policy_file).read_text())
        expect = PolicyParams.for_system(params, nb).layouts
        if pol.layouts != expect:
            raise ValueError(f"policy file layout {pol.layouts} does not match the system {expect}")
        return FixedPolicyController(params, pol, seed)
    if name == "mdp-optimal":
        kernel, res = (solved or _Solved()).get(cfg, key)
        return TableController(kernel, res.policy)
    raise ValueError(f"unknown controller {name!r}")


def _checkpoint_name(cfg: ExperimentConfig, controller: str, axis, value, seed: int) -> str:
    # the config digest keeps results of a different config out of a reused directory
    return f"{cfg.digest()[:12]}_{controller}_{_axis_label(axis)}_{value}_{seed}.json"


def run_one(cfg: ExperimentConfig, controller: str, axis, value, seed: int, solved: _Solved | None = None,
            checkpoint_dir=None, stop_after: int | None = None) -> MetricSeries:
    """One simulation run.

    With a checkpoint directory, a finished result stored there is returned as is,
    an unfinished checkpoint is resumed, and if `stop_after` is set the run is
    saved and interrupted after that many slots.
    """
    ck = Path(checkpoint_dir) / _checkpoint_name(cfg, controller, axis, value, seed) if checkpoint_dir else None
    done = ck.with_suffix(".done.json") if ck is not None else None
    if done is not None and done.exists():
        return MetricSeries(**json.loads(done.read_text()))
    pcfg = cfg.at_point(axis, value)
    params = pcfg.params
    series = MetricSeries(controller, _axis_label(axis), value if value is not None else float("nan"), seed)
    env = RelayNetwork(params, pcfg.channel, seed)
    ctrl = make_controller(controller, pcfg, seed, solved, (axis, value))
    run = Run(env, ctrl, warmup=pcfg.warmup_slots, trace_stride=pcfg.trace_stride)
    if ck is not None and ck.exists():
        run.restore(ck)
    target = pcfg.horizon
    if stop_after is not None and env.n < stop_after < target:
        run.advance(stop_after - env.n)
        run.save(ck)
        raise RunInterrupted(f"stopped after {stop_after} slots; checkpoint at {ck}")
    run.advance(target - env.n)

    t = run.tally
    delay, simple = (little_delay(t.mean_occupancy, params.mean_arrival, t.drop_rate)
                     if params.mean_arrival > 0 else (float("nan"), float("nan")))
    series.trace = run.trace
    series.summary = {
        "mean_occupancy": t.mean_occupancy, "drop_rate": t.drop_rate, "delay_ms": delay,
        "delay_simplified_ms": simple, "mean_reward": t.mean_reward, "slots": t.slots,
        "arrivals": t.arrivals, "drops": t.drops, "cycles": getattr(ctrl, "m", 0),
        "stream_digest": f"0x{env.digest:016x}",
    }
    if isinstance(ctrl, DLTPCController):
        series.cycles = [[c.m, c.end_slot, c.length, c.alpha, c.r_hat, c.grad_norm] for c in ctrl.cycles]
        for m, probs in ctrl.snapshots:
            for (k, l), p in zip(ctrl.track, probs):
                series.snapshots.extend([m, k, l, a, pa] for a, pa in enumerate(p))
        series.policy_json = ctrl.policy.to_json()
    if ck is not None:
        done.write_text(json.dumps(asdict(series)))
        if ck.exists():
            ck.unlink()
    return series


def run_experiment(cfg: ExperimentConfig, points=None, checkpoint_dir=None,
                   stop_after: int | None = None) -> list[MetricSeries]:
    """All (controller, point, seed) runs. Controllers at a point share each seed's
    exogenous streams. A failing run is recorded with its error and the sweep goes on."""
    solved = _Solved()
    out = []
    for axis, value in (points if points is not None else cfg.points()):
        for seed in cfg.seeds:
            for name in cfg.controllers:
                try:
                    out.append(run_one(cfg, name, axis, value, seed, solved, checkpoint_dir, stop_after))
                except RunInterrupted:
                    raise
                except Exception as exc:  # recorded, sweep continues
                    log.warning("run %s %s=%s seed %s failed: %s", name, axis, value, seed, exc)
                    ms = MetricSeries(name, _axis_label(axis), value if value is not None else float("nan"), seed)
                    ms.error = f"{type(exc).__name__}: {exc}"
                    out.append(ms)
    return out


def mean_se(xs) -> tuple[float, float]:
    xs = np.asarray([x for x in xs if not math.isnan(x)], dtype=float)
    if xs.size == 0:
        return float("nan"), float("nan")
    if xs.size == 1 or not np.all(np.isfinite(xs)):
        return float(xs.mean()), float("nan")
    return float(xs.mean()), float(xs.std(ddof=1) / math.sqrt(xs.size))


def aggregate(series: list[MetricSeries]) -> list[dict]:
    """Mean and standard error over seeds, one row per (controller, axis, value)."""
    groups: dict = {}
    for s in series:
        groups.setdefault((s.controller, s.axis, s.value), []).append(s)
    rows = []
    for (ctrl, axis, value), runs in groups.items():
        ok = [r for r in runs if r.error is None]
        row = {"controller": ctrl, "axis": axis, "value": value, "seeds": len(ok), "failures": len(runs) - len(ok)}
        for key in ("mean_occupancy", "drop_rate", "delay_ms"):
            row[key], row[key + "_se"] = mean_se([r.summary[key] for r in ok])
        rows.append(row)
    return rows
