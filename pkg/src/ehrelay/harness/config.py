"""Experiment configuration: TOML file -> validated ExperimentConfig.

Keys and units (every key optional; defaults reproduce the reference setup):

[system]
  num_relays          K
  slot_duration_ms    tau, ms
  bandwidth_hz        W, Hz
  bandwidth_factor    gamma_L
  capacity_gap        Upsilon (>= 1)
  noise_power         sigma^2
  source_power        a^s, energy-pkt/ms
  packet_size_bits    l, bits
  buffer_capacity     N_B, packets
  battery_capacity    N_E, energy packets (scalar or one per relay)
  mean_arrival        lambda, pkt/ms
  mean_harvest        mu, energy-pkt/ms (scalar or one per relay)
  reward_scale        nu
  power_levels        energy-pkt/ms, ascending, containing 0 (list, or one list per relay)
[channel]
  boundaries_db       bin boundaries in dB
  mean_gain           mean linear gain of the exponential fading law
[anchor]
  buffer, batteries   recurrent state for renewal cycles (default: full buffer, full batteries)
[learning]
  schedule            geometric | harmonic | constant
  alpha0, decay, period (cycles), m0 (cycles, harmonic)
  mode                broadcast | local
  init_scale          half-width of the uniform initial parameters
  max_cycle_length    slots
[experiment]
  controllers         any of dltpc, mdp-optimal, online-hr, naive, fixed-policy
  policy_file         parameter table for fixed-policy (JSON written by the dltpc run)
  horizon             slots per run
  warmup              slots excluded from summaries (default 10% of horizon)
  seeds               list of integer seeds
  trace_stride        slots between occupancy trace points
  snapshot_every      cycles between policy snapshots
  track               [[relay, local_state_index], ...] pairs whose probabilities are logged
  size_cap            largest |S|*|A| the exact solver accepts
[sweep]
  mean_arrival, mean_harvest, battery_capacity   lists; each axis is swept on its own
[output]
  path, format (csv | json)
"""
from __future__ import annotations

import hashlib
import json
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from ..dltpc import LearningRateSchedule, RecurrentAnchor
from ..exact import DEFAULT_SIZE_CAP
from ..model import ModelError, SystemParams
from ..stochastic import DEFAULT_BOUNDARIES_DB, ChannelModel

CONTROLLERS = ("dltpc", "mdp-optimal", "online-hr", "naive", "fixed-policy")
SWEEP_AXES = ("mean_arrival", "mean_harvest", "battery_capacity")

_SYSTEM_KEYS = {
    "num_relays": "num_relays", "slot_duration_ms": "slot_duration", "bandwidth_hz": "bandwidth",
    "bandwidth_factor": "bandwidth_factor", "capacity_gap": "capacity_gap", "noise_power": "noise_power",
    "source_power": "source_power", "packet_size_bits": "packet_size", "buffer_capacity": "buffer_capacity",
    "battery_capacity": "battery_capacity", "mean_arrival": "mean_arrival", "mean_harvest": "mean_harvest",
    "reward_scale": "reward_scale", "power_levels": "power_levels",
}
_SECTIONS = {
    "system": set(_SYSTEM_KEYS),
    "channel": {"boundaries_db", "mean_gain"},
    "anchor": {"buffer", "batteries"},
    "learning": {"schedule", "alpha0", "decay", "period", "m0", "mode", "init_scale", "max_cycle_length"},
    "experiment": {"controllers", "policy_file", "horizon", "warmup", "seeds", "trace_stride",
                   "snapshot_every", "track", "size_cap"},
    "sweep": set(SWEEP_AXES),
    "output": {"path", "format"},
}


class ConfigError(ValueError):
    """Bad configuration; the message names the key and, when known, the line."""


@dataclass(frozen=True)
class SystemSpec:
    """System parameters before per-relay expansion, so sweeps can override scalars."""

    num_relays: int = 8
    slot_duration: float = 2.0
    bandwidth: float = 2.5e6
    bandwidth_factor: float = 1.0
    capacity_gap: float = 1.0
    noise_power: float = 1.0
    source_power: float = 5.0
    packet_size: float = 8192.0
    buffer_capacity: int = 9
    battery_capacity: object = 4
    mean_arrival: float = 2.0
    mean_harvest: object = 0.25
    reward_scale: float = 1.0
    power_levels: object = (0.0, 1.0, 2.0, 3.0, 4.0)

    def build(self) -> SystemParams:
        K = self.num_relays

        def per_relay(v, name):
            if isinstance(v, (list, tuple)):
                if name == "power_levels" and v and not isinstance(v[0], (list, tuple)):
                    return (tuple(v),) * K
                return tuple(tuple(x) if isinstance(x, list) else x for x in v)
            return (v,) * K

        kw = asdict(self)
        for name in ("battery_capacity", "mean_harvest", "power_levels"):
            kw[name] = per_relay(kw[name], name)
        return SystemParams(**kw)


@dataclass(frozen=True)
class ExperimentConfig:
    system: SystemSpec = SystemSpec()
    channel: ChannelModel = ChannelModel()
    anchor: tuple | None = None            # (buffer, batteries) or None for the default
    schedule: LearningRateSchedule = LearningRateSchedule()
    mode: str = "broadcast"
    init_scale: float = 0.01
    max_cycle_length: int = 1_000_000
    controllers: tuple[str, ...] = ("dltpc", "online-hr", "naive")
    policy_file: str | None = None
    horizon: int = 2_000_000
    warmup: int | None = None
    seeds: tuple[int, ...] = tuple(range(1, 11))
    trace_stride: int = 1000
    snapshot_every: int = 100
    track: tuple[tuple[int, int], ...] = ((0, 0),)
    size_cap: int = DEFAULT_SIZE_CAP
    sweep: dict = field(default_factory=dict)
    out_path: str = "out"
    out_format: str = "csv"

    @property
    def warmup_slots(self) -> int:
        return self.horizon // 10 if self.warmup is None else self.warmup

    @property
    def params(self) -> SystemParams:
        return self.system.build()

    def anchor_for(self, params: SystemParams) -> RecurrentAnchor:
        if self.anchor is None:
            return RecurrentAnchor.default(params)
        b, e = self.anchor
        batt = tuple(e) if isinstance(e, (list, tuple)) else (int(e),) * params.num_relays
        return RecurrentAnchor(int(b), batt)

    def at_point(self, axis: str | None, value) -> "ExperimentConfig":
        if axis is None:
            return self
        return replace(self, system=replace(self.system, **{axis: value}))

    def points(self) -> list[tuple[str | None, object]]:
        pts = [(axis, v) for axis in SWEEP_AXES for v in self.sweep.get(axis, ())]
        return pts or [(None, None)]

    def canonical(self) -> dict:
        d = asdict(self)
        d["channel"] = {"boundaries_db": list(self.channel.boundaries_db), "mean_gain": self.channel.mean_gain}
        d["schedule"] = asdict(self.schedule)
        return json.loads(json.dumps(d, default=list))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.canonical(), sort_keys=True).encode()).hexdigest()


def _line_of(text: str, section: str | None, key: str) -> int | None:
    current = None
    for i, line in enumerate(text.splitlines(), 1):
        m = re.match(r"\s*\[([^\]]+)\]", line)
        if m:
            current = m.group(1).strip()
            continue
        if current == section and re.match(rf"\s*{re.escape(key)}\s*=", line):
            return i
    return None


def _err(text: str, section: str | None, key: str, msg: str) -> ConfigError:
    line = _line_of(text, section, key) if section else None
    where = f"{section}.{key}" if section else key
    return ConfigError(f"{where}: {msg}" + (f" (line {line})" if line else ""))


def parse_config(text: str, base_dir: Path | None = None) -> ExperimentConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    for section, body in raw.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]" +
                              (f" (line {n})" if (n := _section_line(text, section)) else ""))
        if not isinstance(body, dict):
            raise _err(text, None, section, "expected a table")
        for key in body:
            if key not in _SECTIONS[section]:
                raise _err(text, section, key, "unknown key")

    sys_raw = raw.get("system", {})
    system = SystemSpec(**{_SYSTEM_KEYS[k]: v for k, v in sys_raw.items()})
    try:
        params = system.build()
    except (ModelError, TypeError) as exc:
        key = _guess_key(str(exc), sys_raw)
        raise _err(text, "system", key, str(exc)) from None

    ch_raw = raw.get("channel", {})
    try:
        channel = ChannelModel(tuple(ch_raw.get("boundaries_db", DEFAULT_BOUNDARIES_DB)),
                               float(ch_raw.get("mean_gain", 1.0)))
    except ValueError as exc:
        raise _err(text, "channel", next(iter(ch_raw), "boundaries_db"), str(exc)) from None

    anchor = None
    if "anchor" in raw:
        a = raw["anchor"]
        anchor = (int(a.get("buffer", params.buffer_capacity)), a.get("batteries", list(params.battery_capacity)))

    ln = raw.get("learning", {})
    try:
        schedule = LearningRateSchedule(kind=ln.get("schedule", "geometric"), alpha0=float(ln.get("alpha0", 2.5e-4)),
                                        decay=float(ln.get("decay", 0.9)), period=int(ln.get("period", 100)),
                                        m0=float(ln.get("m0", 100.0)))
    except ValueError as exc:
        raise _err(text, "learning", "schedule", str(exc)) from None
    mode = ln.get("mode", "broadcast")
    if mode not in ("broadcast", "local"):
        raise _err(text, "learning", "mode", f"must be broadcast or local, got {mode!r}")

    ex = raw.get("experiment", {})
    controllers = tuple(ex.get("controllers", ("dltpc", "online-hr", "naive")))
    for c in controllers:
        if c not in CONTROLLERS:
            raise _err(text, "experiment", "controllers", f"unknown controller {c!r}; choose from {CONTROLLERS}")
    policy_file = ex.get("policy_file")
    if "fixed-policy" in controllers and not policy_file:
        raise _err(text, "experiment", "controllers", "fixed-policy needs experiment.policy_file")
    if policy_file and base_dir is not None and not Path(policy_file).is_absolute():
        policy_file = str(base_dir / policy_file)
    horizon = int(ex.get("horizon", 2_000_000))
    warmup = ex.get("warmup")
    if horizon <= 0:
        raise _err(text, "experiment", "horizon", "must be > 0")
    if warmup is not None and not 0 <= int(warmup) < horizon:
        raise _err(text, "experiment", "warmup", f"need 0 <= warmup < horizon ({horizon}), got {warmup}")
    seeds = tuple(int(s) for s in ex.get("seeds", range(1, 11)))
    if not seeds:
        raise _err(text, "experiment", "seeds", "at least one seed is required")

    sweep = {k: list(v) for k, v in raw.get("sweep", {}).items()}
    for k, v in sweep.items():
        if not isinstance(v, list) or not v:
            raise _err(text, "sweep", k, "expected a non-empty list")

    out = raw.get("output", {})
    fmt = out.get("format", "csv")
    if fmt not in ("csv", "json"):
        raise _err(text, "output", "format", f"must be csv or json, got {fmt!r}")

    cfg = ExperimentConfig(
        system=system, channel=channel, anchor=anchor, schedule=schedule, mode=mode,
        init_scale=float(ln.get("init_scale", 0.01)), max_cycle_length=int(ln.get("max_cycle_length", 1_000_000)),
        controllers=controllers, policy_file=policy_file, horizon=horizon,
        warmup=None if warmup is None else int(warmup), seeds=seeds,
        trace_stride=int(ex.get("trace_stride", 1000)), snapshot_every=int(ex.get("snapshot_every", 100)),
        track=tuple(tuple(int(x) for x in t) for t in ex.get("track", [[0, 0]])),
        size_cap=int(ex.get("size_cap", DEFAULT_SIZE_CAP)), sweep=sweep,
        out_path=out.get("path", "out"), out_format=fmt)

    # every sweep point must also be a valid system
    for axis, value in cfg.points():
        try:
            p = cfg.at_point(axis, value).params
            cfg.anchor_for(p).validate(p)
        except (ModelError, ValueError, TypeError) as exc:
            sec, key = ("sweep", axis) if axis else ("anchor", "batteries")
            raise _err(text, sec, key, str(exc)) from None
    return cfg


def _section_line(text: str, section: str) -> int | None:
    for i, line in enumerate(text.splitlines(), 1):
        if re.match(rf"\s*\[{re.escape(section)}\]", line):
            return i
    return None


def _guess_key(msg: str, raw: dict) -> str:
    inverse = {v: k for k, v in _SYSTEM_KEYS.items()}
    for field_name, key in inverse.items():
        if field_name in msg and key in raw:
            return key
    for key in raw:
        if key in msg:
            return key
    if "power level" in msg and "power_levels" in raw:
        return "power_levels"
    return next(iter(raw), "system")


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {p}: {exc.strerror}") from None
    return parse_config(text, p.parent)
