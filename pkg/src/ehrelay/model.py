"""Domain types and the deterministic slot arithmetic of the relay network.

Everything here is pure: physical-layer SNR and rate, Lindley buffer update,
battery update, feasibility of power levels and the per-slot reward. Units:
slot duration in ms, bandwidth in Hz, packet size in bits, powers in
energy-packets per ms, arrival/harvest means in packets per ms.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

# slack for floor() on products that are integral in exact arithmetic
_FLOOR_EPS = 1e-9


class ModelError(ValueError):
    """Invalid system parameters or an infeasible action."""


@dataclass(frozen=True)
class SystemParams:
    num_relays: int = 8
    slot_duration: float = 2.0          # tau, ms
    bandwidth: float = 2.5e6            # W, Hz
    bandwidth_factor: float = 1.0       # gamma_L
    capacity_gap: float = 1.0           # Upsilon
    noise_power: float = 1.0            # sigma^2
    source_power: float = 5.0           # a^s, energy-pkt/ms
    packet_size: float = 8192.0         # l, bits (1024 bytes)
    buffer_capacity: int = 9            # N_B, packets
    battery_capacity: tuple[int, ...] = (4,) * 8
    mean_arrival: float = 2.0           # lambda, pkt/ms
    mean_harvest: tuple[float, ...] = (0.25,) * 8
    reward_scale: float = 1.0           # nu
    power_levels: tuple[tuple[float, ...], ...] = ((0.0, 1.0, 2.0, 3.0, 4.0),) * 8
    # derived, filled in __post_init__
    energy_cost: tuple[tuple[int, ...], ...] = field(default=(), compare=False, repr=False)

    def __post_init__(self) -> None:
        K = self.num_relays
        if K < 1:
            raise ModelError("num_relays must be >= 1")
        for name in ("slot_duration", "bandwidth", "noise_power", "packet_size", "reward_scale"):
            if not getattr(self, name) > 0:
                raise ModelError(f"{name} must be > 0")
        if self.capacity_gap < 1:
            raise ModelError("capacity_gap must be >= 1")
        if self.bandwidth_factor <= 0 or self.source_power < 0:
            raise ModelError("bandwidth_factor must be > 0 and source_power >= 0")
        if self.buffer_capacity < 1:
            raise ModelError("buffer_capacity must be >= 1")
        if self.mean_arrival < 0:
            raise ModelError("mean_arrival must be >= 0")
        for name in ("battery_capacity", "mean_harvest", "power_levels"):
            if len(getattr(self, name)) != K:
                raise ModelError(f"{name} needs one entry per relay ({K})")
        if any(int(n) != n or n < 1 for n in self.battery_capacity):
            raise ModelError("battery_capacity entries must be integers >= 1")
        if any(m < 0 for m in self.mean_harvest):
            raise ModelError("mean_harvest entries must be >= 0")
        costs = []
        for k, levels in enumerate(self.power_levels):
            levels = tuple(float(a) for a in levels)
            if 0.0 not in levels:
                raise ModelError(f"power_levels of relay {k} must contain 0")
            if any(b <= a for a, b in zip(levels, levels[1:])):
                raise ModelError(f"power_levels of relay {k} must be strictly ascending")
            spend = []
            for a in levels:
                c = a * self.slot_duration / 2.0
                if abs(c - round(c)) > 1e-9 or c < 0:
                    raise ModelError(
                        f"power level {a} of relay {k} spends {c} energy packets per slot; "
                        "must be a nonnegative integer"
                    )
                spend.append(int(round(c)))
            costs.append(tuple(spend))
        object.__setattr__(self, "power_levels", tuple(tuple(float(a) for a in p) for p in self.power_levels))
        object.__setattr__(self, "battery_capacity", tuple(int(n) for n in self.battery_capacity))
        object.__setattr__(self, "mean_harvest", tuple(float(m) for m in self.mean_harvest))
        object.__setattr__(self, "energy_cost", tuple(costs))

    @classmethod
    def symmetric(
        cls,
        num_relays: int = 8,
        battery_capacity: int = 4,
        mean_harvest: float = 0.25,
        power_levels: Sequence[float] = (0.0, 1.0, 2.0, 3.0, 4.0),
        **kw,
    ) -> "SystemParams":
        """Identical relays; remaining fields as keyword overrides."""
        return cls(
            num_relays=num_relays,
            battery_capacity=(battery_capacity,) * num_relays,
            mean_harvest=(mean_harvest,) * num_relays,
            power_levels=(tuple(power_levels),) * num_relays,
            **kw,
        )

    @property
    def arrivals_per_slot(self) -> float:
        return self.mean_arrival * self.slot_duration

    def harvest_per_slot(self, k: int) -> float:
        return self.mean_harvest[k] * self.slot_duration

    def num_actions(self, k: int) -> int:
        return len(self.power_levels[k])


@dataclass(frozen=True)
class ChannelPair:
    gain_sr: float
    gain_rd: float
    bin_sr: int = 0
    bin_rd: int = 0


@dataclass(frozen=True)
class GlobalState:
    buffer: int
    channels: tuple[ChannelPair, ...]
    batteries: tuple[int, ...]

    def local(self, k: int) -> "LocalState":
        return LocalState(self.buffer, self.channels[k], self.batteries[k])


@dataclass(frozen=True)
class LocalState:
    buffer: int
    channel: ChannelPair
    battery: int


@dataclass(frozen=True)
class ActionProfile:
    powers: tuple[float, ...]


# --- physical layer ---------------------------------------------------------

def relayed_snr(params: SystemParams, a_k: float, chan: ChannelPair) -> float:
    """SNR at the destination for the source signal amplified by one relay."""
    if a_k <= 0 or chan.gain_sr <= 0 or chan.gain_rd <= 0:
        return 0.0
    a_s, s2 = params.source_power, params.noise_power
    num = a_k * a_s * chan.gain_sr * chan.gain_rd
    return num / (s2 * (a_s * chan.gain_sr + a_k * chan.gain_rd + s2))


def snr_value(params: SystemParams, a_k: float, g_sr: float, g_rd: float) -> float:
    return relayed_snr(params, a_k, ChannelPair(g_sr, g_rd))


def rate_from_snr(params: SystemParams, total_snr: float) -> float:
    return params.bandwidth_factor * params.bandwidth * math.log2(1.0 + total_snr / params.capacity_gap)


def coop_rate(params: SystemParams, profile: ActionProfile, channels: Sequence[ChannelPair]) -> float:
    """End-to-end amplify-and-forward service rate in bits/s."""
    total = sum(relayed_snr(params, a, c) for a, c in zip(profile.powers, channels))
    return rate_from_snr(params, total)


def service_packets(params: SystemParams, rate: float) -> int:
    """Whole packets deliverable in the relaying half of the slot."""
    x = (params.slot_duration / 1000.0) * rate / (2.0 * params.packet_size)
    return max(0, math.floor(x + _FLOOR_EPS))


# --- queue / battery --------------------------------------------------------

def buffer_step(params: SystemParams, b: int, served: int, arrivals: int) -> tuple[int, int]:
    """Lindley update with a finite buffer. Returns (next level, dropped packets)."""
    backlog = max(b - served, 0) + arrivals
    nxt = min(backlog, params.buffer_capacity)
    return nxt, backlog - nxt


def energy_spend(params: SystemParams, k: int, a_k: float) -> int:
    try:
        return params.energy_cost[k][params.power_levels[k].index(float(a_k))]
    except ValueError:
        raise ModelError(f"{a_k} is not a power level of relay {k}") from None


def energy_step(params: SystemParams, k: int, e_k: int, a_k: float, harvest: int) -> int:
    spend = energy_spend(params, k, a_k)
    if spend > e_k:
        raise ModelError(f"relay {k}: power {a_k} needs {spend} energy packets, battery holds {e_k}")
    return min(e_k - spend + harvest, params.battery_capacity[k])


def feasible_actions(params: SystemParams, k: int, e_k: int) -> tuple[float, ...]:
    return tuple(a for a, c in zip(params.power_levels[k], params.energy_cost[k]) if c <= e_k)


def num_feasible(params: SystemParams, k: int, e_k: int) -> int:
    # power levels ascend, so the feasible set is a prefix
    return sum(1 for c in params.energy_cost[k] if c <= e_k)


def reward(params: SystemParams, b_next: int) -> float:
    return params.reward_scale * (params.buffer_capacity - b_next)


def snr_table(params: SystemParams, k: int, gains: Sequence[float]) -> np.ndarray:
    """Gamma for relay k over (bin_sr, bin_rd, action index) on quantized gains."""
    nb = len(gains)
    levels = params.power_levels[k]
    out = np.zeros((nb, nb, len(levels)))
    for i in range(nb):
        for j in range(nb):
            for a, p in enumerate(levels):
                out[i, j, a] = snr_value(params, p, gains[i], gains[j])
    return out
