"""Slot-level simulator of the source buffer, relay channels and batteries."""
from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass

from .model import ChannelPair, GlobalState, SystemParams, snr_table
from .stochastic import (ARRIVAL, CHANNEL, HARVEST, ChannelModel, PoissonSampler, RngStream,
                         sample_channel_bins)

_MASK64 = (1 << 64) - 1
_FNV_PRIME = 1099511628211


@dataclass
class SlotOutcome:
    served: int          # service capacity in packets
    arrivals: int
    drops: int
    reward: float
    b_next: int


class RelayNetwork:
    """The environment: state s_n = (b_n, channel bins, batteries).

    Per slot: relays act on the current state, the buffer is served and then
    receives the slot's arrivals, batteries pay for the actions and then take
    the harvest, and fresh channels are drawn for the next slot. Exogenous
    draws (channels, arrivals, harvests) come from streams that never depend
    on the actions, so two controllers fed the same seed see the same
    exogenous sequence.
    """

    def __init__(self, params: SystemParams, channel: ChannelModel, seed: int,
                 buffer0: int | None = None, batteries0=None, track_sojourn: bool = False):
        self.params = params
        self.channel = channel
        self.seed = int(seed)
        K = params.num_relays
        self.K = K
        self.nb = channel.num_bins
        self.gains = channel.representative_gains
        self.snr = [snr_table(params, k, self.gains).tolist() for k in range(K)]
        self.cost = [list(c) for c in params.energy_cost]
        self.cap_e = list(params.battery_capacity)
        self.cap_b = params.buffer_capacity
        self.nu = params.reward_scale
        self._rate_coef = (params.slot_duration / 1000.0) * params.bandwidth_factor * params.bandwidth \
            / (2.0 * params.packet_size)
        self.arrival_sampler = PoissonSampler(params.arrivals_per_slot)
        self.harvest_samplers = [PoissonSampler(params.harvest_per_slot(k)) for k in range(K)]
        self.ch_rng = [RngStream(seed, CHANNEL, k) for k in range(K)]
        self.arr_rng = RngStream(seed, ARRIVAL, 0)
        self.hv_rng = [RngStream(seed, HARVEST, k) for k in range(K)]
        self.track_sojourn = track_sojourn
        self.reset(buffer0 if buffer0 is not None else self.cap_b,
                   batteries0 if batteries0 is not None else self.cap_e)

    # --- state ---------------------------------------------------------------
    def reset(self, buffer0: int, batteries0) -> None:
        self.n = 0
        self.b = int(buffer0)
        self.e = [int(x) for x in batteries0]
        if not 0 <= self.b <= self.cap_b or any(not 0 <= x <= c for x, c in zip(self.e, self.cap_e)):
            raise ValueError("initial state out of range")
        self.bins = self._draw_bins()
        self.digest = 14695981039346656037
        # FIFO of [arrival slot, count]; initial content counted as arrived at slot -1
        self.queue = deque([[-1, self.b]]) if self.b else deque()
        self.sojourn_sum = 0
        self.sojourn_count = 0

    def _draw_bins(self) -> list[int]:
        out = []
        for rng in self.ch_rng:
            out.extend(sample_channel_bins(self.channel, rng, 2))
        return out

    def _mix(self, v: int) -> None:
        self.digest = ((self.digest ^ (v & _MASK64)) * _FNV_PRIME) & _MASK64

    def local_index(self, layout, k: int) -> int:
        return ((self.b * self.nb + self.bins[2 * k]) * self.nb + self.bins[2 * k + 1]) \
            * layout.battery_levels + self.e[k]

    def global_state(self) -> GlobalState:
        ch = tuple(ChannelPair(float(self.gains[self.bins[2 * k]]), float(self.gains[self.bins[2 * k + 1]]),
                               self.bins[2 * k], self.bins[2 * k + 1]) for k in range(self.K))
        return GlobalState(self.b, ch, tuple(self.e))

    # --- dynamics ------------------------------------------------------------
    def served_packets(self, actions) -> int:
        total = 0.0
        bins = self.bins
        for k, a in enumerate(actions):
            if a:
                total += self.snr[k][bins[2 * k]][bins[2 * k + 1]][a]
        if total <= 0.0:
            return 0
        x = self._rate_coef * math.log2(1.0 + total / self.params.capacity_gap)
        return max(0, math.floor(x + 1e-9))

    def step(self, actions) -> SlotOutcome:
        """Advance one slot under per-relay action indices."""
        for k, a in enumerate(actions):
            if self.cost[k][a] > self.e[k]:
                raise ValueError(f"relay {k}: action {a} infeasible with battery {self.e[k]}")
        served = self.served_packets(actions)
        A = self.arrival_sampler(self.arr_rng.uniform())
        backlog = max(self.b - served, 0) + A
        b_next = min(backlog, self.cap_b)
        drops = backlog - b_next
        if self.track_sojourn:
            self._fifo(min(self.b, served), A - drops)
        for k, a in enumerate(actions):
            H = self.harvest_samplers[k](self.hv_rng[k].uniform())
            self.e[k] = min(self.e[k] - self.cost[k][a] + H, self.cap_e[k])
            self._mix(H)
        self._mix(A)
        self.b = b_next
        self.n += 1
        self.bins = self._draw_bins()
        for v in self.bins:
            self._mix(v)
        return SlotOutcome(served, A, drops, self.nu * (self.cap_b - b_next), b_next)

    def _fifo(self, n_served: int, admitted: int) -> None:
        q = self.queue
        while n_served > 0:
            head = q[0]
            take = min(head[1], n_served)
            self.sojourn_sum += take * (self.n - head[0])
            self.sojourn_count += take
            n_served -= take
            head[1] -= take
            if head[1] == 0:
                q.popleft()
        if admitted > 0:
            q.append([self.n, admitted])

    # --- checkpointing -------------------------------------------------------
    def state(self) -> dict:
        return {"n": self.n, "b": self.b, "e": list(self.e), "bins": list(self.bins), "digest": self.digest,
                "queue": [list(x) for x in self.queue], "sojourn": [self.sojourn_sum, self.sojourn_count],
                "ch_rng": [r.state() for r in self.ch_rng], "arr_rng": self.arr_rng.state(),
                "hv_rng": [r.state() for r in self.hv_rng]}

    def load_state(self, st: dict) -> None:
        self.n, self.b, self.e, self.bins = st["n"], st["b"], list(st["e"]), list(st["bins"])
        self.digest = st["digest"]
        self.queue = deque([list(x) for x in st["queue"]])
        self.sojourn_sum, self.sojourn_count = st["sojourn"]
        self.ch_rng = [RngStream.from_state(s) for s in st["ch_rng"]]
        self.arr_rng = RngStream.from_state(st["arr_rng"])
        self.hv_rng = [RngStream.from_state(s) for s in st["hv_rng"]]


def feasible_count_table(params: SystemParams) -> list[list[int]]:
    return [[sum(1 for c in params.energy_cost[k] if c <= e) for e in range(params.battery_capacity[k] + 1)]
            for k in range(params.num_relays)]

