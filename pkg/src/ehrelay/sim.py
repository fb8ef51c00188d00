"""Simulation driver shared by all controllers."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .env import RelayNetwork


@dataclass
class History:
    """Full per-slot record of the global trajectory."""

    buffer: list = field(default_factory=list)
    bins: list = field(default_factory=list)
    batteries: list = field(default_factory=list)
    actions: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    sigma: list = field(default_factory=list)
    r_hat: list = field(default_factory=list)

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: np.array(v) for k, v in vars(self).items()}


@dataclass
class Tally:
    """Running slot counters; occupancy is b_n at the start of each slot.

    The plain counters cover slots from `warmup` on; the total_* counters
    cover every slot.
    """

    warmup: int = 0
    slots: int = 0
    occupancy_sum: int = 0
    arrivals: int = 0
    drops: int = 0
    served: int = 0
    reward_sum: float = 0.0
    total_slots: int = 0
    total_occupancy: int = 0
    total_arrivals: int = 0
    total_drops: int = 0

    def add(self, n: int, b: int, out) -> None:
        self.total_slots += 1
        self.total_occupancy += b
        self.total_arrivals += out.arrivals
        self.total_drops += out.drops
        if n < self.warmup:
            return
        self.slots += 1
        self.occupancy_sum += b
        self.arrivals += out.arrivals
        self.drops += out.drops
        self.served += min(b, out.served)
        self.reward_sum += out.reward

    @property
    def mean_occupancy(self) -> float:
        return self.occupancy_sum / self.slots if self.slots else float("nan")

    @property
    def drop_rate(self) -> float:
        return self.drops / self.arrivals if self.arrivals else 0.0

    @property
    def mean_reward(self) -> float:
        return self.reward_sum / self.slots if self.slots else float("nan")


def simulate(env: RelayNetwork, controller, horizon: int, history: History | None = None,
             tally: Tally | None = None, buffer_trace: list | None = None) -> np.ndarray:
    """Run `horizon` slots; returns the buffer occupancy b_n of each simulated slot."""
    occ = np.empty(horizon, dtype=np.int16)
    for i in range(horizon):
        b = env.b
        occ[i] = b
        if history is not None:
            history.buffer.append(b)
            history.bins.append(list(env.bins))
            history.batteries.append(list(env.e))
            history.r_hat.append(getattr(controller, "r_hat", 0.0))
        n = env.n
        acts = controller.act(env)
        out = env.step(acts)
        controller.observe(env, out)
        if tally is not None:
            tally.add(n, b, out)
        if history is not None:
            history.actions.append(list(acts))
            history.rewards.append(out.reward)
            history.sigma.append(getattr(controller, "_last_sigma", 0))
    if buffer_trace is not None:
        buffer_trace.extend(occ.tolist())
    return occ


class Run:
    """A resumable (environment, controller, counters) triple.

    Every `trace_stride` slots a trace point [slot, b, running mean of b,
    cumulative drops] is appended, all counted from slot 0.
    """

    def __init__(self, env: RelayNetwork, controller, warmup: int = 0, trace_stride: int = 0):
        self.env = env
        self.controller = controller
        self.tally = Tally(warmup=warmup)
        self.trace_stride = trace_stride
        self.trace: list[list] = []

    def advance(self, slots: int) -> None:
        end = self.env.n + slots
        while self.env.n < end:
            step = end - self.env.n
            if self.trace_stride:
                step = min(step, self.trace_stride - self.env.n % self.trace_stride)
            simulate(self.env, self.controller, step, tally=self.tally)
            if self.trace_stride and self.env.n % self.trace_stride == 0:
                t = self.tally
                self.trace.append([self.env.n, self.env.b, t.total_occupancy / t.total_slots, t.total_drops])

    def state(self) -> dict:
        return {"env": self.env.state(), "controller": self.controller.state(), "tally": vars(self.tally),
                "trace": self.trace}

    def load_state(self, st: dict) -> None:
        self.env.load_state(st["env"])
        self.controller.load_state(st["controller"])
        self.tally = Tally(**st["tally"])
        self.trace = [list(x) for x in st["trace"]]

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.state()))

    def restore(self, path) -> None:
        self.load_state(json.loads(Path(path).read_text()))
