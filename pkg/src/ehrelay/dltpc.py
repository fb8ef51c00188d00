"""Distributed learning-theoretic power control.

Each relay keeps a Gibbs table over its local observation and accumulates a
score-weighted differential-reward estimate between visits of the system to
the anchor set {buffer = b*, every battery = e*}. The source raises a one-bit
termination signal at the end of each such renewal cycle; all relays then
take a synchronized gradient step and the average-reward estimate moves by
the cycle's accumulated excess reward.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .env import RelayNetwork, SlotOutcome, feasible_count_table
from .model import SystemParams
from .policy import LocalLayout, PolicyParams, clip_theta, sample_from, score_row, softmax_prefix
from .stochastic import POLICY, RngStream


class AnchorNotReached(RuntimeError):
    pass


class CycleTooLong(RuntimeError):
    pass


@dataclass(frozen=True)
class RecurrentAnchor:
    buffer: int
    batteries: tuple[int, ...]

    @classmethod
    def default(cls, params: SystemParams) -> "RecurrentAnchor":
        """Full source buffer, every battery full."""
        return cls(params.buffer_capacity, tuple(params.battery_capacity))

    def validate(self, params: SystemParams) -> None:
        if not 0 <= self.buffer <= params.buffer_capacity:
            raise ValueError(f"anchor buffer {self.buffer} outside 0..{params.buffer_capacity}")
        if len(self.batteries) != params.num_relays or any(
                not 0 <= e <= c for e, c in zip(self.batteries, params.battery_capacity)):
            raise ValueError(f"anchor batteries {self.batteries} invalid for capacities {params.battery_capacity}")

    def __str__(self) -> str:
        return f"<b*={self.buffer}, e*={list(self.batteries)}>"


@dataclass(frozen=True)
class LearningRateSchedule:
    """Step sizes per renewal cycle.

    geometric: alpha0 * decay ** (m // period)
    harmonic:  alpha0 / (1 + m / m0)   (diminishing, not summable, square summable)
    """

    kind: str = "geometric"
    alpha0: float = 2.5e-4
    decay: float = 0.9
    period: int = 100
    m0: float = 100.0

    def __post_init__(self):
        if self.kind not in ("geometric", "harmonic", "constant"):
            raise ValueError(f"unknown schedule kind {self.kind!r}")
        if self.alpha0 < 0:
            raise ValueError("alpha0 must be >= 0")


def learning_rate(schedule: LearningRateSchedule, m: int) -> float:
    if schedule.kind == "geometric":
        return schedule.alpha0 * schedule.decay ** (m // schedule.period)
    if schedule.kind == "harmonic":
        return schedule.alpha0 / (1.0 + m / schedule.m0)
    return schedule.alpha0


@dataclass(frozen=True)
class SlotBroadcast:
    b_next: int
    sigma: int
    r_hat: float  # the source's average-reward estimate, used in broadcast mode


def detect_cycle_end(reports: Sequence[bool], b_next: int, anchor: RecurrentAnchor) -> int:
    return int(all(reports) and b_next == anchor.buffer)


class RelayLearner:
    """Learner state of one relay: theta^k plus transient z, g."""

    def __init__(self, k: int, params: SystemParams, layout: LocalLayout, theta: np.ndarray, rng: RngStream):
        self.k = k
        self.layout = layout
        self.theta = np.array(theta, dtype=float)
        self.z = np.zeros_like(self.theta)
        self.g = np.zeros_like(self.theta)
        self.rng = rng
        self.nu = params.reward_scale
        self.cap_b = params.buffer_capacity
        # replicated copies, used only when the relay tracks the average reward itself
        self.q_hat = 0.0
        self.r_hat = 0.0
        self._cache: dict[int, np.ndarray] = {}

    def probs(self, l: int, n_feasible: int) -> np.ndarray:
        p = self._cache.get(l)
        if p is None:
            p = self._cache[l] = softmax_prefix(self.theta[l], n_feasible)
        return p

    def slot_update(self, l: int, a: int, probs: np.ndarray, bc: SlotBroadcast, local_mode: bool) -> None:
        r = self.nu * (self.cap_b - bc.b_next)
        r_hat = self.r_hat if local_mode else bc.r_hat
        c = r - r_hat
        if local_mode:
            self.q_hat += c
        self.z[l] += score_row(probs, a)
        self.g += c * self.z

    def cycle_update(self, alpha: float, freeze: bool = False) -> None:
        if not freeze:
            self.theta += alpha * self.g
            clip_theta(self.theta)
            self._cache.clear()
        self.r_hat += alpha * self.q_hat
        self.g[...] = 0.0
        self.z[...] = 0.0
        self.q_hat = 0.0

    def state(self) -> dict:
        return {"theta": self.theta.ravel().tolist(), "z": self.z.ravel().tolist(), "g": self.g.ravel().tolist(),
                "q_hat": self.q_hat, "r_hat": self.r_hat, "rng": self.rng.state()}

    def load_state(self, st: dict) -> None:
        shape = self.theta.shape
        self.theta = np.reshape(st["theta"], shape).astype(float)
        self.z = np.reshape(st["z"], shape).astype(float)
        self.g = np.reshape(st["g"], shape).astype(float)
        self.q_hat, self.r_hat = st["q_hat"], st["r_hat"]
        self.rng = RngStream.from_state(st["rng"])
        self._cache.clear()


class EstimateStats:
    """Running mean and variance of the per-cycle estimates, flattened over relays."""

    def __init__(self, dim: int):
        self.n = 0
        self.total = np.zeros(dim)
        self.total_sq = np.zeros(dim)

    def add(self, vec: np.ndarray) -> None:
        self.n += 1
        self.total += vec
        self.total_sq += vec * vec

    @property
    def mean(self) -> np.ndarray:
        return self.total / self.n

    @property
    def std_error(self) -> np.ndarray:
        var = np.maximum(self.total_sq / self.n - self.mean ** 2, 0.0) * self.n / max(self.n - 1, 1)
        return np.sqrt(var / self.n)


@dataclass
class CycleRecord:
    m: int
    end_slot: int
    length: int
    alpha: float
    r_hat: float
    grad_norm: float


@dataclass
class DLTPCResult:
    policy: PolicyParams
    cycles: list[CycleRecord]
    buffer: np.ndarray
    estimates: list[list[np.ndarray]] = field(default_factory=list)

    @property
    def r_hat(self) -> np.ndarray:
        return np.array([c.r_hat for c in self.cycles])


class DLTPCController:
    """All relays plus the source-side bookkeeping of the learning loop."""

    name = "dltpc"

    def __init__(self, params: SystemParams, policy: PolicyParams, seed: int,
                 anchor: RecurrentAnchor | None = None, schedule: LearningRateSchedule | None = None,
                 r_hat0: float = 0.0, mode: str = "broadcast", freeze: bool = False,
                 max_cycle_length: int = 1_000_000, record_estimates: bool = False,
                 track: Sequence[tuple[int, int]] = (), snapshot_every: int = 1,
                 estimate_stats: bool = False):
        if mode not in ("broadcast", "local"):
            raise ValueError("mode must be 'broadcast' or 'local'")
        self.params = params
        self.anchor = anchor or RecurrentAnchor.default(params)
        self.anchor.validate(params)
        self.schedule = schedule or LearningRateSchedule()
        self.local_mode = mode == "local"
        self.freeze = freeze
        self.max_cycle_length = max_cycle_length
        self.record_estimates = record_estimates
        self.learners = [RelayLearner(k, params, policy.layouts[k], policy.tables[k], RngStream(seed, POLICY, k))
                         for k in range(params.num_relays)]
        for L in self.learners:
            L.r_hat = r_hat0
        self.feas = feasible_count_table(params)
        self.q_hat = 0.0
        self.r_hat = r_hat0
        self.m = 0
        self.cycle_start = 0
        self.cycles: list[CycleRecord] = []
        self.estimates: list[list[np.ndarray]] = []
        self.track = list(track)
        self.snapshot_every = snapshot_every
        self.snapshots: list[tuple[int, list[list[float]]]] = []
        self._pending: list[tuple[int, int, np.ndarray]] = []
        self._last_sigma = 0
        self.stats = EstimateStats(policy.dim) if estimate_stats else None
        # theta in force during each cycle, kept only when estimates are recorded
        self.policy_history: list[PolicyParams] = [self.policy] if record_estimates else []

    @property
    def policy(self) -> PolicyParams:
        return PolicyParams([L.layout for L in self.learners], [L.theta.copy() for L in self.learners])

    def act(self, env: RelayNetwork) -> list[int]:
        acts, pend = [], []
        for k, L in enumerate(self.learners):
            l = env.local_index(L.layout, k)
            p = L.probs(l, self.feas[k][env.e[k]])
            a = sample_from(p, L.rng.uniform())
            acts.append(a)
            pend.append((l, a, p))
        self._pending = pend
        return acts

    def observe(self, env: RelayNetwork, out: SlotOutcome) -> None:
        reports = [e == es for e, es in zip(env.e, self.anchor.batteries)]
        sigma = detect_cycle_end(reports, out.b_next, self.anchor)
        self._last_sigma = sigma
        bc = SlotBroadcast(out.b_next, sigma, self.r_hat)
        self.q_hat += out.reward - self.r_hat
        for L, (l, a, p) in zip(self.learners, self._pending):
            L.slot_update(l, a, p, bc, self.local_mode)
        if sigma:
            self._end_cycle(env.n)
        elif env.n - self.cycle_start > self.max_cycle_length:
            raise CycleTooLong(f"cycle {self.m} exceeded {self.max_cycle_length} slots without visiting "
                               f"anchor {self.anchor}")

    def _end_cycle(self, n: int) -> None:
        alpha = learning_rate(self.schedule, self.m)
        gnorm = math.sqrt(sum(float(np.dot(L.g.ravel(), L.g.ravel())) for L in self.learners))
        if self.record_estimates:
            self.estimates.append([L.g.copy() for L in self.learners])
        if self.stats is not None:
            self.stats.add(np.concatenate([L.g.ravel() for L in self.learners]))
        for L in self.learners:
            L.cycle_update(alpha, self.freeze)
        self.r_hat += alpha * self.q_hat
        self.q_hat = 0.0
        if self.record_estimates:
            self.policy_history.append(self.policy)
        r_hat = self.learners[0].r_hat if self.local_mode else self.r_hat
        self.cycles.append(CycleRecord(self.m, n, n - self.cycle_start, alpha, r_hat, gnorm))
        self.m += 1
        self.cycle_start = n
        if self.track and self.m % self.snapshot_every == 0:
            self.snapshots.append((self.m, [self.probabilities(k, l).tolist() for k, l in self.track]))

    def probabilities(self, k: int, l: int) -> np.ndarray:
        L = self.learners[k]
        return L.probs(l, self.feas[k][L.layout.decode(l)[3]])

    def state(self) -> dict:
        return {"learners": [L.state() for L in self.learners], "q_hat": self.q_hat, "r_hat": self.r_hat,
                "m": self.m, "cycle_start": self.cycle_start,
                "cycles": [list(vars(c).values()) for c in self.cycles],
                "snapshots": self.snapshots,
                "estimates": [[g.ravel().tolist() for g in est] for est in self.estimates]}

    def load_state(self, st: dict) -> None:
        for L, s in zip(self.learners, st["learners"]):
            L.load_state(s)
        self.q_hat, self.r_hat, self.m, self.cycle_start = st["q_hat"], st["r_hat"], st["m"], st["cycle_start"]
        self.cycles = [CycleRecord(*c) for c in st["cycles"]]
        self.snapshots = [(m, p) for m, p in st["snapshots"]]
        self.estimates = [[np.reshape(g, L.theta.shape) for g, L in zip(est, self.learners)]
                          for est in st["estimates"]]


def run_dltpc(env: RelayNetwork, controller: DLTPCController, horizon: int, record_history: bool = False):
    """Run the learning loop for `horizon` slots from the environment's current state."""
    from .sim import History, simulate

    hist = History() if record_history else None
    buf = simulate(env, controller, horizon, history=hist)
    if controller.m == 0:
        raise AnchorNotReached(f"anchor {controller.anchor} never reached within {horizon} slots")
    res = DLTPCResult(controller.policy, controller.cycles, buf, controller.estimates)
    return (res, hist) if record_history else res


# --- offline estimators on a recorded trajectory -----------------------------

def _cycle_bounds(sigma: np.ndarray) -> list[tuple[int, int]]:
    ends = np.flatnonzero(sigma) + 1
    starts = np.concatenate(([0], ends[:-1]))
    return list(zip(starts.tolist(), ends.tolist()))


def local_estimates(theta_per_cycle: Sequence[np.ndarray], feas: Sequence[int], local_idx: np.ndarray,
                    batteries: np.ndarray, actions: np.ndarray, rewards: np.ndarray, r_hat: np.ndarray,
                    sigma: np.ndarray) -> list[np.ndarray]:
    """One relay's cycle estimates from its own local history, z/g recursion order."""
    out = []
    for m, (s, e) in enumerate(_cycle_bounds(sigma)):
        theta = theta_per_cycle[m]
        z = np.zeros_like(theta)
        g = np.zeros_like(theta)
        for n in range(s, e):
            l = int(local_idx[n])
            p = softmax_prefix(theta[l], feas[int(batteries[n])])
            c = rewards[n] - r_hat[n]
            z[l] += score_row(p, int(actions[n]))
            g += c * z
        out.append(g)
    return out


def local_estimates_suffix(theta_per_cycle, feas, local_idx, batteries, actions, rewards, r_hat, sigma):
    """Same estimates summed the other way: each score times its cycle-remaining excess reward."""
    out = []
    for m, (s, e) in enumerate(_cycle_bounds(sigma)):
        theta = theta_per_cycle[m]
        F = np.zeros_like(theta)
        excess = rewards[s:e] - r_hat[s:e]
        tail = np.cumsum(excess[::-1])[::-1]
        for i, n in enumerate(range(s, e)):
            l = int(local_idx[n])
            p = softmax_prefix(theta[l], feas[int(batteries[n])])
            F[l] += score_row(p, int(actions[n])) * tail[i]
        out.append(F)
    return out


def joint_estimates(policies_per_cycle: Sequence[PolicyParams], feas_all, local_idx_all: np.ndarray,
                    batteries_all: np.ndarray, actions_all: np.ndarray, rewards, r_hat, sigma) -> list[np.ndarray]:
    """Cycle estimates of the full gradient direction from the global history.

    The joint score is the gradient of the log of the product policy, i.e. the
    sum over relays of each relay's score placed in its own block.
    """
    out = []
    K = actions_all.shape[1]
    for m, (s, e) in enumerate(_cycle_bounds(sigma)):
        pol = policies_per_cycle[m]
        offs = pol.offsets()
        Z = np.zeros(pol.dim)
        G = np.zeros(pol.dim)
        for n in range(s, e):
            psi = np.zeros(pol.dim)
            for i in range(K):
                th = pol.tables[i]
                l = int(local_idx_all[n, i])
                p = softmax_prefix(th[l], feas_all[i][int(batteries_all[n, i])])
                block = np.zeros(th.shape)
                block[l] = score_row(p, int(actions_all[n, i]))
                psi[offs[i]:offs[i] + th.size] += block.ravel()
            Z += psi
            G += (rewards[n] - r_hat[n]) * Z
        out.append(G)
    return out
