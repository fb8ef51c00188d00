"""Per-relay tabular Gibbs policies over the feasible power levels."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .model import SystemParams, num_feasible
from .stochastic import RngStream

THETA_CLIP = 50.0
INIT_SCALE = 0.01
INIT = 5  # stream kind for parameter initialisation


@dataclass(frozen=True)
class LocalLayout:
    """Index layout of one relay's observation space.

    Local states are ordered lexicographically by
    (buffer, sr bin, rd bin, battery).
    """

    buffer_levels: int
    num_bins: int
    battery_levels: int
    num_actions: int

    @classmethod
    def for_relay(cls, params: SystemParams, num_bins: int, k: int) -> "LocalLayout":
        return cls(params.buffer_capacity + 1, num_bins, params.battery_capacity[k] + 1, params.num_actions(k))

    @property
    def num_states(self) -> int:
        return self.buffer_levels * self.num_bins * self.num_bins * self.battery_levels

    @property
    def shape(self) -> tuple[int, int]:
        return (self.num_states, self.num_actions)

    def index(self, b: int, bin_sr: int, bin_rd: int, e: int) -> int:
        return ((b * self.num_bins + bin_sr) * self.num_bins + bin_rd) * self.battery_levels + e

    def decode(self, idx: int) -> tuple[int, int, int, int]:
        idx, e = divmod(idx, self.battery_levels)
        idx, j = divmod(idx, self.num_bins)
        b, i = divmod(idx, self.num_bins)
        return b, i, j, e

    def as_dict(self) -> dict:
        return {"order": ["buffer", "bin_sr", "bin_rd", "battery"], "buffer_levels": self.buffer_levels,
                "num_bins": self.num_bins, "battery_levels": self.battery_levels,
                "num_actions": self.num_actions}


class PolicyParams:
    """The tables theta^k, one (local state x action) array per relay."""

    def __init__(self, layouts: list[LocalLayout], tables: list[np.ndarray] | None = None):
        self.layouts = list(layouts)
        if tables is None:
            tables = [np.zeros(l.shape) for l in self.layouts]
        self.tables = [np.array(t, dtype=float) for t in tables]
        for l, t in zip(self.layouts, self.tables):
            if t.shape != l.shape:
                raise ValueError(f"table shape {t.shape} does not match layout {l.shape}")

    @classmethod
    def for_system(cls, params: SystemParams, num_bins: int) -> "PolicyParams":
        return cls([LocalLayout.for_relay(params, num_bins, k) for k in range(params.num_relays)])

    @classmethod
    def random(cls, params: SystemParams, num_bins: int, seed: int, scale: float = INIT_SCALE) -> "PolicyParams":
        pol = cls.for_system(params, num_bins)
        for k, t in enumerate(pol.tables):
            rng = RngStream(seed, INIT, k)
            t[...] = np.reshape([scale * (2.0 * rng.uniform() - 1.0) for _ in range(t.size)], t.shape)
        return pol

    @property
    def num_relays(self) -> int:
        return len(self.tables)

    @property
    def dim(self) -> int:
        return sum(t.size for t in self.tables)

    def flat(self) -> np.ndarray:
        return np.concatenate([t.ravel() for t in self.tables])

    def offsets(self) -> list[int]:
        out, o = [], 0
        for t in self.tables:
            out.append(o)
            o += t.size
        return out

    def with_flat(self, vec: np.ndarray) -> "PolicyParams":
        tables, o = [], 0
        for l in self.layouts:
            n = l.num_states * l.num_actions
            tables.append(np.asarray(vec[o:o + n], dtype=float).reshape(l.shape))
            o += n
        return PolicyParams(self.layouts, tables)

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.layouts, [t.copy() for t in self.tables])

    def to_json(self) -> str:
        return json.dumps({"layout": [l.as_dict() for l in self.layouts],
                           "theta": [t.ravel().tolist() for t in self.tables]})

    @classmethod
    def from_json(cls, text: str) -> "PolicyParams":
        d = json.loads(text)
        layouts = [LocalLayout(x["buffer_levels"], x["num_bins"], x["battery_levels"], x["num_actions"])
                   for x in d["layout"]]
        return cls(layouts, [np.reshape(v, l.shape) for v, l in zip(d["theta"], layouts)])


def softmax_prefix(row: np.ndarray, n_feasible: int) -> np.ndarray:
    """Gibbs probabilities over the first n_feasible entries; zero beyond."""
    x = row[:n_feasible]
    w = np.exp(x - x.max())
    p = np.zeros(row.shape[0])
    p[:n_feasible] = w / w.sum()
    return p


def action_probabilities(theta_k: np.ndarray, local_index: int, n_feasible: int) -> np.ndarray:
    return softmax_prefix(theta_k[local_index], n_feasible)


def sample_from(probs: np.ndarray, u: float) -> int:
    """Inverse-CDF draw from a probability vector with one uniform."""
    c = 0.0
    last = 0
    for i, p in enumerate(probs):
        if p > 0.0:
            c += p
            last = i
            if u < c:
                return i
    return last


def sample_action(theta_k: np.ndarray, local_index: int, n_feasible: int, rng: RngStream) -> int:
    return sample_from(action_probabilities(theta_k, local_index, n_feasible), rng.uniform())


def score_row(probs: np.ndarray, a: int) -> np.ndarray:
    """d ln u(a|s) / d theta_{s,.}: 1-u(a|s) at a, -u(a'|s) at other feasible a', 0 elsewhere."""
    if probs[a] <= 0.0:
        raise ValueError(f"action {a} is infeasible here")
    psi = -probs
    psi[a] += 1.0
    return psi


def score(theta_k: np.ndarray, local_index: int, a: int, n_feasible: int) -> np.ndarray:
    """Full-table score vector (same shape as theta_k); only one state row is nonzero."""
    out = np.zeros_like(theta_k)
    out[local_index] = score_row(action_probabilities(theta_k, local_index, n_feasible), a)
    return out


def log_prob(theta_k: np.ndarray, local_index: int, a: int, n_feasible: int) -> float:
    x = theta_k[local_index, :n_feasible]
    m = x.max()
    return float(x[a] - m - np.log(np.exp(x - m).sum()))


def feasible_counts(params: SystemParams, k: int) -> list[int]:
    return [num_feasible(params, k, e) for e in range(params.battery_capacity[k] + 1)]


def clip_theta(t: np.ndarray) -> None:
    np.clip(t, -THETA_CLIP, THETA_CLIP, out=t)
