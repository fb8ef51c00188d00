"""Seeded random sources: quantized Rayleigh channels, Poisson data and energy arrivals.

All draws come from per-entity uniform streams and are turned into samples by
inversion, so a (seed, stream id) pair pins the whole sequence.
"""
from __future__ import annotations

import bisect
import hashlib
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import ChannelPair

DEFAULT_BOUNDARIES_DB = (-5.41, -1.59, -0.08, 1.42, 3.18)

# stream kinds; the spawn key of a stream is (kind, entity)
CHANNEL, ARRIVAL, HARVEST, POLICY = 1, 2, 3, 4
_KIND_NAMES = {CHANNEL: "channel", ARRIVAL: "arrival", HARVEST: "harvest", POLICY: "policy"}


@dataclass(frozen=True)
class ChannelModel:
    """Exponential (Rayleigh power) gain quantized into bins delimited in dB.

    Each bin is represented by the conditional mean gain inside it.
    """

    boundaries_db: tuple[float, ...] = DEFAULT_BOUNDARIES_DB
    mean_gain: float = 1.0

    def __post_init__(self):
        b = tuple(float(x) for x in self.boundaries_db)
        if any(y <= x for x, y in zip(b, b[1:])):
            raise ValueError("channel bin boundaries must be strictly increasing")
        if not self.mean_gain > 0:
            raise ValueError("mean_gain must be > 0")
        object.__setattr__(self, "boundaries_db", b)

    @property
    def num_bins(self) -> int:
        return len(self.boundaries_db) + 1

    def _edges(self) -> list[float]:
        """Bin edges in units of the mean gain."""
        inner = [10.0 ** (d / 10.0) / self.mean_gain for d in self.boundaries_db]
        return [0.0] + inner + [math.inf]

    @property
    def bin_probabilities(self) -> np.ndarray:
        x = self._edges()
        return np.array([math.exp(-lo) - (0.0 if math.isinf(hi) else math.exp(-hi))
                         for lo, hi in zip(x, x[1:])])

    @property
    def representative_gains(self) -> np.ndarray:
        x = self._edges()
        out = []
        for lo, hi in zip(x, x[1:]):
            head = (lo + 1.0) * math.exp(-lo)
            if math.isinf(hi):
                num, den = head, math.exp(-lo)
            else:
                num, den = head - (hi + 1.0) * math.exp(-hi), math.exp(-lo) - math.exp(-hi)
            out.append(self.mean_gain * num / den)
        return np.array(out)


def quantize_gain(model: ChannelModel, gain_db: float) -> int:
    """Index of the half-open bin [lo, hi) holding gain_db."""
    return bisect.bisect_right(model.boundaries_db, gain_db)


class RngStream:
    """Buffered uniform stream keyed by (seed, kind, entity).

    Uniforms are drawn in blocks; the state is the generator state at the
    start of the current block plus the read position, which is enough to
    resume bit-exactly.
    """

    BLOCK = 4096

    def __init__(self, seed: int, kind: int, entity: int = 0):
        self.seed, self.kind, self.entity = int(seed), int(kind), int(entity)
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.kind, self.entity))
        self._gen = np.random.Generator(np.random.PCG64(ss))
        self._refill()

    @property
    def stream_id(self) -> str:
        return f"{_KIND_NAMES.get(self.kind, self.kind)}/{self.entity}"

    def _refill(self) -> None:
        self._block_state = self._gen.bit_generator.state
        self._buf = self._gen.random(self.BLOCK).tolist()
        self._pos = 0

    def uniform(self) -> float:
        if self._pos == self.BLOCK:
            self._refill()
        u = self._buf[self._pos]
        self._pos += 1
        return u

    def uniforms(self, n: int) -> list[float]:
        return [self.uniform() for _ in range(n)]

    def state(self) -> dict:
        return {"seed": self.seed, "kind": self.kind, "entity": self.entity,
                "block_state": self._block_state, "pos": self._pos}

    @classmethod
    def from_state(cls, st: dict) -> "RngStream":
        s = cls.__new__(cls)
        s.seed, s.kind, s.entity = st["seed"], st["kind"], st["entity"]
        s._gen = np.random.Generator(np.random.PCG64())
        s._gen.bit_generator.state = st["block_state"]
        s._refill()
        s._pos = st["pos"]
        return s


class PoissonSampler:
    """Poisson(mean) by CDF inversion of a single uniform."""

    def __init__(self, mean: float):
        if mean < 0:
            raise ValueError("Poisson mean must be >= 0")
        self.mean = float(mean)
        self._cdf = []
        p = math.exp(-self.mean)
        c, k = 0.0, 0
        kmax = int(self.mean + 40.0 * math.sqrt(self.mean) + 40)
        # tabulate until the remaining tail is below double resolution
        while c < 1.0 - 1e-16 and k <= kmax:
            c += p
            self._cdf.append(c)
            k += 1
            p *= self.mean / k

    def __call__(self, u: float) -> int:
        k = bisect.bisect_right(self._cdf, u)
        if k < len(self._cdf):
            return k
        return len(self._cdf) - 1

    def pmf(self, k: int) -> float:
        return math.exp(k * math.log(self.mean) - self.mean - math.lgamma(k + 1)) if self.mean > 0 else float(k == 0)


def sample_arrivals(sampler: PoissonSampler, rng: RngStream) -> int:
    return sampler(rng.uniform())


sample_harvest = sample_arrivals


def sample_channel_bins(model: ChannelModel, rng: RngStream, n: int) -> list[int]:
    """n independent quantized gains: exponential draw, then dB bin."""
    out = []
    for _ in range(n):
        u = rng.uniform()
        g = -model.mean_gain * math.log1p(-u)
        out.append(quantize_gain(model, 10.0 * math.log10(g)) if g > 0 else 0)
    return out


def sample_channels(model: ChannelModel, rngs: Sequence[RngStream]):
    """One (sr, rd) pair per relay, each relay from its own stream."""
    reps = model.representative_gains
    pairs = []
    for rng in rngs:
        i, j = sample_channel_bins(model, rng, 2)
        pairs.append(ChannelPair(float(reps[i]), float(reps[j]), i, j))
    return tuple(pairs)


def stream_digest(values) -> str:
    return hashlib.sha256(np.asarray(values, dtype=np.int64).tobytes()).hexdigest()
