"""Centralized single-relay heuristics and simple controllers for comparison runs."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .env import RelayNetwork, SlotOutcome, feasible_count_table
from .model import ActionProfile, GlobalState, SystemParams, feasible_actions, relayed_snr
from .policy import PolicyParams, sample_from, softmax_prefix
from .stochastic import POLICY, RngStream


@dataclass(frozen=True)
class BaselineContext:
    """Statistics the harvest-rate heuristic may use besides the current state."""

    mean_harvest: tuple[float, ...]
    mean_gain: float = 1.0

    @classmethod
    def from_params(cls, params: SystemParams, mean_gain: float = 1.0) -> "BaselineContext":
        return cls(tuple(params.mean_harvest), mean_gain)


def _floor_to_grid(levels, p: float) -> float:
    below = [a for a in levels if a <= p + 1e-12]
    return max(below) if below else 0.0


def _pick_one(params: SystemParams, state: GlobalState, candidates: list[float]) -> ActionProfile:
    """Only the relay with the largest SNR at its candidate power transmits."""
    snr = [relayed_snr(params, a, ch) for a, ch in zip(candidates, state.channels)]
    best = max(range(len(snr)), key=lambda k: (snr[k], -k))
    powers = [0.0] * params.num_relays
    if snr[best] > 0:
        powers[best] = candidates[best]
    return ActionProfile(tuple(powers))


def naive_select(state: GlobalState, params: SystemParams) -> ActionProfile:
    """Each relay offers all its stored energy (rounded down to the power grid)."""
    cand = [max(feasible_actions(params, k, e)) for k, e in enumerate(state.batteries)]
    return _pick_one(params, state, cand)


def hr_power(ctx: BaselineContext, params: SystemParams, k: int, e_k: int) -> float:
    """Sustainable power: one slot's mean harvest spent over the transmit half-slot."""
    p = ctx.mean_harvest[k] * params.slot_duration / (params.slot_duration / 2.0)
    return _floor_to_grid(feasible_actions(params, k, e_k), p)


def hr_select(state: GlobalState, ctx: BaselineContext, params: SystemParams) -> ActionProfile:
    cand = [hr_power(ctx, params, k, e) for k, e in enumerate(state.batteries)]
    return _pick_one(params, state, cand)


def profile_to_indices(params: SystemParams, profile: ActionProfile) -> list[int]:
    return [params.power_levels[k].index(a) for k, a in enumerate(profile.powers)]


# --- controllers ---------------------------------------------------------------

class _Stateless:
    """Controllers without learning state; state()/load_state() are trivial."""

    def observe(self, env: RelayNetwork, out: SlotOutcome) -> None:
        pass

    def state(self) -> dict:
        return {}

    def load_state(self, st: dict) -> None:
        pass


class NaiveController(_Stateless):
    name = "naive"

    def __init__(self, params: SystemParams):
        self.params = params
        self._memo: dict = {}

    def act(self, env: RelayNetwork) -> list[int]:
        key = (tuple(env.bins), tuple(env.e))
        acts = self._memo.get(key)
        if acts is None:
            acts = self._memo[key] = profile_to_indices(self.params, naive_select(env.global_state(), self.params))
        return list(acts)


class HRController(_Stateless):
    name = "online-hr"

    def __init__(self, params: SystemParams, ctx: BaselineContext | None = None):
        self.params = params
        self.ctx = ctx or BaselineContext.from_params(params)
        self._memo: dict = {}

    def act(self, env: RelayNetwork) -> list[int]:
        key = (tuple(env.bins), tuple(env.e))
        acts = self._memo.get(key)
        if acts is None:
            prof = hr_select(env.global_state(), self.ctx, self.params)
            acts = self._memo[key] = profile_to_indices(self.params, prof)
        return list(acts)


class FixedPolicyController:
    """Samples actions from a frozen Gibbs policy; no learning."""

    name = "fixed-policy"

    def __init__(self, params: SystemParams, policy: PolicyParams, seed: int):
        self.params = params
        self.policy = policy
        self.feas = feasible_count_table(params)
        self.rngs = [RngStream(seed, POLICY, k) for k in range(params.num_relays)]
        self._probs: list[dict[int, np.ndarray]] = [{} for _ in range(params.num_relays)]

    def act(self, env: RelayNetwork) -> list[int]:
        acts = []
        for k, (lay, th) in enumerate(zip(self.policy.layouts, self.policy.tables)):
            l = env.local_index(lay, k)
            p = self._probs[k].get(l)
            if p is None:
                p = self._probs[k][l] = softmax_prefix(th[l], self.feas[k][env.e[k]])
            acts.append(sample_from(p, self.rngs[k].uniform()))
        return acts

    def observe(self, env: RelayNetwork, out: SlotOutcome) -> None:
        pass

    def state(self) -> dict:
        return {"rngs": [r.state() for r in self.rngs]}

    def load_state(self, st: dict) -> None:
        self.rngs = [RngStream.from_state(s) for s in st["rngs"]]


class TableController(_Stateless):
    """Deterministic centralized policy given as a joint action per global state."""

    name = "mdp-optimal"

    def __init__(self, kernel, joint_policy: np.ndarray):
        self.kernel = kernel
        self.joint_policy = np.asarray(joint_policy)

    def act(self, env: RelayNetwork) -> list[int]:
        s = self.kernel.state_index(env.b, env.bins, env.e)
        return self.kernel.actions[self.joint_policy[s]].tolist()


def heuristic_joint_policy(kernel, select) -> np.ndarray:
    """Joint action index chosen by `select(GlobalState) -> ActionProfile` in every state."""
    params = kernel.params
    out = np.zeros(kernel.S, dtype=int)
    memo: dict = {}
    for s in range(kernel.S):
        key = (int(kernel.c_of[s]), int(kernel.e_idx[s]))
        if key not in memo:
            prof = select(kernel.global_state(s))
            memo[key] = kernel.action_index(profile_to_indices(params, prof))
        out[s] = memo[key]
    return out


def hr_stand_in_note() -> str:
    return ("online-hr uses a sustainable-power stand-in: 2*mean_harvest rounded down to the power grid "
            "and capped by the battery; the original closed form is not reproduced")


def silent_under_defaults(params: SystemParams, ctx: BaselineContext) -> bool:
    """True when the stand-in power rounds to zero for every relay at a full battery."""
    return all(math.isclose(hr_power(ctx, params, k, params.battery_capacity[k]), 0.0)
               for k in range(params.num_relays))
