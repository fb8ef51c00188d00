"""Exact-model oracles for small instances.

The controlled kernel factorizes as P(c') * T(b'|s,a) * prod_k T_k(e'_k|e_k,a_k)
and the next channel is independent of everything else. The kernel is stored
in that factored form: a buffer part over (s, a, b'), an energy part over
(e, a, e') and the channel law P(c'). Every quantity that needs the full
s -> s' matrix is computed through the factors; the dense matrix is only
materialized on request.

Global states are ordered (buffer, channel bins, batteries) lexicographically,
with channel bins relay-major (sr_1, rd_1, sr_2, rd_2, ...). Joint actions are
ordered lexicographically over the per-relay action indices.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import connected_components

from .dltpc import RecurrentAnchor
from .model import GlobalState, ChannelPair, SystemParams, rate_from_snr, service_packets, snr_table
from .policy import PolicyParams, softmax_prefix
from .stochastic import ChannelModel, PoissonSampler

DEFAULT_SIZE_CAP = 10_000_000


class KernelTooLarge(ValueError):
    def __init__(self, size: int, cap: int):
        super().__init__(f"state-action space has {size} entries, above the cap of {cap}")
        self.size, self.cap = size, cap


class NotUnichain(RuntimeError):
    pass


class RviDiverged(RuntimeError):
    pass


def clamped_poisson(mean: float, floor: int, top: int) -> np.ndarray:
    """Distribution of min(floor + X, top), X ~ Poisson(mean), on 0..top."""
    out = np.zeros(top + 1)
    if floor >= top:
        out[top] = 1.0
        return out
    pois = PoissonSampler(mean) if mean > 0 else None
    for v in range(floor, top):
        out[v] = pois.pmf(v - floor) if pois else float(v == floor)
    out[top] = max(0.0, 1.0 - out[floor:top].sum())
    return out


def buffer_transition(params: SystemParams, b: int, served: int) -> np.ndarray:
    """P{b'} for b' = 0..N_B; the full buffer collects the arrival tail."""
    return clamped_poisson(params.arrivals_per_slot, max(b - served, 0), params.buffer_capacity)


def energy_transition(params: SystemParams, k: int, e_k: int, a_idx: int) -> np.ndarray:
    """P{e'} for e' = 0..N_E^k after spending action a_idx's energy and harvesting."""
    spend = params.energy_cost[k][a_idx]
    if spend > e_k:
        raise ValueError(f"relay {k}: action {a_idx} infeasible at battery {e_k}")
    return clamped_poisson(params.harvest_per_slot(k), e_k - spend, params.battery_capacity[k])


def kernel_size(params: SystemParams, num_bins: int) -> int:
    """|S| * |A| of the enumerated model."""
    S = (params.buffer_capacity + 1) * num_bins ** (2 * params.num_relays)
    S *= int(np.prod([c + 1 for c in params.battery_capacity]))
    return S * int(np.prod([params.num_actions(k) for k in range(params.num_relays)]))


def check_size(params: SystemParams, num_bins: int, size_cap: int = DEFAULT_SIZE_CAP) -> None:
    n = kernel_size(params, num_bins)
    if n > size_cap:
        raise KernelTooLarge(n, size_cap)


class RelayKernel:
    """Factored controlled transition law of the relay network."""

    def __init__(self, params: SystemParams, channel: ChannelModel, anchor=None,
                 size_cap: int = DEFAULT_SIZE_CAP):
        self.params, self.channel = params, channel
        K = params.num_relays
        nb = channel.num_bins
        self.K, self.nb = K, nb
        self.B = params.buffer_capacity + 1
        self.C = nb ** (2 * K)
        self.e_levels = [c + 1 for c in params.battery_capacity]
        self.E = int(np.prod(self.e_levels))
        self.S = self.B * self.C * self.E
        self.n_act = [params.num_actions(k) for k in range(K)]
        self.A = int(np.prod(self.n_act))
        if self.S * self.A > size_cap:
            raise KernelTooLarge(self.S * self.A, size_cap)

        # enumerations
        s = np.arange(self.S)
        self.b_of = s // (self.C * self.E)
        self.c_of = (s // self.E) % self.C
        self.e_idx = s % self.E
        self.cbins = np.array(list(itertools.product(range(nb), repeat=2 * K)), dtype=int).reshape(self.C, 2 * K)
        self.evals = np.array(list(itertools.product(*[range(n) for n in self.e_levels])), dtype=int).reshape(self.E, K)
        self.actions = np.array(list(itertools.product(*[range(n) for n in self.n_act])), dtype=int).reshape(self.A, K)
        probs = channel.bin_probabilities
        self.Pc = np.prod(probs[self.cbins], axis=1)

        cost = [np.array(params.energy_cost[k]) for k in range(K)]
        spend = np.stack([cost[k][self.actions[:, k]] for k in range(K)], axis=1)          # (A, K)
        self.feasible_e = np.all(spend[None, :, :] <= self.evals[:, None, :], axis=2)     # (E, A)
        self.feasible = self.feasible_e[self.e_idx]                                          # (S, A)

        # service per (channel, joint action)
        gains = channel.representative_gains
        tabs = [snr_table(params, k, gains) for k in range(K)]
        tot = np.zeros((self.C, self.A))
        for k in range(K):
            tot += tabs[k][self.cbins[:, 2 * k][:, None], self.cbins[:, 2 * k + 1][:, None], self.actions[:, k][None, :]]
        self.served_ca = np.vectorize(lambda g: service_packets(params, rate_from_snr(params, g)) if g > 0 else 0)(tot)

        # buffer part, per (s, a, b'): depends on (s, a) only through the backlog (b - served)^+
        rows = np.stack([clamped_poisson(params.arrivals_per_slot, v, params.buffer_capacity)
                         for v in range(self.B)])
        backlog = np.maximum(self.b_of[:, None] - self.served_ca[self.c_of], 0)
        self.Pb = rows[backlog]

        # energy part, per (e, a, e') with e, e' joint battery indices
        self.PE = np.zeros((self.E, self.A, self.E))
        for ei, a in itertools.product(range(self.E), range(self.A)):
            if not self.feasible_e[ei, a]:
                continue
            vec = np.ones(1)
            for k in range(K):
                vec = np.kron(vec, energy_transition(params, k, int(self.evals[ei, k]), int(self.actions[a, k])))
            self.PE[ei, a] = vec

        nu = params.reward_scale
        self.reward_b = nu * (params.buffer_capacity - np.arange(self.B))
        self.reward = self.Pb @ self.reward_b                 # (S, A) expected r(s, a, s')
        self.reward[~self.feasible] = 0.0

        self.anchor = anchor or RecurrentAnchor.default(params)
        self.ref_red = self.reduced_index(self.anchor.buffer, self.anchor.batteries)
        self.ref_state = self.state_index(self.anchor.buffer, [0] * (2 * K), self.anchor.batteries)

    # --- indexing ---------------------------------------------------------------
    @property
    def num_states(self) -> int:
        return self.S

    @property
    def num_actions(self) -> int:
        return self.A

    def battery_index(self, batteries) -> int:
        idx = 0
        for e, n in zip(batteries, self.e_levels):
            idx = idx * n + int(e)
        return idx

    def channel_index(self, bins) -> int:
        idx = 0
        for v in bins:
            idx = idx * self.nb + int(v)
        return idx

    def state_index(self, b: int, bins, batteries) -> int:
        return (int(b) * self.C + self.channel_index(bins)) * self.E + self.battery_index(batteries)

    def reduced_index(self, b: int, batteries) -> int:
        return int(b) * self.E + self.battery_index(batteries)

    def action_index(self, acts) -> int:
        idx = 0
        for a, n in zip(acts, self.n_act):
            idx = idx * n + int(a)
        return idx

    def global_state(self, s: int) -> GlobalState:
        g = self.channel.representative_gains
        bins = self.cbins[self.c_of[s]]
        ch = tuple(ChannelPair(float(g[bins[2 * k]]), float(g[bins[2 * k + 1]]), int(bins[2 * k]), int(bins[2 * k + 1]))
                   for k in range(self.K))
        return GlobalState(int(self.b_of[s]), ch, tuple(int(x) for x in self.evals[self.e_idx[s]]))

    def local_index(self, k: int) -> np.ndarray:
        """Relay k's local-state index for every global state."""
        nb = self.nb
        bins = self.cbins[self.c_of]
        return ((self.b_of * nb + bins[:, 2 * k]) * nb + bins[:, 2 * k + 1]) * self.e_levels[k] \
            + self.evals[self.e_idx, k]

    # --- kernel access ------------------------------------------------------------
    def row(self, s: int, a: int) -> np.ndarray:
        """T(. | s, a) over all global states."""
        if not self.feasible[s, a]:
            raise ValueError(f"action {a} infeasible in state {s}")
        be = np.outer(self.Pb[s, a], self.PE[self.e_idx[s], a])       # (B, E)
        return (be[:, None, :] * self.Pc[None, :, None]).ravel()

    def expected_next(self, V: np.ndarray) -> np.ndarray:
        """sum_{s'} T(s'|s,a) V(s') for all (s, a)."""
        Vbar = np.einsum("c,bce->be", self.Pc, V.reshape(self.B, self.C, self.E))
        return self.expected_next_reduced(Vbar.ravel())

    def expected_next_reduced(self, H: np.ndarray) -> np.ndarray:
        """Same, for a function of (b', e') only."""
        X = np.einsum("xae,be->xab", self.PE, H.reshape(self.B, self.E))    # (E, A, B)
        return np.einsum("sab,sab->sa", self.Pb, X[self.e_idx])

    def dense(self) -> np.ndarray:
        """Full (S, A, S) array; infeasible pairs are zero rows."""
        T = np.zeros((self.S, self.A, self.S))
        for s, a in zip(*np.nonzero(self.feasible)):
            T[s, a] = self.row(s, a)
        return T

    def export(self, path) -> int:
        """Write feasible transitions as 's a s_next prob' lines; returns the line count."""
        n = 0
        with open(path, "w") as fh:
            for s, a in zip(*np.nonzero(self.feasible)):
                row = self.row(int(s), int(a))
                for t in np.flatnonzero(row):
                    fh.write(f"{s} {a} {t} {float(row[t])!r}\n")
                    n += 1
        return n


def build_kernel(params: SystemParams, channel: ChannelModel, anchor=None,
                 size_cap: int = DEFAULT_SIZE_CAP) -> RelayKernel:
    return RelayKernel(params, channel, anchor, size_cap)


# --- policies on the kernel ----------------------------------------------------

def joint_policy_matrix(kernel: RelayKernel, theta: PolicyParams) -> np.ndarray:
    """U[s, a] = prod_k u^k(a_k | s^k) under the factored Gibbs policy."""
    U = np.ones((kernel.S, kernel.A))
    for k in range(kernel.K):
        U *= relay_probabilities(kernel, theta, k)[:, kernel.actions[:, k]]
    return U


def relay_probabilities(kernel: RelayKernel, theta: PolicyParams, k: int) -> np.ndarray:
    """u^k(. | s^k(s)) for every global state s, shape (S, |A^k|)."""
    local = local_policy_table(kernel, theta, k)
    return local[kernel.local_index(k)]


def local_policy_table(kernel: RelayKernel, theta: PolicyParams, k: int) -> np.ndarray:
    p = kernel.params
    lay = theta.layouts[k]
    out = np.zeros(lay.shape)
    for l in range(lay.num_states):
        e = lay.decode(l)[3]
        nf = sum(1 for c in p.energy_cost[k] if c <= e)
        out[l] = softmax_prefix(theta.tables[k][l], nf)
    return out


def deterministic_policy_matrix(kernel: RelayKernel, choose: Callable[[int], int]) -> np.ndarray:
    U = np.zeros((kernel.S, kernel.A))
    for s in range(kernel.S):
        U[s, choose(s)] = 1.0
    return U


@dataclass
class PolicyEvaluation:
    kernel: RelayKernel
    U: np.ndarray              # (S, A) joint action probabilities
    P_reduced: np.ndarray      # (B*E, B*E) chain on (b, e)
    rho: np.ndarray            # stationary law of (b, e)
    pi: np.ndarray             # stationary law of s
    reward: np.ndarray         # (S,) expected one-step reward under U
    average_reward: float

    def next_law(self) -> np.ndarray:
        """(S, B*E) law of (b', e') from every state."""
        k = self.kernel
        M = np.zeros((k.S, k.B, k.E))
        for a in range(k.A):
            M += (self.U[:, a, None] * k.Pb[:, a, :])[:, :, None] * k.PE[k.e_idx, a][:, None, :]
        return M.reshape(k.S, k.B * k.E)

    def transition_matrix(self) -> np.ndarray:
        """P_Theta(s'|s) over the full state space."""
        k = self.kernel
        M = self.next_law().reshape(k.S, k.B, 1, k.E)
        return (M * k.Pc[None, None, :, None]).reshape(k.S, k.S)

    @property
    def mean_occupancy(self) -> float:
        """Stationary mean of the buffer level."""
        k = self.kernel
        return float(self.rho.reshape(k.B, k.E).sum(axis=1) @ np.arange(k.B))

    @property
    def anchor_probability(self) -> float:
        return float(self.rho[self.kernel.ref_red])

    @property
    def mean_cycle_length(self) -> float:
        return 1.0 / self.anchor_probability


def stationary(P: np.ndarray, method: str = "auto", tol: float = 1e-10, max_iter: int = 1_000_000) -> np.ndarray:
    """Stationary law of a unichain row-stochastic matrix."""
    n = P.shape[0]
    graph = csr_matrix(P > 0)
    ncomp, labels = connected_components(graph, directed=True, connection="strong")
    if ncomp > 1:
        # closed classes: components with no edge leaving them
        rows, cols = graph.nonzero()
        leaving = np.zeros(ncomp, dtype=bool)
        leaving[labels[rows][labels[rows] != labels[cols]]] = True
        if (~leaving).sum() > 1:
            raise NotUnichain(f"policy induces {(~leaving).sum()} closed recurrent classes")
    if method == "direct" or (method == "auto" and n <= 5000):
        A = P.T - np.eye(n)
        A[-1, :] = 1.0
        rhs = np.zeros(n)
        rhs[-1] = 1.0
        x = np.linalg.solve(A, rhs)
    else:
        x = np.full(n, 1.0 / n)
        for _ in range(max_iter):
            y = x @ P
            if np.abs(y - x).sum() < tol:
                x = y
                break
            x = y
    x = np.clip(x, 0.0, None)
    return x / x.sum()


def evaluate_policy(kernel: RelayKernel, U: np.ndarray, method: str = "auto") -> PolicyEvaluation:
    k = kernel
    if np.any(U[~k.feasible] > 0):
        raise ValueError("policy puts mass on infeasible actions")
    # channel-averaged action/buffer law per reduced state, then the battery factor
    X = np.einsum("c,bcea,bceaq->beaq", k.Pc, U.reshape(k.B, k.C, k.E, k.A),
                  k.Pb.reshape(k.B, k.C, k.E, k.A, k.B), optimize=True)        # (B, E, A, B')
    P_red = np.einsum("beaq,ear->beqr", X, k.PE, optimize=True).reshape(k.B * k.E, k.B * k.E)
    rho = stationary(P_red, method)
    pi = (rho.reshape(k.B, 1, k.E) * k.Pc[None, :, None]).ravel()
    r = (U * k.reward).sum(axis=1)
    return PolicyEvaluation(k, U, P_red, rho, pi, r, float(pi @ r))


def policy_kernel(kernel: RelayKernel, theta: PolicyParams, method: str = "auto") -> PolicyEvaluation:
    return evaluate_policy(kernel, joint_policy_matrix(kernel, theta), method)


def differential_values(ev: PolicyEvaluation) -> tuple[np.ndarray, np.ndarray]:
    """Solve the average-reward Poisson equation.

    Returns (H, Q): H over reduced states (b, e) is the channel-averaged bias,
    zero at the anchor; Q[s, a] = r(s, a) - R + E[H(b', e') | s, a].
    """
    k = ev.kernel
    n = k.B * k.E
    excess = np.einsum("c,bce->be", k.Pc, (ev.reward - ev.average_reward).reshape(k.B, k.C, k.E)).ravel()
    A = np.eye(n) - ev.P_reduced
    A[k.ref_red, :] = 0.0
    A[k.ref_red, k.ref_red] = 1.0
    rhs = excess.copy()
    rhs[k.ref_red] = 0.0
    H = np.linalg.solve(A, rhs)
    Q = k.reward - ev.average_reward + k.expected_next_reduced(H)
    Q[~k.feasible] = 0.0
    return H, Q


def exact_gradient(kernel: RelayKernel, theta: PolicyParams, ev: PolicyEvaluation | None = None) -> np.ndarray:
    """Gradient of the average reward w.r.t. the concatenated policy tables."""
    ev = ev or policy_kernel(kernel, theta)
    _, Q = differential_values(ev)
    W = ev.pi[:, None] * ev.U * Q
    Wsum = W.sum(axis=1)
    blocks = []
    for k in range(kernel.K):
        lay = theta.layouts[k]
        nA = lay.num_actions
        loc = kernel.local_index(k)
        T1 = np.zeros(lay.num_states * nA)
        np.add.at(T1, loc[:, None] * nA + kernel.actions[None, :, k], W)
        T1 = T1.reshape(lay.shape)
        T2 = np.bincount(loc, weights=Wsum, minlength=lay.num_states)
        blocks.append((T1 - local_policy_table(kernel, theta, k) * T2[:, None]).ravel())
    return np.concatenate(blocks)


def local_gradient(kernel: RelayKernel, theta: PolicyParams, k: int, ev: PolicyEvaluation | None = None) -> np.ndarray:
    """Block k of the gradient via relay k's marginal view.

    Averages the joint differential reward over the other relays' states and
    actions given relay k's local state, then applies relay k's own score.
    """
    ev = ev or policy_kernel(kernel, theta)
    _, Q = differential_values(ev)
    lay = theta.layouts[k]
    loc = kernel.local_index(k)
    others = np.ones((kernel.S, kernel.A))
    for i in range(kernel.K):
        if i != k:
            others *= relay_probabilities(kernel, theta, i)[:, kernel.actions[:, i]]
    pk = np.bincount(loc, weights=ev.pi, minlength=lay.num_states)
    Qk = np.zeros(lay.shape)
    for a in range(lay.num_actions):
        sel = kernel.actions[:, k] == a
        num = np.bincount(loc, weights=ev.pi * (others[:, sel] * Q[:, sel]).sum(axis=1), minlength=lay.num_states)
        Qk[:, a] = np.divide(num, pk, out=np.zeros_like(num), where=pk > 0)
    u = local_policy_table(kernel, theta, k)
    base = (u * Qk).sum(axis=1, keepdims=True)
    return (pk[:, None] * u * (Qk - base)).ravel()


# --- centralized optimum ---------------------------------------------------------

class DenseMDP:
    """Small explicit MDP: T[s, a, s'], expected reward R[s, a]."""

    def __init__(self, T: np.ndarray, R: np.ndarray, feasible: np.ndarray | None = None, ref_state: int = 0):
        self.T = np.asarray(T, dtype=float)
        self.reward = np.asarray(R, dtype=float)
        self.feasible = np.ones(self.reward.shape, dtype=bool) if feasible is None else np.asarray(feasible)
        self.ref_state = ref_state
        self.S, self.A = self.reward.shape

    def expected_next(self, V: np.ndarray) -> np.ndarray:
        return self.T @ V


@dataclass
class RviResult:
    policy: np.ndarray      # joint action index per state
    gain: float             # optimal average reward
    values: np.ndarray
    iterations: int
    span: float


def rvi_solve(mdp, reward: np.ndarray | None = None, tol: float = 1e-9, max_iter: int = 100_000,
              mix: float = 0.5) -> RviResult:
    """Relative value iteration for the average-reward criterion.

    Runs on the aperiodic transform P' = mix*P + (1-mix)*I (same optimal
    policies, gain scaled by mix) and stops when the span of the value
    update drops below tol. Ties go to the lowest action index.
    """
    R = mdp.reward if reward is None else reward
    R = np.where(mdp.feasible, R, -np.inf)
    ref = mdp.ref_state
    V = np.zeros(mdp.S)
    span = math.inf
    for it in range(1, max_iter + 1):
        Qv = R + mdp.expected_next(V)
        TV = Qv.max(axis=1)
        TVm = mix * TV + (1.0 - mix) * V
        diff = TVm - V
        span = float(diff.max() - diff.min())
        V = TVm - TVm[ref]
        if span < tol * mix:
            break
    else:
        raise RviDiverged(f"relative value iteration did not converge in {max_iter} iterations (span {span:.3g})")
    gain = float(diff.max() + diff.min()) / 2.0 / mix
    Qv = R + mdp.expected_next(V)
    best = Qv.max(axis=1, keepdims=True)
    pol = np.argmax(Qv >= best - 1e-12 * np.maximum(1.0, np.abs(best)), axis=1)
    return RviResult(pol, gain, V, it, span)


def little_delay(mean_occupancy: float, arrival_rate: float, drop_rate: float = 0.0) -> tuple[float, float]:
    """(mean delay, mean delay ignoring drops), in the time unit of 1/arrival_rate."""
    if arrival_rate <= 0:
        raise ValueError("arrival rate must be > 0")
    simple = mean_occupancy / arrival_rate
    if drop_rate >= 1.0:
        return (math.inf if mean_occupancy > 0 else 0.0), simple
    return mean_occupancy / ((1.0 - drop_rate) * arrival_rate), simple
