"""Learning loop: per-slot and per-cycle updates, estimator identities, replay."""

import numpy as np
import pytest

from ehrelay.dltpc import (AnchorNotReached, CycleTooLong, DLTPCController, LearningRateSchedule, RecurrentAnchor,
                           RelayLearner, SlotBroadcast, detect_cycle_end, joint_estimates, learning_rate,
                           local_estimates, local_estimates_suffix, run_dltpc)
from ehrelay.env import RelayNetwork, feasible_count_table
from ehrelay.exact import build_kernel, policy_kernel
from ehrelay.model import SystemParams
from ehrelay.policy import LocalLayout, PolicyParams, softmax_prefix, score_row
from ehrelay.stochastic import POLICY, ChannelModel, RngStream


def recorded_run(params, channel, slots, seed=5, scale=1.0, **kw):
    pol = PolicyParams.random(params, channel.num_bins, seed=seed, scale=scale)
    ctrl = DLTPCController(params, pol, seed, record_estimates=True, **kw)
    env = RelayNetwork(params, channel, seed)
    res, hist = run_dltpc(env, ctrl, slots, record_history=True)
    return ctrl, res, hist


def local_view(params, channel, hist):
    """Per-relay local-state indices recomputed from the global history."""
    arr = hist.arrays()
    lay = PolicyParams.for_system(params, channel.num_bins).layouts
    idx = np.zeros((len(arr["buffer"]), params.num_relays), dtype=int)
    for k in range(params.num_relays):
        idx[:, k] = [lay[k].index(b, bins[2 * k], bins[2 * k + 1], e[k])
                     for b, bins, e in zip(arr["buffer"], arr["bins"], arr["batteries"])]
    return arr, idx


class TestSignal:
    def test_all_at_anchor(self):
        anc = RecurrentAnchor(9, (4, 4, 4))
        assert detect_cycle_end([True] * 3, 9, anc) == 1

    def test_one_relay_off(self):
        assert detect_cycle_end([True, False, True], 9, RecurrentAnchor(9, (4, 4, 4))) == 0

    def test_buffer_off(self):
        assert detect_cycle_end([True] * 3, 8, RecurrentAnchor(9, (4, 4, 4))) == 0

    def test_anchor_validation(self):
        p = SystemParams.symmetric(num_relays=2)
        with pytest.raises(ValueError):
            RecurrentAnchor(10, (4, 4)).validate(p)
        with pytest.raises(ValueError):
            RecurrentAnchor(9, (5, 4)).validate(p)
        assert RecurrentAnchor.default(p) == RecurrentAnchor(9, (4, 4))


class TestLearningRate:
    def test_reference_schedule(self):
        s = LearningRateSchedule()
        assert learning_rate(s, 0) == 2.5e-4
        assert learning_rate(s, 99) == 2.5e-4
        assert learning_rate(s, 100) == pytest.approx(2.25e-4, rel=1e-12)
        assert learning_rate(s, 250) == pytest.approx(2.025e-4, rel=1e-12)

    def test_harmonic(self):
        s = LearningRateSchedule("harmonic", alpha0=1.0, m0=10)
        assert learning_rate(s, 0) == 1.0
        assert learning_rate(s, 10) == 0.5
        assert learning_rate(s, 90) == pytest.approx(0.1)

    def test_bad_kind(self):
        with pytest.raises(ValueError):
            LearningRateSchedule("cosine")


def _learner(theta_rows=3, n_act=2):
    p = SystemParams.symmetric(num_relays=1, buffer_capacity=9, battery_capacity=1, power_levels=(0, 1))
    lay = LocalLayout(10, 1, 2, 2)
    return p, RelayLearner(0, p, lay, np.zeros(lay.shape), RngStream(1, POLICY, 0))


class TestSlotUpdate:
    def test_zero_centered_reward(self):
        p, L = _learner()
        probs = softmax_prefix(np.zeros(2), 2)
        # reward 9 - 5 = 4 equals r_hat
        L.slot_update(3, 0, probs, SlotBroadcast(5, 0, 4.0), local_mode=False)
        assert np.all(L.g == 0)
        np.testing.assert_allclose(L.z[3], [0.5, -0.5])

    def test_first_slot(self):
        p, L = _learner()
        probs = softmax_prefix(np.zeros(2), 2)
        L.slot_update(7, 1, probs, SlotBroadcast(0, 0, 4.0), local_mode=False)   # r = 9
        v = score_row(probs, 1)
        np.testing.assert_allclose(L.g[7], 5 * v)
        assert np.all(np.delete(L.g, 7, axis=0) == 0)

    def test_z_before_g(self):
        p, L = _learner()
        probs = softmax_prefix(np.zeros(2), 2)
        L.slot_update(1, 0, probs, SlotBroadcast(9, 0, -1.0), local_mode=False)   # c = 1
        L.slot_update(1, 0, probs, SlotBroadcast(9, 0, -1.0), local_mode=False)
        # g = 1*z1 + 1*z2 with z2 = 2*z1
        np.testing.assert_allclose(L.g[1], 3 * score_row(probs, 0))


class TestCycleUpdate:
    def test_zero_gradient_keeps_theta(self):
        p, L = _learner()
        L.theta[...] = 0.3
        L.cycle_update(0.1)
        assert np.all(L.theta == 0.3)

    def test_step(self):
        p, L = _learner()
        L.theta[2, 1] = 0.5
        L.g[2, 1] = 2.0
        L.cycle_update(0.1)
        assert L.theta[2, 1] == pytest.approx(0.7)
        assert np.all(L.g == 0) and np.all(L.z == 0)

    def test_average_reward_step(self):
        p, L = _learner()
        L.q_hat = 40.0
        L.cycle_update(2.5e-4)
        assert L.r_hat == pytest.approx(0.01)
        assert L.q_hat == 0.0

    def test_clipped(self):
        p, L = _learner()
        L.g[0, 0] = 1e6
        L.cycle_update(1.0)
        assert L.theta[0, 0] == 50.0


class TestEstimatorIdentities:
    def test_recursion_matches_recorded(self, tiny):
        params, channel = tiny
        ctrl, res, hist = recorded_run(params, channel, 3000, schedule=LearningRateSchedule("constant", 0.05))
        arr, idx = local_view(params, channel, hist)
        feas = feasible_count_table(params)
        for k in range(2):
            thetas = [pol.tables[k] for pol in ctrl.policy_history]
            est = local_estimates(thetas, feas[k], idx[:, k], arr["batteries"][:, k], arr["actions"][:, k],
                                  arr["rewards"], arr["r_hat"], arr["sigma"])
            assert len(est) == len(ctrl.estimates) > 50
            for mine, rec in zip(est, ctrl.estimates):
                assert np.array_equal(mine, rec[k])

    def test_summation_orders_agree(self, tiny):
        params, channel = tiny
        ctrl, res, hist = recorded_run(params, channel, 3000, schedule=LearningRateSchedule("constant", 0.05))
        arr, idx = local_view(params, channel, hist)
        feas = feasible_count_table(params)
        for k in range(2):
            thetas = [pol.tables[k] for pol in ctrl.policy_history]
            args = (thetas, feas[k], idx[:, k], arr["batteries"][:, k], arr["actions"][:, k], arr["rewards"],
                    arr["r_hat"], arr["sigma"])
            for a, b in zip(local_estimates(*args), local_estimates_suffix(*args)):
                np.testing.assert_allclose(a, b, atol=1e-9, rtol=0)

    def test_five_slot_trajectory(self):
        """Hand-made 5-slot cycle: both summation orders on the same data."""
        lay = LocalLayout(3, 1, 3, 2)
        rng = np.random.default_rng(3)
        theta = rng.normal(size=lay.shape)
        local_idx = np.array([0, 4, 4, 7, 2])
        batteries = np.array([0, 1, 1, 1, 2])
        actions = np.array([0, 1, 0, 0, 1])
        rewards = np.array([2.0, 0.0, 1.0, 2.0, 2.0])
        r_hat = np.full(5, 1.25)
        sigma = np.array([0, 0, 0, 0, 1])
        feas = [1, 2, 2]
        a = local_estimates([theta], feas, local_idx, batteries, actions, rewards, r_hat, sigma)[0]
        b = local_estimates_suffix([theta], feas, local_idx, batteries, actions, rewards, r_hat, sigma)[0]
        np.testing.assert_allclose(a, b, atol=1e-12)
        assert np.abs(a).sum() > 0

    def test_local_equals_joint_bitwise(self, tiny):
        params, channel = tiny
        ctrl, res, hist = recorded_run(params, channel, 2000, schedule=LearningRateSchedule("constant", 0.05))
        arr, idx = local_view(params, channel, hist)
        feas = feasible_count_table(params)
        joint = joint_estimates(ctrl.policy_history, feas, idx, arr["batteries"], arr["actions"], arr["rewards"],
                                arr["r_hat"], arr["sigma"])
        offs = ctrl.policy.offsets()
        for k in range(2):
            thetas = [pol.tables[k] for pol in ctrl.policy_history]
            loc = local_estimates(thetas, feas[k], idx[:, k], arr["batteries"][:, k], arr["actions"][:, k],
                                  arr["rewards"], arr["r_hat"], arr["sigma"])
            n = thetas[0].size
            for J, L in zip(joint, loc):
                assert np.array_equal(J[offs[k]:offs[k] + n], L.ravel())


class TestRun:
    def test_modes_identical(self, tiny):
        params, channel = tiny
        sched = LearningRateSchedule("constant", 0.05)
        a, ra, _ = recorded_run(params, channel, 4000, schedule=sched, mode="broadcast")
        b, rb, _ = recorded_run(params, channel, 4000, schedule=sched, mode="local")
        assert np.array_equal(ra.policy.flat(), rb.policy.flat())
        assert np.array_equal(ra.buffer, rb.buffer)
        assert [c.r_hat for c in ra.cycles] == [c.r_hat for c in rb.cycles]

    def test_replay(self, tiny):
        params, channel = tiny
        sched = LearningRateSchedule("constant", 0.05)
        _, ra, _ = recorded_run(params, channel, 3000, seed=8, schedule=sched)
        _, rb, _ = recorded_run(params, channel, 3000, seed=8, schedule=sched)
        assert np.array_equal(ra.policy.flat(), rb.policy.flat())
        assert np.array_equal(ra.buffer, rb.buffer)

    def test_checkpoint_resume(self, tiny):
        params, channel = tiny
        pol = PolicyParams.random(params, 2, seed=1)
        sched = LearningRateSchedule("harmonic", 0.1, m0=50)

        def make():
            return RelayNetwork(params, channel, 1), DLTPCController(params, pol, 1, schedule=sched, track=[(0, 5)])

        env, c = make()
        run_dltpc(env, c, 5000)
        env2, c2 = make()
        run_dltpc(env2, c2, 1700)
        st_env, st_c = env2.state(), c2.state()
        env3, c3 = make()
        env3.load_state(st_env)
        c3.load_state(st_c)
        res = run_dltpc(env3, c3, 3300)
        assert np.array_equal(res.policy.flat(), c.policy.flat())
        assert c3.state() == c.state() and env3.state() == env.state()

    def test_anchor_never_reached(self, tiny):
        params, channel = tiny
        ctrl = DLTPCController(params, PolicyParams.for_system(params, 2), 1, anchor=RecurrentAnchor(0, (0, 0)))
        with pytest.raises(AnchorNotReached, match="b\\*=0"):
            run_dltpc(RelayNetwork(params, channel, 1), ctrl, 3)

    def test_cycle_cap(self, tiny):
        params, channel = tiny
        ctrl = DLTPCController(params, PolicyParams.for_system(params, 2), 1, anchor=RecurrentAnchor(0, (0, 0)),
                               max_cycle_length=20)
        with pytest.raises(CycleTooLong):
            run_dltpc(RelayNetwork(params, channel, 1), ctrl, 1000)

    def test_single_action_average_reward(self):
        """One relay that can only stay silent: R-hat tracks the uncontrolled chain."""
        params = SystemParams.symmetric(num_relays=1, battery_capacity=1, power_levels=(0,), buffer_capacity=3,
                                        mean_arrival=0.2, packet_size=1250.0)
        channel = ChannelModel((0.0,))
        exact = policy_kernel(build_kernel(params, channel), PolicyParams.for_system(params, 2)).average_reward
        ctrl = DLTPCController(params, PolicyParams.for_system(params, 2), 3, r_hat0=1.0,
                               schedule=LearningRateSchedule("harmonic", 0.5, m0=20))
        res = run_dltpc(RelayNetwork(params, channel, 3), ctrl, 20_000)
        assert np.all(res.policy.flat() == 0)
        assert res.r_hat[-1] == pytest.approx(exact, abs=0.02)

    def test_frozen_average_reward_fixed_point(self, tiny):
        params, channel = tiny
        pol = PolicyParams.random(params, 2, seed=2, scale=1.0)
        exact = policy_kernel(build_kernel(params, channel), pol).average_reward
        ctrl = DLTPCController(params, pol, 4, freeze=True, schedule=LearningRateSchedule("harmonic", 0.1, m0=100))
        res = run_dltpc(RelayNetwork(params, channel, 4), ctrl, 300_000)
        assert np.array_equal(res.policy.flat(), pol.flat())
        assert res.r_hat[-1] == pytest.approx(exact, rel=0.02)
