"""Tests for optimal-transport distances and the empirical violation rate."""

import itertools

import numpy as np
import pytest

from meanflow.mdp import AugmentedMdp, BarrierSpec, SafetySpec, discretize
from meanflow.metrics import (
    MetricsError,
    violation_rate,
    w1,
    w2,
    w_p_1d,
    w_p_assignment,
)
from meanflow.policy import ParticleEnsemble, make_features


class TestWp1d:
    def test_single_pair(self):
        for p in (1.0, 2.0, 3.0):
            assert w_p_1d([0.0], [1.0], p) == pytest.approx(1.0, abs=1e-12)

    def test_identical_multisets(self):
        xs = np.array([3.0, -1.0, 2.0])
        assert w_p_1d(xs, xs[::-1], 2.0) == 0.0

    def test_hand_example(self):
        val = w_p_1d([0.0, 1.0], [0.0, 2.0], 2.0)
        assert val == pytest.approx(np.sqrt(0.5), abs=1e-12)

    def test_unequal_counts_rejected(self):
        with pytest.raises(MetricsError):
            w_p_1d([0.0, 1.0], [0.0], 2.0)


class TestWpAssignment:
    def test_matches_1d_sorting(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            xs = rng.normal(size=(12, 1))
            ys = rng.normal(size=(12, 1))
            for p in (1.0, 2.0):
                res = w_p_assignment(xs, ys, p)
                assert res.cost == pytest.approx(w_p_1d(xs, ys, p), abs=1e-12)

    def test_translation(self):
        rng = np.random.default_rng(1)
        xs = rng.normal(size=(20, 3))
        v = np.array([0.5, -1.0, 2.0])
        res = w_p_assignment(xs, xs + v, 2.0)
        assert res.cost == pytest.approx(np.linalg.norm(v), abs=1e-10)

    def test_brute_force_small(self):
        rng = np.random.default_rng(2)
        for trial in range(20):
            n = 2 + trial % 5
            xs = rng.normal(size=(n, 2))
            ys = rng.normal(size=(n, 2))
            res = w_p_assignment(xs, ys, 2.0)
            diff = xs[:, None, :] - ys[None, :, :]
            cm = np.linalg.norm(diff, axis=2) ** 2
            best = min(
                cm[np.arange(n), list(perm)].mean()
                for perm in itertools.permutations(range(n))
            )
            assert res.cost == pytest.approx(best**0.5, abs=1e-12)

    def test_plan_is_valid_permutation(self):
        rng = np.random.default_rng(3)
        xs = rng.normal(size=(15, 2))
        ys = rng.normal(size=(15, 2))
        res = w_p_assignment(xs, ys, 2.0)
        assert sorted(res.plan.tolist()) == list(range(15))

    def test_beats_random_permutations(self):
        rng = np.random.default_rng(4)
        xs = rng.normal(size=(30, 2))
        ys = rng.normal(size=(30, 2))
        res = w_p_assignment(xs, ys, 2.0)
        diff = xs[:, None, :] - ys[None, :, :]
        cm = np.linalg.norm(diff, axis=2) ** 2
        opt = cm[np.arange(30), res.plan].mean()
        for _ in range(100):
            perm = rng.permutation(30)
            assert opt <= cm[np.arange(30), perm].mean() + 1e-12

    def test_triangle_inequality(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            a, b, c = rng.normal(size=(3, 8, 2))
            for p in (1.0, 2.0):
                ab = w_p_assignment(a, b, p).cost
                bc = w_p_assignment(b, c, p).cost
                ac = w_p_assignment(a, c, p).cost
                assert ac <= ab + bc + 1e-9

    def test_scale_equivariance(self):
        rng = np.random.default_rng(6)
        xs = rng.normal(size=(10, 2))
        ys = rng.normal(size=(10, 2))
        base = w_p_assignment(xs, ys, 2.0).cost
        for lam in (-2.0, 0.5, 3.0):
            scaled = w_p_assignment(lam * xs, lam * ys, 2.0).cost
            assert scaled == pytest.approx(abs(lam) * base, abs=1e-10)

    def test_symmetry(self):
        rng = np.random.default_rng(7)
        xs = rng.normal(size=(9, 2))
        ys = rng.normal(size=(9, 2))
        assert w_p_assignment(xs, ys, 2.0).cost == pytest.approx(
            w_p_assignment(ys, xs, 2.0).cost, abs=1e-12
        )

    def test_size_cap(self):
        xs = np.zeros((1025, 1))
        with pytest.raises(MetricsError):
            w_p_assignment(xs, xs, 2.0)

    def test_w1_w2_dispatch(self):
        rng = np.random.default_rng(8)
        xs = rng.normal(size=(7, 1))
        ys = rng.normal(size=(7, 1))
        assert w1(xs, ys) == pytest.approx(w_p_1d(xs, ys, 1.0), abs=1e-12)
        assert w2(xs, ys) == pytest.approx(w_p_1d(xs, ys, 2.0), abs=1e-12)


def two_state_env(g_on_action_1=0.45, c=1.0):
    P = np.zeros((2, 2, 2))
    P[0, 0, 0] = 1.0
    P[0, 1, 1] = 1.0
    P[1, 0, 1] = 1.0
    P[1, 1, 0] = 1.0
    g = np.zeros((1, 2, 2))
    g[0, :, 1] = g_on_action_1
    safety = SafetySpec(g=g, b=np.array([1.0]), beta_g=np.array([0.9]))
    mdp = AugmentedMdp(
        P=P,
        u=np.array([[0.2, 1.0], [0.5, 0.8]]),
        rho=np.array([1.0, 1.0]),
        beta=0.9,
        safety=safety,
        barrier=BarrierSpec(c=c, m_bar=50.0),
        p0=np.array([1.0, 0.0]),
    )
    return discretize(mdp)


class TestViolationRate:
    def test_zero_cost_never_violates(self):
        dmdp = two_state_env(g_on_action_1=0.0)
        fm = make_features(
            "random-fourier", n_states=dmdp.n_states, n_actions=2, d=2, seed=0
        )
        ens = ParticleEnsemble(np.random.default_rng(0).normal(size=(8, 2)))
        rep = violation_rate(ens, fm, dmdp, n_rollouts=500, horizon=50, rng=1)
        assert rep.rate == 0.0

    def test_forced_violation(self):
        dmdp = two_state_env(g_on_action_1=2.0)

        class ForceAction1:
            n_states, n_actions, d = dmdp.n_states, 2, 1
            sup_norm, grad_sup_norm, hess_sup_norm, smoothness = np.inf, 0.0, 0.0, 2

            def psi_batch(self, xs):
                out = np.zeros((xs.shape[0], self.n_states, 2))
                out[:, :, 1] = 60.0
                return out

        ens = ParticleEnsemble(np.zeros((2, 1)))
        rep = violation_rate(ens, ForceAction1(), dmdp, n_rollouts=200, horizon=5, rng=2)
        assert rep.rate == 1.0

    def test_seed_determinism_and_half_width(self):
        dmdp = two_state_env()
        fm = make_features(
            "random-fourier", n_states=dmdp.n_states, n_actions=2, d=2, seed=3
        )
        ens = ParticleEnsemble(np.random.default_rng(5).normal(size=(8, 2)))
        a = violation_rate(ens, fm, dmdp, n_rollouts=400, horizon=30, rng=7)
        b = violation_rate(ens, fm, dmdp, n_rollouts=400, horizon=30, rng=7)
        assert a.rate == b.rate
        expected = 1.96 * np.sqrt(max(a.rate * (1 - a.rate), 1e-12) / 400)
        assert a.half_width == pytest.approx(expected, rel=1e-9)
        assert 0.0 <= a.upper <= 1.0

    def test_matches_scalar_rollout_oracle(self):
        # lockstep vectorized bookkeeping must agree with the scalar rollout
        # path on the same exact-budget process
        from meanflow.mdp import rollout
        from meanflow.policy import policy_eval

        dmdp = two_state_env(g_on_action_1=0.6)
        fm = make_features(
            "random-fourier", n_states=dmdp.n_states, n_actions=2, d=2, seed=4
        )
        ens = ParticleEnsemble(np.random.default_rng(6).normal(size=(6, 2)))
        pe = policy_eval(ens, fm, dmdp.rho)

        def sampler(aug_state, rng):
            idx = dmdp.aug_index(aug_state.s, aug_state.z)
            return int(rng.choice(2, p=pe.masses[idx]))

        hits = 0
        n = 300
        for seed in range(n):
            traj = rollout(dmdp.base, sampler, horizon=25, rng_seed=seed)
            hits += traj.violated
        scalar_rate = hits / n
        rep = violation_rate(ens, fm, dmdp, n_rollouts=20_000, horizon=25, rng=8)
        # both estimate the same Bernoulli mean; allow joint CLT slack
        scalar_hw = 1.96 * np.sqrt(scalar_rate * (1 - scalar_rate) / n)
        assert abs(rep.rate - scalar_rate) <= scalar_hw + rep.half_width
