import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bitebandit.bandit_core import Context, EpsilonGreedy, HyperParams, init_policy
from bitebandit.environment import (
    ClassSpec,
    ImputedContext,
    ReplayEnvironment,
    RoundRecord,
    SyntheticEnvironment,
    SyntheticSpec,
    best_actions,
    run_protocol,
)
from bitebandit.metrics import (
    MetricsError,
    RandomProjection,
    baseline_loss,
    class_convergence,
    convergence_point,
    cumulative_loss,
    cumulative_regret,
    failures_before,
    fit_full_feedback,
    reduce_dimension,
)

from oracles import weighted_ridge


def entry(x, dr, label="c"):
    dr = np.asarray(dr, dtype=float)
    return ImputedContext(Context(np.asarray(x, dtype=float), label, label), dr, best_actions(dr))


def rec(t, action, loss=0.0, label="c", pool_index=0, x=(1.0,)):
    return RoundRecord(
        t=t,
        item_id=label,
        class_label=label,
        context=Context(np.asarray(x, dtype=float), label, label),
        pool_index=pool_index,
        action=action,
        propensity=1.0,
        loss=loss,
        success=loss == 0.0,
        cumulative_loss=0.0,
    )


class TestFullFeedback:
    def test_zero_losses(self):
        rng = np.random.default_rng(0)
        pool = [entry(rng.normal(size=3), np.zeros(4)) for _ in range(10)]
        np.testing.assert_array_equal(fit_full_feedback(pool, 1.0).theta_star, np.zeros((4, 3)))

    def test_large_lambda_shrinks(self):
        rng = np.random.default_rng(1)
        pool = [entry(rng.normal(size=3), rng.random(4)) for _ in range(10)]
        assert np.abs(fit_full_feedback(pool, 1e9).theta_star).max() < 1e-7

    @settings(max_examples=40, deadline=None)
    @given(d=st.integers(1, 8), n=st.integers(1, 50), k=st.integers(1, 6), seed=st.integers(0, 10**6))
    def test_matches_oracle(self, d, n, k, seed):
        rng = np.random.default_rng(seed)
        X = rng.normal(size=(n, d))
        L = rng.normal(size=(n, k))
        pool = [entry(x, l) for x, l in zip(X, L)]
        theta = fit_full_feedback(pool, 0.7).theta_star
        for a in range(k):
            np.testing.assert_allclose(theta[a], weighted_ridge(X, L[:, a], np.ones(n), 0.7), atol=1e-8)

    def test_errors(self):
        with pytest.raises(MetricsError):
            fit_full_feedback([], 1.0)
        with pytest.raises(MetricsError):
            fit_full_feedback([entry([1.0], [0.0])], 0.0)


class TestRegret:
    def test_baseline_policy_has_zero_regret(self):
        rng = np.random.default_rng(2)
        pool = [entry(rng.normal(size=2), rng.random(3)) for _ in range(30)]
        base = fit_full_feedback(pool, 1.0)
        trace = [
            rec(i + 1, base.action(p.context.features), float(p.dr_losses[base.action(p.context.features)]),
                pool_index=i, x=p.context.features)
            for i, p in enumerate(pool)
        ]
        np.testing.assert_allclose(cumulative_regret(trace, base, pool).regret, 0.0, atol=0)

    def test_single_round(self):
        pool = [entry([1.0], [0.0, 5.0])]
        base = fit_full_feedback(pool, 1e-6)
        assert base.action([1.0]) == 0
        curve = cumulative_regret([rec(1, 1, loss=1.0)], base, pool)
        np.testing.assert_allclose(curve.regret, [1.0])

    def test_missing_context(self):
        pool = [entry([1.0], [0.0, 1.0])]
        base = fit_full_feedback(pool, 1.0)
        with pytest.raises(MetricsError):
            cumulative_regret([rec(1, 0, pool_index=3)], base, pool)

    def test_non_decreasing_against_true_optimum(self):
        # one constant context per class and expected-loss feedback: the
        # full-feedback fit recovers the class optimum, so every round's
        # regret term is >= 0
        spec = SyntheticSpec(
            tuple(
                ClassSpec(lbl, np.eye(3)[i], 0.0, np.array(r))
                for i, (lbl, r) in enumerate(
                    [("a", [0.9, 0.2, 0.4]), ("b", [0.1, 0.8, 0.3]), ("c", [0.3, 0.3, 0.7])]
                )
            ),
            k=3,
            d=3,
        )
        env = SyntheticEnvironment(spec, np.random.default_rng(0))
        base = fit_full_feedback(env.full_feedback_pool(20, np.random.default_rng(1)), 1e-3)
        trace, _ = run_protocol(
            env, init_policy(HyperParams(d=3, k=3)), EpsilonGreedy(0.2), 300, np.random.default_rng(2)
        )
        # expected-loss version of the policy's losses
        expected = [
            RoundRecord(**{**r.__dict__, "loss": float(env.pool[r.pool_index].dr_losses[r.action])})
            for r in trace
        ]
        regret = cumulative_regret(expected, base, env.pool).regret
        assert np.all(np.diff(regret) >= -1e-12)

    def test_baseline_loss(self):
        pool = [entry([1.0], [0.0, 1.0]), entry([1.0], [0.0, 1.0])]
        assert baseline_loss(fit_full_feedback(pool, 1e-3), pool) == 0.0


class TestCumulative:
    def test_running_sum(self):
        trace = [rec(1, 0, 1.0), rec(2, 0, 0.0), rec(3, 0, 1.0)]
        np.testing.assert_array_equal(cumulative_loss(trace), [1, 1, 2])

    def test_all_success(self):
        np.testing.assert_array_equal(cumulative_loss([rec(t, 0, 0.0) for t in range(1, 6)]), 0.0)

    @settings(max_examples=30, deadline=None)
    @given(st.lists(st.sampled_from([0.0, 1.0]), max_size=60))
    def test_monotone(self, losses):
        curve = cumulative_loss([rec(i + 1, 0, l) for i, l in enumerate(losses)])
        assert np.all(np.diff(curve) >= 0)


class TestConvergence:
    best = {"c": frozenset({1})}

    def test_all_best(self):
        assert convergence_point([rec(t, 1) for t in range(1, 6)], self.best) == 1

    def test_last_outside(self):
        assert convergence_point([rec(1, 1), rec(2, 0)], self.best) is None

    def test_violation_at_seven(self):
        trace = [rec(t, 0 if t == 7 else 1) for t in range(1, 13)]
        assert convergence_point(trace, self.best) == 8

    def test_uncovered_class(self):
        with pytest.raises(MetricsError):
            convergence_point([rec(1, 1, label="zzz")], self.best)

    def test_empty(self):
        assert convergence_point([], self.best) is None

    def test_failures_before(self):
        trace = [rec(1, 0, 1.0), rec(2, 1, 1.0), rec(3, 1, 0.0), rec(4, 1, 1.0)]
        assert failures_before(trace, 3) == {"c": 2}
        assert failures_before(trace, None) == {"c": 3}

    def test_per_class(self):
        best = {"a": frozenset({0}), "b": frozenset({1})}
        trace = [
            rec(1, 1, 1.0, "a"), rec(2, 0, 0.0, "a"), rec(3, 0, 1.0, "b"),
            rec(4, 1, 0.0, "b"), rec(5, 0, 1.0, "a"), rec(6, 0, 1.0, "b"),
        ]
        out = class_convergence(trace, best)
        assert out["a"].point == 2 and out["a"].failures == 1
        assert out["b"].point is None and out["b"].failures == 2


class TestProjection:
    def test_identity(self):
        x = np.arange(5.0)
        np.testing.assert_array_equal(reduce_dimension(x, 5), x)

    def test_deterministic(self):
        x = np.random.default_rng(0).normal(size=40)
        np.testing.assert_array_equal(reduce_dimension(x, 8, seed=3), reduce_dimension(x, 8, seed=3))
        assert not np.array_equal(reduce_dimension(x, 8, seed=3), reduce_dimension(x, 8, seed=4))

    @pytest.mark.parametrize("d", [0, 41])
    def test_out_of_range(self, d):
        with pytest.raises(MetricsError):
            RandomProjection(40, d)

    def test_norms_roughly_preserved(self):
        rng = np.random.default_rng(1)
        X = rng.normal(size=(200, 2048))
        proj = RandomProjection(2048, 512, seed=0)
        ratio = np.linalg.norm(proj(X), axis=1) / np.linalg.norm(X, axis=1)
        assert np.all(np.abs(ratio - 1) < 0.1)

    def test_project_pool_keeps_losses(self):
        pool = [entry(np.ones(6), [0.1, 0.2])]
        out = RandomProjection(6, 2, seed=0).project_pool(pool)
        assert out[0].context.d == 2
        np.testing.assert_array_equal(out[0].dr_losses, [0.1, 0.2])

    def test_environment_transform(self):
        pool = [entry(np.ones(6), [0.0, 1.0])]
        env = ReplayEnvironment(pool, 0.5, np.random.default_rng(0))
        env.set_transform(RandomProjection(6, 3, seed=1))
        assert env.d == 3 and env.reset().d == 3
