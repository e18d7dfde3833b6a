import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bitebandit.bandit_core import Context, EpsilonGreedy, Greedy, HyperParams, LinUCB, init_policy
from bitebandit.environment import (
    ClassSpec,
    EnvError,
    ImputedContext,
    LoggedExample,
    ReplayEnvironment,
    Schedule,
    SyntheticEnvironment,
    SyntheticSpec,
    best_actions,
    herding_estimate,
    impute_dr_losses,
    run_protocol,
)

from oracles import dr_vector


def example(label, action, loss, p=1 / 6, x=(1.0, 0.0), item=None):
    return LoggedExample(item or f"{label}-{action}", label, np.array(x), action, float(loss), p)


def full_log(label, k=3, loss=0.0, x=(1.0, 0.0)):
    return [example(label, a, loss, p=1 / k, x=x, item=f"{label}{a}") for a in range(k)]


def spec_one(rates, center=(1.0, 0.0), noise=0.0, label="apple"):
    return SyntheticSpec((ClassSpec(label, np.array(center), noise, np.array(rates)),), k=len(rates), d=len(center))


def pool_entry(label, dr, x=(1.0,)):
    dr = np.array(dr, dtype=float)
    return ImputedContext(Context(np.array(x), item_id=label, class_label=label), dr, best_actions(dr))


class TestHerding:
    def test_class_action_mean(self):
        data = full_log("banana") + [example("banana", 2, 1), example("banana", 2, 1)]
        est = herding_estimate(data)
        assert est["banana"][2] == pytest.approx(2 / 3)
        assert est["banana"][0] == 0.0

    def test_all_zero(self):
        est = herding_estimate(full_log("a") + full_log("b"))
        for v in est.values():
            np.testing.assert_array_equal(v, 0.0)

    def test_empty_cell_listed(self):
        data = full_log("apple") + [example("grape", 0, 1)]
        with pytest.raises(EnvError, match=r"grape.*1"):
            herding_estimate(data, k=3)

    def test_empty_dataset(self):
        with pytest.raises(EnvError):
            herding_estimate([])

    def test_monte_carlo_recovers_rates(self):
        rates = np.array([0.9, 0.1, 0.5, 0.3, 0.7, 0.2])
        spec = spec_one(rates)
        log = spec.sample_log(10_000, np.random.default_rng(0))
        est = herding_estimate(log)["apple"]
        np.testing.assert_allclose(1 - est, rates, atol=0.02)


class TestImputation:
    def test_logged_action_correction(self):
        data = full_log("apple", k=6)
        data.append(example("apple", 1, 1.0))
        herding = {"apple": np.array([0.0, 0.5, 0.0, 0.0, 0.0, 0.0])}
        pool = impute_dr_losses(data, herding)
        assert pool[-1].dr_losses[1] == pytest.approx(3.5)

    def test_other_actions_are_class_means(self):
        herding = {"apple": np.array([0.1, 0.5, 0.3])}
        [item] = impute_dr_losses([example("apple", 1, 1.0, p=1 / 3)], herding)
        assert item.dr_losses[0] == 0.1 and item.dr_losses[2] == 0.3

    def test_missing_class(self):
        with pytest.raises(EnvError, match="grape"):
            impute_dr_losses([example("grape", 0, 1.0)], {"apple": np.zeros(6)})

    def test_best_set_from_class_means(self):
        herding = {"apple": np.array([0.2, 0.1, 0.1])}
        [item] = impute_dr_losses([example("apple", 0, 1.0, p=1 / 3)], herding)
        assert item.best_set == frozenset({1, 2})

    @settings(max_examples=50, deadline=None)
    @given(
        means=st.lists(st.floats(0, 1), min_size=2, max_size=6),
        data=st.data(),
    )
    def test_matches_formula(self, means, data):
        k = len(means)
        a = data.draw(st.integers(0, k - 1))
        loss = data.draw(st.sampled_from([0.0, 1.0]))
        p = data.draw(st.floats(0.01, 1.0))
        [item] = impute_dr_losses([example("c", a, loss, p=p)], {"c": np.array(means)})
        np.testing.assert_allclose(item.dr_losses, dr_vector(means, a, loss, p), rtol=1e-12, atol=1e-12)

    def test_unbiased_single_log(self):
        # fixed herding means; average over the logging randomness only
        rng = np.random.default_rng(4)
        true = np.array([0.2, 0.8, 0.5])
        m = np.array([0.4, 0.4, 0.4])
        n = 60_000
        acts = rng.integers(3, size=n)
        losses = (rng.random(n) < true[acts]).astype(float)
        data = [example("c", int(a), l, p=1 / 3) for a, l in zip(acts, losses)]
        est = np.mean([it.dr_losses for it in impute_dr_losses(data, {"c": m})], axis=0)
        np.testing.assert_allclose(est, true, atol=0.02)


class TestReplay:
    def test_threshold(self):
        env = ReplayEnvironment([pool_entry("a", [3.5, 0.0])], 0.5, np.random.default_rng(0))
        env.reset()
        assert env.step(0).success is False
        assert env.step(1).success is True

    def test_loss_is_dr_value(self):
        env = ReplayEnvironment([pool_entry("a", [3.5, 0.0])], 0.5, np.random.default_rng(0))
        env.reset()
        assert env.step(0).loss == 3.5

    def test_deterministic_contexts(self):
        pool = [pool_entry(f"c{i}", [0.0, 1.0], x=(float(i),)) for i in range(20)]

        def seq(seed):
            env = ReplayEnvironment(pool, 0.5, np.random.default_rng(seed))
            env.reset()
            ids = []
            for _ in range(30):
                env.step(0)
                ids.append(env.context.item_id)
            return ids

        assert seq(3) == seq(3)
        assert seq(3) != seq(4)

    def test_empty_pool(self):
        with pytest.raises(EnvError):
            ReplayEnvironment([], 0.5)

    def test_failure_keeps_item(self):
        pool = [pool_entry(f"c{i}", [1.0, 0.0], x=(float(i),)) for i in range(5)]
        env = ReplayEnvironment(pool, 0.5, np.random.default_rng(0))
        first = env.reset()
        env.step(0)
        assert env.context is first

    def test_class_restricted_draw(self):
        pool = [pool_entry("a", [0.0]), pool_entry("b", [0.0]), pool_entry("b", [0.0])]
        env = ReplayEnvironment(pool, 0.5, np.random.default_rng(0))
        for _ in range(20):
            assert env.reset("b").class_label == "b"
        with pytest.raises(EnvError):
            env.reset("zzz")


class TestSynthetic:
    def test_noiseless_contexts_equal_center(self):
        env = SyntheticEnvironment(spec_one([0.5, 0.5], center=(0.3, 0.7)), np.random.default_rng(0))
        for _ in range(10):
            np.testing.assert_array_equal(env.reset().features, [0.3, 0.7])

    def test_certain_success(self):
        env = SyntheticEnvironment(spec_one([0.0, 1.0]), np.random.default_rng(0))
        env.reset()
        assert all(env.step(1).success for _ in range(100))

    def test_empirical_rate_within_three_sigma(self):
        rate, n = 0.3, 10_000
        env = SyntheticEnvironment(spec_one([rate, 0.5]), np.random.default_rng(1))
        env.reset()
        wins = sum(env.step(0).success for _ in range(n))
        assert abs(wins - rate * n) <= 3 * np.sqrt(n * rate * (1 - rate))

    def test_pool_records_expected_losses(self):
        env = SyntheticEnvironment(spec_one([0.2, 0.9]), np.random.default_rng(0))
        env.reset()
        np.testing.assert_allclose(env.pool[env.context_index].dr_losses, [0.8, 0.1])
        assert env.best_set("apple") == frozenset({1})

    def test_noise_zero_allowed_negative_rejected(self):
        with pytest.raises(EnvError):
            ClassSpec("a", np.zeros(2), -1.0, np.array([0.5]))

    def test_spec_dict_round_trip(self):
        spec = SyntheticSpec(
            (
                ClassSpec("a", np.array([1.0, 0.0]), 0.1, np.array([0.2, 0.8])),
                ClassSpec("b", np.array([0.0, 1.0]), 0.0, np.array([0.6, 0.4])),
            ),
            k=2,
            d=2,
        )
        back = SyntheticSpec.from_dict(spec.to_dict())
        assert back.to_dict() == spec.to_dict()

    def test_rates_out_of_range(self):
        with pytest.raises(EnvError):
            ClassSpec("a", np.zeros(2), 0.0, np.array([1.5]))


def three_class_spec():
    classes = tuple(
        ClassSpec(label, np.eye(3)[i], 0.0, np.array(r))
        for i, (label, r) in enumerate(
            [("apple", [0.9, 0.1, 0.1]), ("banana", [0.1, 0.9, 0.1]), ("grape", [0.1, 0.1, 0.9])]
        )
    )
    return SyntheticSpec(classes, k=3, d=3)


class TestProtocol:
    def test_single_round_fresh_greedy(self):
        env = SyntheticEnvironment(spec_one([0.5, 0.5]), np.random.default_rng(0))
        trace, _ = run_protocol(env, init_policy(HyperParams(d=2, k=2)), Greedy(), 1, np.random.default_rng(0))
        assert len(trace) == 1 and trace[0].action == 0 and trace[0].propensity == 1.0

    def test_always_success_draws_new_items(self):
        pool = [pool_entry("a", [0.0, 0.0], x=(1.0,))]
        env = ReplayEnvironment(pool, 0.5, np.random.default_rng(0))
        trace, _ = run_protocol(env, init_policy(HyperParams(d=1, k=2)), Greedy(), 25, np.random.default_rng(0))
        assert len({r.item_id for r in trace}) == 25

    def test_context_persists_until_success(self):
        env = SyntheticEnvironment(three_class_spec(), np.random.default_rng(2))
        trace, _ = run_protocol(
            env, init_policy(HyperParams(d=3, k=3)), EpsilonGreedy(0.3), 200, np.random.default_rng(2)
        )
        for prev, cur in zip(trace, trace[1:]):
            if prev.success:
                assert cur.item_id != prev.item_id
            else:
                assert cur.item_id == prev.item_id
                np.testing.assert_array_equal(cur.context.features, prev.context.features)

    def test_cycle_advances_on_success(self):
        env = SyntheticEnvironment(three_class_spec(), np.random.default_rng(0))
        sched = Schedule("cycle", classes=("apple", "banana", "grape"))
        trace, _ = run_protocol(
            env, init_policy(HyperParams(d=3, k=3)), Greedy(), 60, np.random.default_rng(0), sched
        )
        order = ["apple", "banana", "grape"]
        pos = 0
        for r in trace:
            assert r.class_label == order[pos % 3]
            pos += r.success

    def test_segments_force_switch(self):
        env = SyntheticEnvironment(three_class_spec(), np.random.default_rng(0))
        sched = Schedule("segments", segments=(("banana", 20), ("apple", 5), ("banana", 5)))
        trace, _ = run_protocol(
            env, init_policy(HyperParams(d=3, k=3)), Greedy(), 30, np.random.default_rng(0), sched
        )
        labels = [r.class_label for r in trace]
        assert labels == ["banana"] * 20 + ["apple"] * 5 + ["banana"] * 5

    def test_propensity_is_mixture_probability(self):
        env = SyntheticEnvironment(three_class_spec(), np.random.default_rng(0))
        trace, _ = run_protocol(
            env, init_policy(HyperParams(d=3, k=3)), EpsilonGreedy(0.3), 100, np.random.default_rng(0)
        )
        assert {round(r.propensity, 12) for r in trace} <= {round(0.1, 12), round(0.8, 12)}

    def test_linucb_records_scores(self):
        env = SyntheticEnvironment(three_class_spec(), np.random.default_rng(0))
        trace, _ = run_protocol(
            env, init_policy(HyperParams(d=3, k=3)), LinUCB(0.01), 5, np.random.default_rng(0)
        )
        assert trace[0].widths is not None and trace[0].widths.shape == (3,)

    def test_deterministic(self):
        def run():
            env = SyntheticEnvironment(three_class_spec(), np.random.default_rng(5))
            trace, pol = run_protocol(
                env, init_policy(HyperParams(d=3, k=3)), EpsilonGreedy(0.2), 80, np.random.default_rng(6)
            )
            return [(r.action, r.loss, r.item_id) for r in trace], pol.thetas

        (a, ta), (b, tb) = run(), run()
        assert a == b
        np.testing.assert_array_equal(ta, tb)

    def test_rejects_bad_T_and_dims(self):
        env = SyntheticEnvironment(three_class_spec(), np.random.default_rng(0))
        with pytest.raises(EnvError):
            run_protocol(env, init_policy(HyperParams(d=3, k=3)), Greedy(), 0, np.random.default_rng(0))
        with pytest.raises(EnvError):
            run_protocol(env, init_policy(HyperParams(d=2, k=3)), Greedy(), 5, np.random.default_rng(0))

    def test_unknown_schedule_class(self):
        env = SyntheticEnvironment(three_class_spec(), np.random.default_rng(0))
        with pytest.raises(EnvError, match="kiwi"):
            run_protocol(
                env,
                init_policy(HyperParams(d=3, k=3)),
                Greedy(),
                5,
                np.random.default_rng(0),
                Schedule("cycle", classes=("kiwi",)),
            )

    def test_warm_start_continues_learning(self):
        env = SyntheticEnvironment(three_class_spec(), np.random.default_rng(0))
        pol = init_policy(HyperParams(d=3, k=3))
        _, pol = run_protocol(env, pol, Greedy(), 10, np.random.default_rng(0))
        n = pol.rounds_learned
        _, pol = run_protocol(env, pol, Greedy(), 10, np.random.default_rng(1))
        assert pol.rounds_learned == n + 10
