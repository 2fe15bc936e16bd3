import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from doughlab import autodiff as ad
from doughlab import metrics
from helpers import finite_diff, rel_err


def cloud(seed, n):
    return np.random.default_rng(seed).random((n, 2))


def brute_force_emd(a, b):
    """Exhaustive minimum over all assignments (oracle for the oracle)."""
    n = a.shape[0]
    best = np.inf
    for perm in itertools.permutations(range(n)):
        cost = ((a - b[list(perm)]) ** 2).sum(axis=1).mean()
        best = min(best, cost)
    return best


class TestExactEmdOracle:
    def test_identical_sets_zero(self):
        a = cloud(0, 6)
        assert metrics.exact_emd_oracle(a, a) == 0.0

    def test_swapped_points_zero(self):
        a = np.array([[0.1, 0.5], [0.9, 0.5]])
        b = a[::-1].copy()
        assert metrics.exact_emd_oracle(a, b) == pytest.approx(0.0, abs=1e-15)

    def test_matches_exhaustive_on_random_6pt(self):
        for seed in range(5):
            a, b = cloud(seed, 6), cloud(seed + 100, 6)
            assert metrics.exact_emd_oracle(a, b) == pytest.approx(
                brute_force_emd(a, b), rel=1e-12
            )

    def test_scope_errors(self):
        with pytest.raises(metrics.OracleScopeError):
            metrics.exact_emd_oracle(cloud(0, 3), cloud(1, 4))
        with pytest.raises(metrics.OracleScopeError):
            metrics.exact_emd_oracle(cloud(0, 13), cloud(1, 13))


class TestSinkhornDiv:
    def test_self_divergence_tiny(self):
        for seed, n in [(0, 5), (1, 30), (2, 128)]:
            a = cloud(seed, n)
            assert abs(metrics.sinkhorn_div(a, a)) <= 1e-6

    def test_symmetry(self):
        a, b = cloud(3, 20), cloud(4, 25)
        s_ab = metrics.sinkhorn_div(a, b)
        s_ba = metrics.sinkhorn_div(b, a)
        assert abs(s_ab - s_ba) <= 1e-9

    def test_nonnegative(self):
        for seed in range(4):
            a, b = cloud(seed, 12), cloud(seed + 50, 12)
            assert metrics.sinkhorn_div(a, b) >= -1e-12

    def test_translation_invariance_joint(self):
        a, b = cloud(5, 15), cloud(6, 15)
        shift = np.array([0.13, -0.27])
        s1 = metrics.sinkhorn_div(a, b)
        s2 = metrics.sinkhorn_div(a + shift, b + shift)
        assert abs(s1 - s2) <= 1e-9

    def test_annealed_matches_oracle_six_points(self):
        rng = np.random.default_rng(7)
        for _ in range(5):
            a, b = rng.random((6, 2)), rng.random((6, 2))
            exact = metrics.exact_emd_oracle(a, b)
            approx = metrics.sinkhorn_div(a, b, blur=1e-3, iters=300, anneal=True)
            assert abs(approx - exact) <= 0.05 * exact

    def test_gradient_matches_fd(self):
        a, b = cloud(8, 6), cloud(9, 7)

        def tape_grad():
            at = ad.Tensor(a.copy(), requires_grad=True)
            with ad.Tape() as tape:
                div, _ = metrics.sinkhorn_div_t(at, b, blur=0.05, iters=40,
                                                anneal=False)
            tape.backward(div)
            return at.grad

        def f(arr):
            return metrics.sinkhorn_div(arr, b, blur=0.05, iters=40, anneal=False)

        g = tape_grad()
        gfd = finite_diff(f, [a.copy()], h=1e-6)[0]
        assert rel_err(g, gfd) <= 1e-4

    def test_residual_flag(self):
        a, b = cloud(10, 9), cloud(11, 9)
        val, info = metrics.sinkhorn_div(a, b, iters=200, return_info=True)
        assert info["converged"]
        _, info1 = metrics.sinkhorn_div(a, b, blur=1e-4, iters=1, anneal=False,
                                        return_info=True)
        assert info1["residual"] >= info["residual"]
        assert not info1["converged"]

    def test_self_b_shortcut_exact(self):
        a, b = cloud(12, 10), cloud(13, 11)
        full = metrics.sinkhorn_div(a, b, blur=0.02, iters=60)
        pre = metrics.self_ot(b, blur=0.02, iters=60)
        short, _ = metrics.sinkhorn_div_t(ad.Tensor(a), b, blur=0.02, iters=60,
                                          self_b=pre)
        assert float(short.data) == pytest.approx(full, abs=1e-12)


class TestNormalizedImprovement:
    def test_tabulated_cases(self):
        assert metrics.normalized_improvement(1.0, 0.0) == 1.0
        assert metrics.normalized_improvement(1.0, 1.0) == 0.0
        assert metrics.normalized_improvement(1.0, 2.5) == 0.0  # clamped
        assert metrics.normalized_improvement(2.0, 0.5) == 0.75

    def test_d0_nonpositive_rejected(self):
        for d0 in (0.0, -1.0):
            with pytest.raises(metrics.UndefinedScoreError):
                metrics.normalized_improvement(d0, 1.0)

    @given(st.floats(1e-6, 1e3), st.floats(0, 1e3))
    @settings(max_examples=100, deadline=None)
    def test_range_property(self, d0, dt):
        s = metrics.normalized_improvement(d0, dt)
        assert 0.0 <= s <= 1.0


class TestEvaluate:
    def test_do_nothing_policy_scores_zero(self):
        start = cloud(20, 16)
        goals = [metrics.GoalSpec(cloud(s, 16) + 0.1) for s in (21, 22)]
        report = metrics.evaluate(lambda g: (start, start), goals, iters=60)
        for s in report.scores:
            assert s.improvement == 0.0

    def test_perfect_policy_scores_one(self):
        start = cloud(23, 16)
        goal = metrics.GoalSpec(cloud(24, 16) + 0.2)
        report = metrics.evaluate(lambda g: (start, g.points), [goal], iters=120)
        assert report.scores[0].improvement == pytest.approx(1.0, abs=1e-6)

    def test_failures_recorded_not_fatal(self):
        goal = metrics.GoalSpec(cloud(25, 8))

        def policy(g):
            raise RuntimeError("boom")

        report = metrics.evaluate(policy, [goal])
        assert report.scores[0].error != ""

    def test_report_serialization(self, tmp_path):
        goal = metrics.GoalSpec(cloud(26, 8), meta={"id": "g0"})
        report = metrics.evaluate(lambda g: (g.points, g.points * 0.99 + 0.005),
                                  [goal], iters=60)
        assert "mean" in report.to_json()
        out = tmp_path / "report.csv"
        report.to_csv(out)
        assert out.read_text().startswith("goal_id")


class TestGoalSpec:
    def test_csv_round_trip(self, tmp_path):
        g = metrics.GoalSpec(cloud(30, 12))
        p = tmp_path / "goal.csv"
        g.to_csv(p)
        g2 = metrics.GoalSpec.from_csv(p)
        np.testing.assert_allclose(g.points, g2.points)

    def test_weights_normalized(self):
        g = metrics.GoalSpec(cloud(31, 4), weights=np.array([1.0, 2.0, 3.0, 4.0]))
        assert g.weights.sum() == pytest.approx(1.0)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            metrics.GoalSpec(np.zeros((0, 2)))
