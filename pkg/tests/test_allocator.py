"""Knapsack allocator oracles: hand instances, exact-vs-brute sweeps, duality."""

import numpy as np
import pytest

from promolab.allocator import (
    AllocationProblem,
    brute_force,
    build_problem,
    check_feasible,
    load_plan_csv,
    plan_totals,
    solve_exact_dp,
    solve_lagrangian,
)
from promolab.errors import InfeasiblePlanError, InstanceTooLargeError, ValidationError
from promolab.nncore import make_rng


def random_problem(rng, n_max=8, m_max=4):
    n = int(rng.integers(1, n_max + 1))
    m = int(rng.integers(2, m_max + 1))
    value = rng.uniform(-1.0, 5.0, size=(n, m))
    cost = rng.uniform(0.05, 2.0, size=(n, m))
    cost[:, 0] = 0.0
    budget = float(rng.uniform(0.0, 0.6 * cost.sum()))
    return AllocationProblem(value=value, cost=cost, budget=budget)


class TestHandInstances:
    def test_two_customer_exact(self):
        # Only one of the two paid arms fits in the budget; the better one wins.
        problem = AllocationProblem(
            value=np.array([[0.0, 5.0], [0.0, 4.0]]),
            cost=np.array([[0.0, 3.0], [0.0, 2.0]]),
            budget=4.0,
        )
        plan = solve_exact_dp(problem)
        assert tuple(plan.arms) == (1, 0)
        assert plan.total_value == 5.0
        assert plan.total_cost == 3.0

    def test_zero_budget_goes_all_control(self):
        problem = AllocationProblem(
            value=np.array([[1.0, 9.0], [2.0, 9.0]]),
            cost=np.array([[0.0, 1.0], [0.0, 1.0]]),
            budget=0.0,
        )
        for solver in (solve_exact_dp, solve_lagrangian, brute_force):
            plan = solver(problem)
            assert tuple(plan.arms) == (0, 0)
            assert plan.total_cost == 0.0

    def test_loose_budget_takes_argmax(self):
        rng = make_rng(31)
        value = rng.uniform(0.0, 3.0, size=(6, 3))
        cost = rng.uniform(0.1, 1.0, size=(6, 3))
        cost[:, 0] = 0.0
        problem = AllocationProblem(value=value, cost=cost, budget=1e6)
        expected = value.argmax(axis=1)
        for solver in (solve_exact_dp, solve_lagrangian):
            plan = solver(problem)
            np.testing.assert_array_equal(plan.arms, expected)

    def test_tie_breaks_to_lowest_arm(self):
        problem = AllocationProblem(
            value=np.array([[2.0, 2.0, 2.0]]),
            cost=np.array([[0.0, 0.5, 1.0]]),
            budget=10.0,
        )
        assert solve_exact_dp(problem).arms[0] == 0
        assert brute_force(problem).arms[0] == 0

    def test_negative_value_arm_never_forced(self):
        # Control beats a paid arm with negative incremental value.
        problem = AllocationProblem(
            value=np.array([[1.0, -2.0]]),
            cost=np.array([[0.0, 0.5]]),
            budget=5.0,
        )
        assert solve_exact_dp(problem).arms[0] == 0


class TestDpAgainstBruteForce:
    def test_exact_on_random_instances(self):
        rng = make_rng(101)
        for trial in range(300):
            problem = random_problem(rng)
            expected = brute_force(problem)
            got = solve_exact_dp(problem)
            assert got.total_value == pytest.approx(expected.total_value, abs=1e-9), trial
            check_feasible(problem, got.arms)
            # reported totals must match an independent recomputation
            value, cost = plan_totals(problem, got.arms)
            assert got.total_value == pytest.approx(value, abs=1e-12)
            assert got.total_cost == pytest.approx(cost, abs=1e-12)

    def test_dp_handles_cost_rounding(self):
        # costs that are not multiples of the resolution still satisfy the budget
        problem = AllocationProblem(
            value=np.array([[0.0, 1.0], [0.0, 1.0], [0.0, 1.0]]),
            cost=np.array([[0.0, 0.33334], [0.0, 0.33334], [0.0, 0.33334]]),
            budget=1.0,
        )
        plan = solve_exact_dp(problem)
        check_feasible(problem, plan.arms)
        assert plan.total_value >= 2.0


class TestLagrangian:
    def test_feasible_and_within_dual_gap(self):
        rng = make_rng(202)
        for trial in range(120):
            problem = random_problem(rng)
            plan = solve_lagrangian(problem)
            check_feasible(problem, plan.arms)
            assert plan.dual_bound is not None
            assert plan.total_value <= plan.dual_bound + 1e-6
            exact = brute_force(problem)
            assert plan.total_value <= exact.total_value + 1e-9
            # certified gap: optimum is sandwiched between plan value and dual
            assert exact.total_value <= plan.dual_bound + 1e-6

    def test_gap_bounded_by_one_customer_spread(self):
        rng = make_rng(203)
        for trial in range(80):
            problem = random_problem(rng)
            plan = solve_lagrangian(problem)
            exact = brute_force(problem)
            spread = float((problem.value.max(axis=1) - problem.value.min(axis=1)).max())
            assert exact.total_value - plan.total_value <= spread + 1e-9

    def test_matches_exact_on_larger_instances(self):
        # not guaranteed optimal, but should land within the dual gap on
        # instances too big for brute force; costs on a cent grid keep the
        # DP reference exact
        rng = make_rng(204)
        value = rng.uniform(0.0, 4.0, size=(300, 5))
        cost = np.round(rng.uniform(0.02, 1.5, size=(300, 5)), 2)
        cost[:, 0] = 0.0
        problem = AllocationProblem(value=value, cost=cost, budget=40.0)
        plan = solve_lagrangian(problem)
        exact = solve_exact_dp(problem, cost_resolution=0.01)
        assert plan.total_value <= exact.total_value + 1e-9
        assert exact.total_value <= plan.dual_bound + 1e-6
        assert plan.total_value >= 0.98 * exact.total_value

    def test_budget_monotonicity(self):
        rng = make_rng(205)
        value = rng.uniform(0.0, 4.0, size=(200, 4))
        cost = rng.uniform(0.05, 1.2, size=(200, 4))
        cost[:, 0] = 0.0
        values = []
        for budget in [0.0, 5.0, 15.0, 40.0, 100.0]:
            plan = solve_lagrangian(AllocationProblem(value=value, cost=cost, budget=budget))
            values.append(plan.total_value)
        assert np.all(np.diff(values) >= -1e-9)


class TestValidationAndLimits:
    def test_brute_force_size_guard(self):
        value = np.zeros((30, 4))
        cost = np.zeros((30, 4))
        with pytest.raises(InstanceTooLargeError):
            brute_force(AllocationProblem(value=value, cost=cost, budget=1.0))

    def test_requires_zero_cost_arm(self):
        with pytest.raises(ValidationError):
            AllocationProblem(
                value=np.array([[1.0, 2.0]]),
                cost=np.array([[0.5, 1.0]]),
                budget=1.0,
            )

    def test_rejects_negative_cost(self):
        with pytest.raises(ValidationError):
            AllocationProblem(
                value=np.array([[1.0, 2.0]]),
                cost=np.array([[0.0, -1.0]]),
                budget=1.0,
            )

    def test_rejects_nan_value(self):
        with pytest.raises(ValidationError):
            AllocationProblem(
                value=np.array([[np.nan, 2.0]]),
                cost=np.array([[0.0, 1.0]]),
                budget=1.0,
            )

    def test_check_feasible_raises_past_tolerance(self):
        problem = AllocationProblem(
            value=np.array([[0.0, 1.0]]),
            cost=np.array([[0.0, 2.0]]),
            budget=1.0,
        )
        with pytest.raises(InfeasiblePlanError):
            check_feasible(problem, np.array([1]))


class TestBuildProblem:
    def test_expected_cost_is_coupon_times_propensity(self):
        predicted_value = np.array([[1.0, 2.0], [3.0, 4.0]])
        predicted_direct = np.array([[0.1, 0.5], [0.2, 0.8]])
        coupons = np.array([0.0, 2.0])
        problem = build_problem(predicted_value, predicted_direct, coupons, budget=1.0)
        np.testing.assert_allclose(problem.cost, [[0.0, 1.0], [0.0, 1.6]])
        np.testing.assert_array_equal(problem.value, predicted_value)
        assert problem.zero_arm == 0

    def test_requires_zero_coupon(self):
        with pytest.raises(ValidationError):
            build_problem(
                np.ones((2, 2)),
                np.full((2, 2), 0.5),
                np.array([1.0, 2.0]),
                budget=1.0,
            )


class TestPlanCsv:
    def test_round_trip(self, tmp_path):
        problem = AllocationProblem(
            value=np.array([[0.0, 5.0], [0.0, 4.0], [1.0, 0.0]]),
            cost=np.array([[0.0, 3.0], [0.0, 2.0], [0.0, 1.0]]),
            budget=4.0,
        )
        plan = solve_exact_dp(problem)
        path = tmp_path / "plan.csv"
        plan.to_csv(path, customer_id=np.array([10, 11, 12]))
        header = path.read_text().splitlines()[0]
        assert header == "customer_id,chosen_arm"
        ids, arms = load_plan_csv(path)
        np.testing.assert_array_equal(ids, [10, 11, 12])
        np.testing.assert_array_equal(arms, plan.arms)
