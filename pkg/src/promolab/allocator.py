"""Budget-constrained incentive assignment as a multiple-choice knapsack.

One arm must be chosen per customer. Arm j for customer i contributes value
``value[i, j]`` (predicted enduring amount) and expected cost
``cost[i, j] = coupon_value[j] * p_direct[i, j]`` (a coupon is only paid out
when it triggers a purchase). The zero-coupon arm has zero cost, so a plan
always exists at any nonnegative budget.

Three solvers live here:

* ``brute_force`` - enumerates every assignment; only for tiny instances,
  used as the oracle in tests.
* ``solve_exact_dp`` - dynamic program over customers and integer budget
  units; exact when every cost is a multiple of ``cost_resolution``.
* ``solve_lagrangian`` - dualizes the budget constraint and bisects on the
  multiplier. Scales linearly in customers x arms and reports a dual upper
  bound; the final greedy completion step ties the remaining gap to a single
  customer's value spread.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import InfeasiblePlanError, InstanceTooLargeError, ValidationError

BUDGET_TOLERANCE = 1e-9
_BRUTE_FORCE_LIMIT = 10_000_000
# Auto-resolution targets this many DP cells (about 100 MB of choice table).
_DP_CELL_BUDGET = 50_000_000


@dataclass
class AllocationProblem:
    """Per-customer values and expected costs for each arm, plus the budget."""

    value: np.ndarray  # (N, M)
    cost: np.ndarray  # (N, M)
    budget: float
    zero_arm: int = 0

    def __post_init__(self):
        self.value = np.asarray(self.value, dtype=np.float64)
        self.cost = np.asarray(self.cost, dtype=np.float64)
        if self.value.ndim != 2 or self.value.shape != self.cost.shape:
            raise ValidationError(
                f"value and cost must be matching 2-D arrays, got {self.value.shape} and {self.cost.shape}"
            )
        if not (np.all(np.isfinite(self.value)) and np.all(np.isfinite(self.cost))):
            raise ValidationError("values and costs must be finite")
        if np.any(self.cost < 0):
            raise ValidationError("costs must be nonnegative")
        if self.budget < 0:
            raise ValidationError(f"budget must be nonnegative, got {self.budget}")
        if not 0 <= self.zero_arm < self.n_arms:
            raise ValidationError(f"zero_arm {self.zero_arm} out of range")
        if np.any(self.cost[:, self.zero_arm] > BUDGET_TOLERANCE):
            raise ValidationError("the zero-incentive arm must have zero cost for every customer")

    @property
    def n(self) -> int:
        return self.value.shape[0]

    @property
    def n_arms(self) -> int:
        return self.value.shape[1]


@dataclass
class AllocationPlan:
    """A chosen arm per customer with its realized totals."""

    arms: np.ndarray  # (N,)
    total_value: float
    total_cost: float
    dual_bound: float | None = None  # upper bound on the optimum, when the solver has one

    def __post_init__(self):
        self.arms = np.asarray(self.arms, dtype=np.int64)

    def to_csv(self, path, customer_id: np.ndarray | None = None):
        ids = np.arange(len(self.arms)) if customer_id is None else customer_id
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["customer_id", "chosen_arm"])
            for cid, arm in zip(ids, self.arms):
                writer.writerow([int(cid), int(arm)])


def load_plan_csv(path):
    """(customer_id, chosen_arm) arrays from a plan CSV."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != ["customer_id", "chosen_arm"]:
            raise ValidationError(f"unexpected plan header {header}")
        rows = [(int(r[0]), int(r[1])) for r in reader]
    ids = np.array([r[0] for r in rows], dtype=np.int64)
    arms = np.array([r[1] for r in rows], dtype=np.int64)
    return ids, arms


def plan_totals(problem: AllocationProblem, arms: np.ndarray):
    arms = np.asarray(arms, dtype=np.int64)
    if arms.shape != (problem.n,):
        raise ValidationError(f"arms must have length {problem.n}")
    if np.any(arms < 0) or np.any(arms >= problem.n_arms):
        raise ValidationError("arm index out of range")
    rows = np.arange(problem.n)
    return float(problem.value[rows, arms].sum()), float(problem.cost[rows, arms].sum())


def check_feasible(problem: AllocationProblem, arms: np.ndarray) -> float:
    """Total cost of the plan; raises if it exceeds the budget beyond tolerance."""
    _, total_cost = plan_totals(problem, arms)
    if total_cost > problem.budget + BUDGET_TOLERANCE:
        raise InfeasiblePlanError(
            f"plan cost {total_cost:.6g} exceeds budget {problem.budget:.6g}"
        )
    return total_cost


def brute_force(problem: AllocationProblem) -> AllocationPlan:
    """Exact optimum by enumerating all M^N assignments. Tie-break: first in
    lexicographic order, which favors lower arm indices."""
    combos = problem.n_arms ** problem.n
    if combos > _BRUTE_FORCE_LIMIT:
        raise InstanceTooLargeError(
            f"{problem.n_arms}^{problem.n} = {combos} assignments exceed the enumeration limit"
        )
    best_arms = None
    best_value = -np.inf
    arms = np.zeros(problem.n, dtype=np.int64)
    for _ in range(combos):
        value, cost = plan_totals(problem, arms)
        if cost <= problem.budget + BUDGET_TOLERANCE and value > best_value:
            best_value = value
            best_arms = arms.copy()
        # odometer increment over arm indices
        for pos in range(problem.n - 1, -1, -1):
            arms[pos] += 1
            if arms[pos] < problem.n_arms:
                break
            arms[pos] = 0
    if best_arms is None:
        raise InfeasiblePlanError("no assignment fits the budget")
    value, cost = plan_totals(problem, best_arms)
    return AllocationPlan(arms=best_arms, total_value=value, total_cost=cost)


def solve_exact_dp(problem: AllocationProblem, cost_resolution: float | None = 1e-4) -> AllocationPlan:
    """Exact multiple-choice knapsack via dynamic programming.

    Costs are expressed in integer units of ``cost_resolution`` (rounded to
    the nearest unit; the budget is floored). When every cost is a multiple
    of the resolution the answer is exactly optimal. Otherwise rounding can
    shift the achievable set slightly; a repair pass downgrades choices until
    the plan fits the real-valued budget, so the result is always feasible
    and within the rounding slack of optimal. Passing ``None`` picks the
    finest resolution (at least 1e-4) whose table stays within a fixed cell
    budget. The recurrence tracks, for each integer budget b, the best value
    using cost at most b. Memory is O(N * budget units) for backtracking, so
    this is meant for modest instances; use the Lagrangian solver for large
    ones.
    """
    max_spend = float(problem.cost.max(axis=1).sum())
    if problem.budget >= max_spend - BUDGET_TOLERANCE:
        # budget covers any plan; argmax takes the lowest arm index on ties
        arms = problem.value.argmax(axis=1).astype(np.int64)
        value, cost = plan_totals(problem, arms)
        return AllocationPlan(arms=arms, total_value=value, total_cost=cost)
    if cost_resolution is None:
        cost_resolution = max(1e-4, problem.budget * problem.n / _DP_CELL_BUDGET)
    if cost_resolution <= 0:
        raise ValidationError("cost_resolution must be positive")
    cost_units = np.rint(problem.cost / cost_resolution).astype(np.int64)
    budget_units = int(np.floor(problem.budget / cost_resolution + BUDGET_TOLERANCE))
    if np.any(np.abs(cost_units * cost_resolution - problem.cost) > cost_resolution * 0.5 + BUDGET_TOLERANCE):
        raise ValidationError("internal cost rounding error")  # pragma: no cover
    n, m = problem.n, problem.n_arms
    cells = (budget_units + 1) * n
    if cells > 200_000_000:
        raise InstanceTooLargeError(
            f"DP table of {cells} cells is too large; reduce the budget resolution"
        )

    neg_inf = -np.inf
    # best[b]: best value over plans for the customers so far with cost <= b.
    # With no customers that is 0 at every budget level.
    best = np.zeros(budget_units + 1)
    # choice[i, b]: arm taken for customer i when best[b] was achieved
    choice = np.zeros((n, budget_units + 1), dtype=np.int16)

    for i in range(n):
        new_best = np.full(budget_units + 1, neg_inf)
        new_choice = np.zeros(budget_units + 1, dtype=np.int16)
        for j in range(m):
            c = cost_units[i, j]
            if c > budget_units:
                continue
            cand = np.full(budget_units + 1, neg_inf)
            cand[c:] = best[: budget_units + 1 - c] + problem.value[i, j]
            take = cand > new_best
            new_best = np.where(take, cand, new_best)
            new_choice = np.where(take, np.int16(j), new_choice)
        best = new_best
        choice[i] = new_choice
    # lower arm indices win ties because later arms only replace on strict improvement

    b = int(np.argmax(best))
    if not np.isfinite(best[b]):
        raise InfeasiblePlanError("no assignment fits the budget")  # pragma: no cover
    arms = np.empty(n, dtype=np.int64)
    for i in range(n - 1, -1, -1):
        arms[i] = choice[i, b]
        b -= int(cost_units[i, arms[i]])
    arms = _repair_plan(problem, arms)
    value, cost = plan_totals(problem, arms)
    return AllocationPlan(arms=arms, total_value=value, total_cost=cost)


def _repair_plan(problem: AllocationProblem, arms: np.ndarray) -> np.ndarray:
    """Downgrade choices until the plan fits the real-valued budget.

    Cost rounding in the DP can admit a plan whose exact cost overshoots the
    budget by a sliver. Each pass switches the customer whose downgrade loses
    the least value per unit of cost saved; the zero-cost arm guarantees
    termination. No-op for plans that already fit.
    """
    rows = np.arange(problem.n)
    _, cost = plan_totals(problem, arms)
    while cost > problem.budget + BUDGET_TOLERANCE:
        dc = problem.cost[rows, arms][:, None] - problem.cost
        dv = problem.value[rows, arms][:, None] - problem.value
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(dc > 0, dv / dc, np.inf)
        i, j = np.unravel_index(np.argmin(ratio), ratio.shape)
        arms[i] = j
        _, cost = plan_totals(problem, arms)
    return arms


def _lagrangian_argmax(problem: AllocationProblem, lam: float):
    """Per-customer argmax of value - lam * cost (lowest arm index on ties)."""
    scores = problem.value - lam * problem.cost
    arms = np.argmax(scores, axis=1).astype(np.int64)
    return arms


def solve_lagrangian(
    problem: AllocationProblem,
    iterations: int = 100,
    lambda_hi: float = 1.0,
) -> AllocationPlan:
    """Near-optimal plan by bisection on the budget multiplier.

    For a multiplier lam, each customer independently picks the arm
    maximizing value - lam * cost. Cost decreases as lam grows, so bisection
    finds the critical multiplier; the plan kept is the best feasible one
    seen. A final greedy pass walks customers from the spend-heavy side of
    the critical multiplier to the thrifty side in order of value lost per
    unit of cost saved, stopping at the budget, which brings the plan within
    one customer's value spread of the dual bound. The returned
    ``dual_bound`` is a certified upper bound on the optimum.
    """
    if iterations < 1:
        raise ValidationError("iterations must be at least 1")
    rows = np.arange(problem.n)

    def evaluate(lam: float):
        arms = _lagrangian_argmax(problem, lam)
        value = float(problem.value[rows, arms].sum())
        cost = float(problem.cost[rows, arms].sum())
        dual = value - lam * cost + lam * problem.budget
        return arms, value, cost, dual

    # lam = 0: unconstrained spend. If already affordable we are done.
    arms0, value0, cost0, dual0 = evaluate(0.0)
    if cost0 <= problem.budget + BUDGET_TOLERANCE:
        return AllocationPlan(arms=arms0, total_value=value0, total_cost=cost0, dual_bound=value0)

    lo = 0.0
    hi = lambda_hi
    best_dual = dual0
    for _ in range(60):
        arms_hi, value_hi, cost_hi, dual_hi = evaluate(hi)
        best_dual = min(best_dual, dual_hi)
        if cost_hi <= problem.budget + BUDGET_TOLERANCE:
            break
        lo = hi
        hi *= 2.0
    else:
        # costs are still above budget at a huge multiplier; with a zero-cost
        # arm available this cannot happen
        raise InfeasiblePlanError("bisection failed to find a feasible multiplier")

    best_feasible = (arms_hi, value_hi, cost_hi)
    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        arms_m, value_m, cost_m, dual_m = evaluate(mid)
        best_dual = min(best_dual, dual_m)
        if cost_m <= problem.budget + BUDGET_TOLERANCE:
            hi = mid
            if value_m > best_feasible[1]:
                best_feasible = (arms_m, value_m, cost_m)
        else:
            lo = mid

    arms_lo = _lagrangian_argmax(problem, lo)
    arms_hi = _lagrangian_argmax(problem, hi)
    arms, value, cost = (best_feasible[0].copy(), best_feasible[1], best_feasible[2])

    # Greedy completion: starting from the feasible (hi) side, adopt the
    # spendier lo-side choices in decreasing value gained per cost added.
    diff = np.flatnonzero(arms_lo != arms_hi)
    if len(diff) > 0:
        dv = problem.value[diff, arms_lo[diff]] - problem.value[diff, arms_hi[diff]]
        dc = problem.cost[diff, arms_lo[diff]] - problem.cost[diff, arms_hi[diff]]
        useful = (dv > 0) & (dc > 0)
        diff, dv, dc = diff[useful], dv[useful], dc[useful]
        order = np.argsort(-dv / dc, kind="stable")
        cand = arms_hi.copy()
        cand_value = float(problem.value[rows, cand].sum())
        cand_cost = float(problem.cost[rows, cand].sum())
        for idx in order:
            i = diff[idx]
            if cand_cost + dc[idx] <= problem.budget + BUDGET_TOLERANCE:
                cand[i] = arms_lo[i]
                cand_cost += dc[idx]
                cand_value += dv[idx]
        if cand_value > value:
            arms, value, cost = cand, cand_value, cand_cost

    value, cost = plan_totals(problem, arms)  # recompute exactly
    check_feasible(problem, arms)
    return AllocationPlan(arms=arms, total_value=value, total_cost=cost, dual_bound=best_dual)


def build_problem(
    predicted_value: np.ndarray,
    predicted_direct: np.ndarray,
    coupon_values: np.ndarray,
    budget: float,
) -> AllocationProblem:
    """Assemble the knapsack from model outputs and per-arm coupon values."""
    coupon_values = np.asarray(coupon_values, dtype=np.float64)
    zero_arms = np.flatnonzero(coupon_values == 0.0)
    if len(zero_arms) != 1:
        raise ValidationError(f"exactly one zero-coupon arm required, found {len(zero_arms)}")
    cost = np.asarray(predicted_direct, dtype=np.float64) * coupon_values[None, :]
    return AllocationProblem(
        value=np.asarray(predicted_value, dtype=np.float64),
        cost=cost,
        budget=budget,
        zero_arm=int(zero_arms[0]),
    )
