"""Offline policy evaluation on randomized-trial logs, plus budget sweeps.

The estimator rests on the trial's randomization: a plan is scored using only
the customers whose logged arm matches the plan's choice. For arm j, with
``policy_count_j`` customers assigned j by the plan and ``matched_count_j``
of them logged under j, the arm's expected total is the matched outcome sum
scaled by ``policy_count_j / matched_count_j``; the plan's value is the sum
over arms. Because assignment is independent of features, each matched group
is a uniform subsample of the plan group and the estimate is unbiased
whenever every used arm has at least one match. Substituting realized
incentive cost for the outcome gives the cost estimator, and the lift in
purchase amount (LPA) is the value estimate minus the value of the
all-control plan.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .allocator import AllocationPlan, build_problem, solve_lagrangian
from .errors import EstimationError, ValidationError
from .metrics import MetricReport, metric_report
from .model import ModelConfig, PredictionTriple, predict, predict_matrix, train_model
from .nncore import make_rng

logger = logging.getLogger("promolab.evaluator")

# arms matched by fewer logged customers than this give noisy scale factors
SMALL_MATCH_WARNING = 30

_STREAM_FOLDS = 100
_STREAM_FOLD_TRAIN = 200


@dataclass
class ArmEstimate:
    """One arm's contribution to a plan estimate."""

    arm: int
    policy_count: int
    matched_count: int
    matched_total: float
    estimate: float


@dataclass
class PolicyEstimate:
    """Estimated expected total over the whole plan, with per-arm detail."""

    total: float
    arms: list  # list[ArmEstimate]


def _grouped_estimate(
    plan_arms: np.ndarray,
    trial_arms: np.ndarray,
    values: np.ndarray,
    n_arms: int,
) -> PolicyEstimate:
    plan_arms = np.asarray(plan_arms, dtype=np.int64)
    trial_arms = np.asarray(trial_arms, dtype=np.int64)
    values = np.asarray(values, dtype=np.float64)
    n = len(plan_arms)
    if trial_arms.shape != (n,) or values.shape != (n,):
        raise ValidationError("plan, trial arms and values must have equal length")
    if n == 0:
        raise ValidationError("cannot estimate from an empty log")
    for name, arr in (("plan", plan_arms), ("trial", trial_arms)):
        if np.any(arr < 0) or np.any(arr >= n_arms):
            raise ValidationError(f"{name} arm index out of range [0, {n_arms})")

    match = plan_arms == trial_arms
    policy_count = np.bincount(plan_arms, minlength=n_arms)
    matched_count = np.bincount(plan_arms[match], minlength=n_arms)
    matched_total = np.bincount(plan_arms[match], weights=values[match], minlength=n_arms)

    unmatched = np.flatnonzero((policy_count > 0) & (matched_count == 0))
    if len(unmatched) > 0:
        raise EstimationError(
            f"plan uses arms {unmatched.tolist()} with no matching trial records; "
            "the estimate is undefined"
        )
    small = np.flatnonzero((matched_count > 0) & (matched_count < SMALL_MATCH_WARNING))
    if len(small) > 0:
        logger.warning(
            "arms %s matched by fewer than %d trial records; estimates will be noisy",
            small.tolist(),
            SMALL_MATCH_WARNING,
        )

    arms = []
    total = 0.0
    for j in range(n_arms):
        if policy_count[j] == 0:
            continue
        scale = policy_count[j] / matched_count[j]
        est = matched_total[j] * scale
        arms.append(
            ArmEstimate(
                arm=j,
                policy_count=int(policy_count[j]),
                matched_count=int(matched_count[j]),
                matched_total=float(matched_total[j]),
                estimate=float(est),
            )
        )
        total += est
    return PolicyEstimate(total=float(total), arms=arms)


def estimate_policy_value(plan_arms, trial_arms, y, n_arms: int) -> PolicyEstimate:
    """Estimated expected total enduring amount if the plan had been deployed."""
    y = np.asarray(y, dtype=np.float64)
    if np.any(y < 0):
        raise ValidationError("y must be nonnegative")
    return _grouped_estimate(plan_arms, trial_arms, y, n_arms)


def estimate_policy_cost(plan_arms, trial_arms, s, coupon_values) -> PolicyEstimate:
    """Estimated expected incentive spend: a coupon costs its face value when
    the matched record shows a direct purchase."""
    coupon_values = np.asarray(coupon_values, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    realized = coupon_values[np.asarray(trial_arms, dtype=np.int64)] * s
    return _grouped_estimate(plan_arms, trial_arms, realized, len(coupon_values))


def lift_purchase_amount(plan_arms, trial_arms, y, n_arms: int, control_arm: int) -> float:
    """Plan value minus the all-control plan value, both estimated on the log."""
    if not 0 <= control_arm < n_arms:
        raise ValidationError(f"control_arm {control_arm} out of range")
    value = estimate_policy_value(plan_arms, trial_arms, y, n_arms).total
    control = np.full(len(np.asarray(plan_arms)), control_arm, dtype=np.int64)
    baseline = estimate_policy_value(control, trial_arms, y, n_arms).total
    return value - baseline


@dataclass
class CurvePoint:
    """One budget level of a sweep: realized totals under the chosen plan."""

    budget: float
    cost: float
    lpa: float
    value: float


def budget_sweep(
    value_matrix: np.ndarray,
    direct_matrix: np.ndarray,
    coupon_values: np.ndarray,
    budgets,
    trial_arms: np.ndarray,
    s: np.ndarray,
    y: np.ndarray,
    control_arm: int,
):
    """Allocate at each budget and score every plan on the trial log.

    Returns ``(points, plans)`` where each point carries the estimated cost,
    estimated value, and LPA of the plan solved at that budget.
    """
    points: list[CurvePoint] = []
    plans: list[AllocationPlan] = []
    n_arms = len(coupon_values)
    for b in budgets:
        problem = build_problem(value_matrix, direct_matrix, coupon_values, float(b))
        plan = solve_lagrangian(problem)
        est_value = estimate_policy_value(plan.arms, trial_arms, y, n_arms).total
        est_cost = estimate_policy_cost(plan.arms, trial_arms, s, coupon_values).total
        lpa = lift_purchase_amount(plan.arms, trial_arms, y, n_arms, control_arm)
        points.append(CurvePoint(budget=float(b), cost=est_cost, lpa=lpa, value=est_value))
        plans.append(plan)
    return points, plans


def curve_to_csv(points, path):
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["budget", "cost", "lpa", "value"])
        for pt in points:
            writer.writerow([repr(pt.budget), repr(pt.cost), repr(pt.lpa), repr(pt.value)])


def load_curve_csv(path):
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != ["budget", "cost", "lpa", "value"]:
            raise ValidationError(f"unexpected curve header {header}")
        return [
            CurvePoint(budget=float(r[0]), cost=float(r[1]), lpa=float(r[2]), value=float(r[3]))
            for r in reader
        ]


@dataclass
class FoldMetrics:
    fold: int
    n_test: int
    metrics: MetricReport


@dataclass
class CrossValResult:
    """Out-of-fold predictions and metrics from a k-fold run."""

    fold_metrics: list
    pooled: MetricReport
    oof: PredictionTriple
    models: list | None = None


def cross_validated_eval(
    features: np.ndarray,
    arms: np.ndarray,
    s: np.ndarray,
    y: np.ndarray,
    n_arms: int,
    config: ModelConfig | None = None,
    seed: int = 0,
    n_folds: int = 5,
    keep_models: bool = False,
) -> CrossValResult:
    """Train on k-1 folds, score the held-out fold, pool the predictions.

    Every record is scored exactly once by a model that never saw it; pooled
    metrics are computed on those out-of-fold predictions against the logged
    outcomes. Fold membership and per-fold training both derive from
    ``seed``.
    """
    if n_folds < 2:
        raise ValidationError("n_folds must be at least 2")
    n = len(features)
    if n < n_folds:
        raise ValidationError(f"cannot split {n} records into {n_folds} folds")
    features = np.asarray(features, dtype=np.float64)
    arms = np.asarray(arms, dtype=np.int64)
    s = np.asarray(s, dtype=np.int64)
    y = np.asarray(y, dtype=np.float64)

    perm = make_rng(seed, _STREAM_FOLDS).permutation(n)
    bounds = np.linspace(0, n, n_folds + 1).astype(int)
    oof_direct = np.empty(n)
    oof_enduring = np.empty(n)
    oof_amount = np.empty(n)
    fold_metrics = []
    models = [] if keep_models else None

    for k in range(n_folds):
        test_idx = perm[bounds[k] : bounds[k + 1]]
        train_idx = np.concatenate([perm[: bounds[k]], perm[bounds[k + 1] :]])
        result = train_model(
            features[train_idx],
            arms[train_idx],
            s[train_idx],
            y[train_idx],
            n_arms,
            config=config,
            seed=make_rng(seed, _STREAM_FOLD_TRAIN, k).integers(2**31),
        )
        triple = predict(result.model, features[test_idx], arms[test_idx])
        oof_direct[test_idx] = triple.direct
        oof_enduring[test_idx] = triple.enduring_propensity
        oof_amount[test_idx] = triple.amount
        fold_metrics.append(
            FoldMetrics(
                fold=k,
                n_test=len(test_idx),
                metrics=metric_report(triple.direct, s[test_idx], triple.amount, y[test_idx]),
            )
        )
        if keep_models:
            models.append(result.model)

    pooled = metric_report(oof_direct, s, oof_amount, y)
    return CrossValResult(
        fold_metrics=fold_metrics,
        pooled=pooled,
        oof=PredictionTriple(direct=oof_direct, enduring_propensity=oof_enduring, amount=oof_amount),
        models=models,
    )


@dataclass
class EvalReport:
    """One variant's evaluation summary, serializable to stable JSON."""

    variant: str
    n_records: int
    metrics: MetricReport
    budget: float | None = None
    estimated_value: float | None = None
    estimated_cost: float | None = None
    lpa: float | None = None
    fold_metrics: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = {
            "variant": self.variant,
            "n_records": self.n_records,
            "metrics": asdict(self.metrics),
            "budget": self.budget,
            "estimated_value": self.estimated_value,
            "estimated_cost": self.estimated_cost,
            "lpa": self.lpa,
            "fold_metrics": [
                {"fold": fm.fold, "n_test": fm.n_test, "metrics": asdict(fm.metrics)}
                for fm in self.fold_metrics
            ],
        }
        return d

    def to_json(self) -> str:
        # sort_keys plus repr-style floats keep the bytes identical across runs
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def save(self, path):
        with open(path, "w") as f:
            f.write(self.to_json())
            f.write("\n")

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            variant=d["variant"],
            n_records=d["n_records"],
            metrics=MetricReport(**d["metrics"]),
            budget=d.get("budget"),
            estimated_value=d.get("estimated_value"),
            estimated_cost=d.get("estimated_cost"),
            lpa=d.get("lpa"),
            fold_metrics=[
                FoldMetrics(fold=fm["fold"], n_test=fm["n_test"], metrics=MetricReport(**fm["metrics"]))
                for fm in d.get("fold_metrics", [])
            ],
        )

    @classmethod
    def load(cls, path) -> "EvalReport":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def evaluate_variant(
    features: np.ndarray,
    arms: np.ndarray,
    s: np.ndarray,
    y: np.ndarray,
    coupon_values: np.ndarray,
    control_arm: int,
    config: ModelConfig,
    seed: int = 0,
    budget: float | None = None,
    n_folds: int = 5,
) -> EvalReport:
    """Full pipeline for one variant: CV metrics plus one budgeted allocation.

    The allocation step trains on everything, predicts all arms, solves at
    ``budget``, and scores the plan on the same log with the matched-arm
    estimator. Skipped when ``budget`` is None.
    """
    cv = cross_validated_eval(features, arms, s, y, len(coupon_values), config, seed, n_folds)
    report = EvalReport(
        variant=config.variant,
        n_records=len(features),
        metrics=cv.pooled,
        fold_metrics=cv.fold_metrics,
    )
    if budget is not None:
        result = train_model(features, arms, s, y, len(coupon_values), config, seed)
        pm = predict_matrix(result.model, features)
        points, _ = budget_sweep(
            pm.amount, pm.direct, coupon_values, [budget], arms, s, y, control_arm
        )
        report.budget = float(budget)
        report.estimated_value = points[0].value
        report.estimated_cost = points[0].cost
        report.lpa = points[0].lpa
    return report
