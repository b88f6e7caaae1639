"""Synthetic randomized-trial generator with exported ground truth.

The world: each customer has five activity features (recency in days,
long/short-term purchase frequency counts, long/short-term monetary value in
currency units). An incentive arm is assigned at random, independent of the
features. The response has three true components per (customer, arm):

* ``p_direct`` - probability of a purchase during the promotion window
  (logistic link over standardized features, arm effect, arm x feature
  interactions);
* ``mu_promo_given_direct`` - mean spend of that promotion-window purchase
  when it happens (log link, gamma distributed);
* ``mu_post`` - mean of the post-window spend, drawn from a compound
  Poisson-Gamma distribution (point mass at zero plus continuous part).

The recorded enduring amount is ``y = y_promo + y_post`` where ``y_promo`` is
positive exactly when the direct flag ``s`` is 1, so the true mean enduring
amount is ``p_direct * mu_promo_given_direct + mu_post``. That quantity is
exported as ground truth for every (customer, arm) pair - observed or not -
which makes exact policy values computable for estimator tests.

Each customer's randomness derives from ``(seed, customer_id)`` so generation
is order-independent and could be parallelized without changing output.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .nncore import make_rng

FEATURE_NAMES = ("recency", "freq_long", "freq_short", "money_long", "money_short")
N_FEATURES = len(FEATURE_NAMES)

# Response surfaces see standardized features squashed to this magnitude.
_Z_SATURATION = 3.0


def cpg_parameters(mu, phi: float, rho: float):
    """(lambda, alpha, theta) of the compound Poisson-Gamma with mean ``mu``.

    N ~ Poisson(lambda), each atom Gamma(alpha, theta):
      lambda = mu^(2-rho) / (phi (2-rho))
      alpha  = (2-rho) / (rho-1)
      theta  = phi (rho-1) mu^(rho-1)
    so the mean is lambda * alpha * theta = mu.
    """
    mu = np.asarray(mu, dtype=np.float64)
    lam = mu ** (2.0 - rho) / (phi * (2.0 - rho))
    alpha = (2.0 - rho) / (rho - 1.0)
    theta = phi * (rho - 1.0) * mu ** (rho - 1.0)
    return lam, alpha, theta


def _check_cpg_domain(mu, phi: float, rho: float):
    if not 1.0 < rho < 2.0:
        raise ValidationError(f"rho must lie strictly between 1 and 2, got {rho}")
    if phi <= 0:
        raise ValidationError(f"phi must be positive, got {phi}")
    if np.any(np.asarray(mu) <= 0):
        raise ValidationError("mu must be positive")


def sample_cpg(mu, phi: float, rho: float, rng: np.random.Generator):
    """Draw from the compound Poisson-Gamma distribution with mean ``mu``.

    Draws N ~ Poisson(lambda) and then the sum of N Gamma(alpha, theta)
    atoms, using gamma additivity (the sum is Gamma(N alpha, theta)). The
    result is exactly 0.0 when N = 0. ``mu`` may be a scalar or an array;
    the output matches its shape.
    """
    _check_cpg_domain(mu, phi, rho)
    lam, alpha, theta = cpg_parameters(mu, phi, rho)
    if np.ndim(mu) == 0:
        n = rng.poisson(float(lam))
        if n == 0:
            return 0.0
        return float(rng.gamma(n * alpha, float(theta)))
    n = rng.poisson(lam)
    out = np.zeros(n.shape, dtype=np.float64)
    pos = n > 0
    if np.any(pos):
        theta_b = np.broadcast_to(theta, n.shape)
        out[pos] = rng.gamma(n[pos] * alpha, theta_b[pos])
    return out


@dataclass
class FeatureConfig:
    """Distribution parameters for the five customer features.

    Heavy-tailed by design: recency is geometric, frequencies are negative
    binomial, monetary values are lognormal.
    """

    recency_p: float = 0.03
    freq_long_n: int = 3
    freq_long_p: float = 0.25
    freq_short_n: int = 2
    freq_short_p: float = 0.5
    money_long_log_mean: float = 1.0
    money_long_log_sd: float = 0.8
    money_short_log_mean: float = 0.3
    money_short_log_sd: float = 1.0

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return np.array(
            [
                float(rng.geometric(self.recency_p)),
                float(rng.negative_binomial(self.freq_long_n, self.freq_long_p)),
                float(rng.negative_binomial(self.freq_short_n, self.freq_short_p)),
                float(rng.lognormal(self.money_long_log_mean, self.money_long_log_sd)),
                float(rng.lognormal(self.money_short_log_mean, self.money_short_log_sd)),
            ]
        )


@dataclass
class LinearResponse:
    """One link's linear form: intercept + z.coefs + arm effect + z.interactions[arm]."""

    intercept: float
    feature_coefs: np.ndarray  # (F,)
    arm_effects: np.ndarray  # (M,), control entry must be 0
    interactions: np.ndarray  # (M, F), control row must be 0

    def __post_init__(self):
        self.feature_coefs = np.asarray(self.feature_coefs, dtype=np.float64)
        self.arm_effects = np.asarray(self.arm_effects, dtype=np.float64)
        self.interactions = np.asarray(self.interactions, dtype=np.float64)
        if self.interactions.shape != (len(self.arm_effects), len(self.feature_coefs)):
            raise ValidationError(
                f"interactions shape {self.interactions.shape} does not match "
                f"({len(self.arm_effects)} arms, {len(self.feature_coefs)} features)"
            )

    def linear(self, z: np.ndarray, arm: int) -> np.ndarray:
        """Linear predictor for standardized features ``z`` (N, F) under one arm."""
        coefs = self.feature_coefs + self.interactions[arm]
        return self.intercept + z @ coefs + self.arm_effects[arm]


@dataclass
class ResponseSpec:
    """True response surfaces: feature standardization plus three linear blocks."""

    feature_center: np.ndarray  # (F,)
    feature_scale: np.ndarray  # (F,)
    direct: LinearResponse  # logistic link -> p_direct
    promo: LinearResponse  # log link -> mean promo spend given a direct purchase
    post: LinearResponse  # log link -> mean of the post-window CPG component

    def __post_init__(self):
        self.feature_center = np.asarray(self.feature_center, dtype=np.float64)
        self.feature_scale = np.asarray(self.feature_scale, dtype=np.float64)
        if np.any(self.feature_scale <= 0):
            raise ValidationError("feature_scale entries must be positive")

    @property
    def n_arms(self) -> int:
        return len(self.direct.arm_effects)

    def standardize(self, features: np.ndarray) -> np.ndarray:
        """Center, scale, then squash through tanh so response inputs stay bounded.

        The monetary features are lognormal, so raw z-scores can reach 20 or
        more in a large population. Feeding those into exponential links would
        let a handful of customers dominate every aggregate. The squash is
        near-identity for |z| < 2 and caps the magnitude at the saturation
        level, keeping the world heavy-tailed but not degenerate.
        """
        z = (np.asarray(features, dtype=np.float64) - self.feature_center) / self.feature_scale
        return np.tanh(z / _Z_SATURATION) * _Z_SATURATION

    def surfaces(self, features: np.ndarray):
        """(p_direct, mu_promo_given_direct, mu_post), each (N, M)."""
        z = self.standardize(np.atleast_2d(features))
        n = z.shape[0]
        m = self.n_arms
        p = np.empty((n, m))
        mu_promo = np.empty((n, m))
        mu_post = np.empty((n, m))
        for j in range(m):
            p[:, j] = _sigmoid(self.direct.linear(z, j))
            mu_promo[:, j] = np.exp(self.promo.linear(z, j))
            mu_post[:, j] = np.exp(self.post.linear(z, j))
        return p, mu_promo, mu_post


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def true_response(features, arm: int, spec: ResponseSpec):
    """(p_direct, mean enduring amount) for one feature row under one arm."""
    p, mu_promo, mu_post = spec.surfaces(np.atleast_2d(features))
    p_j = p[:, arm]
    mu_j = p_j * mu_promo[:, arm] + mu_post[:, arm]
    if np.ndim(features) == 1:
        return float(p_j[0]), float(mu_j[0])
    return p_j, mu_j


@dataclass
class GenConfig:
    """Full description of one synthetic promotion world."""

    n_customers: int = 100_000
    coupon_values: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0]))
    assignment_probs: np.ndarray | None = None  # default: uniform over arms
    phi: float = 4.0
    rho: float = 1.5
    promo_gamma_shape: float = 2.0
    seed: int = 0
    features: FeatureConfig = field(default_factory=FeatureConfig)
    response: ResponseSpec | None = None  # default: default_response_spec(coupon_values)

    def __post_init__(self):
        self.coupon_values = np.asarray(self.coupon_values, dtype=np.float64)
        if self.n_customers < 1:
            raise ValidationError("n_customers must be at least 1")
        zero_arms = np.flatnonzero(self.coupon_values == 0.0)
        if len(zero_arms) != 1:
            raise ValidationError(
                f"exactly one zero-incentive arm required, found {len(zero_arms)}"
            )
        if np.any(self.coupon_values < 0):
            raise ValidationError("coupon values must be nonnegative")
        if self.assignment_probs is None:
            self.assignment_probs = np.full(self.n_arms, 1.0 / self.n_arms)
        self.assignment_probs = np.asarray(self.assignment_probs, dtype=np.float64)
        if len(self.assignment_probs) != self.n_arms:
            raise ValidationError("assignment_probs length must match the arm count")
        if np.any(self.assignment_probs < 0) or abs(self.assignment_probs.sum() - 1.0) > 1e-9:
            raise ValidationError("assignment_probs must be nonnegative and sum to 1")
        _check_cpg_domain(1.0, self.phi, self.rho)
        if self.promo_gamma_shape <= 0:
            raise ValidationError("promo_gamma_shape must be positive")
        if self.response is None:
            self.response = default_response_spec(self.n_arms)
        if self.response.n_arms != self.n_arms:
            raise ValidationError("response spec arm count must match coupon_values")
        control = self.control_arm
        for block in (self.response.direct, self.response.promo, self.response.post):
            if block.arm_effects[control] != 0.0 or np.any(block.interactions[control] != 0.0):
                raise ValidationError("the zero-incentive arm must carry zero effects")

    @property
    def n_arms(self) -> int:
        return len(self.coupon_values)

    @property
    def control_arm(self) -> int:
        return int(np.flatnonzero(self.coupon_values == 0.0)[0])


@dataclass
class RctDataset:
    """Observed trial records: features, assigned arm, direct flag, enduring amount."""

    customer_id: np.ndarray
    features: np.ndarray  # (N, F)
    arm: np.ndarray
    s: np.ndarray
    y: np.ndarray
    feature_names: tuple = FEATURE_NAMES

    def __post_init__(self):
        self.customer_id = np.asarray(self.customer_id, dtype=np.int64)
        self.features = np.asarray(self.features, dtype=np.float64)
        self.arm = np.asarray(self.arm, dtype=np.int64)
        self.s = np.asarray(self.s, dtype=np.int64)
        self.y = np.asarray(self.y, dtype=np.float64)
        n = len(self.customer_id)
        if self.features.shape != (n, len(self.feature_names)):
            raise ValidationError(f"features must be ({n}, {len(self.feature_names)})")
        for name, arr in (("arm", self.arm), ("s", self.s), ("y", self.y)):
            if arr.shape != (n,):
                raise ValidationError(f"{name} must have length {n}")
        if not np.all((self.s == 0) | (self.s == 1)):
            raise ValidationError("s must be 0 or 1")
        if np.any(self.y < 0):
            raise ValidationError("y must be nonnegative")

    @property
    def n(self) -> int:
        return len(self.customer_id)

    def subset(self, index: np.ndarray) -> "RctDataset":
        return RctDataset(
            customer_id=self.customer_id[index],
            features=self.features[index],
            arm=self.arm[index],
            s=self.s[index],
            y=self.y[index],
            feature_names=self.feature_names,
        )

    def to_csv(self, path):
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["customer_id"] + list(self.feature_names) + ["arm", "s", "y"])
            for i in range(self.n):
                row = [int(self.customer_id[i])]
                row += [_format_number(v) for v in self.features[i]]
                row += [int(self.arm[i]), int(self.s[i]), _format_number(self.y[i])]
                writer.writerow(row)

    @classmethod
    def from_csv(cls, path) -> "RctDataset":
        with open(path, newline="") as f:
            reader = csv.reader(f)
            header = next(reader)
            expected = ["customer_id"] + list(FEATURE_NAMES) + ["arm", "s", "y"]
            if header != expected:
                raise ValidationError(f"unexpected dataset header {header}; expected {expected}")
            rows = list(reader)
        n = len(rows)
        customer_id = np.empty(n, dtype=np.int64)
        features = np.empty((n, N_FEATURES))
        arm = np.empty(n, dtype=np.int64)
        s = np.empty(n, dtype=np.int64)
        y = np.empty(n)
        for i, row in enumerate(rows):
            customer_id[i] = int(row[0])
            features[i] = [float(v) for v in row[1 : 1 + N_FEATURES]]
            arm[i] = int(row[1 + N_FEATURES])
            s[i] = int(row[2 + N_FEATURES])
            y[i] = float(row[3 + N_FEATURES])
        return cls(customer_id=customer_id, features=features, arm=arm, s=s, y=y)


def _format_number(v: float) -> str:
    # repr of a Python float round-trips exactly and is deterministic.
    return repr(float(v))


@dataclass
class GroundTruth:
    """True response parameters for every (customer, arm) pair.

    ``mean_enduring`` is the exact expectation of the recorded amount y, so
    sums of it over any assignment are exact policy values.
    """

    p_direct: np.ndarray  # (N, M)
    mu_promo_given_direct: np.ndarray  # (N, M)
    mu_post: np.ndarray  # (N, M)
    phi: float
    rho: float
    promo_gamma_shape: float

    @property
    def n(self) -> int:
        return self.p_direct.shape[0]

    @property
    def n_arms(self) -> int:
        return self.p_direct.shape[1]

    @property
    def mean_enduring(self) -> np.ndarray:
        return self.p_direct * self.mu_promo_given_direct + self.mu_post

    def zero_probability(self) -> np.ndarray:
        """P(y = 0) per (customer, arm): no direct purchase and an empty CPG draw."""
        lam, _, _ = cpg_parameters(self.mu_post, self.phi, self.rho)
        return (1.0 - self.p_direct) * np.exp(-lam)

    def policy_value(self, arms: np.ndarray) -> float:
        """Exact expected total enduring amount under a per-customer arm choice."""
        arms = np.asarray(arms, dtype=np.int64)
        if arms.shape != (self.n,):
            raise ValidationError(f"arms must have length {self.n}")
        return float(self.mean_enduring[np.arange(self.n), arms].sum())

    def to_csv(self, path, customer_id: np.ndarray | None = None):
        ids = np.arange(self.n) if customer_id is None else customer_id
        mu = self.mean_enduring
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["customer_id", "arm", "p_true", "mu_true"])
            for i in range(self.n):
                for j in range(self.n_arms):
                    writer.writerow(
                        [int(ids[i]), j, _format_number(self.p_direct[i, j]), _format_number(mu[i, j])]
                    )


def load_ground_truth_csv(path):
    """(customer_id, p_true, mu_true) arrays from a ground-truth CSV; p/mu are (N, M)."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        header = next(reader)
        if header != ["customer_id", "arm", "p_true", "mu_true"]:
            raise ValidationError(f"unexpected ground-truth header {header}")
        rows = [(int(r[0]), int(r[1]), float(r[2]), float(r[3])) for r in reader]
    ids = sorted({r[0] for r in rows})
    id_index = {cid: i for i, cid in enumerate(ids)}
    n_arms = max(r[1] for r in rows) + 1
    p = np.zeros((len(ids), n_arms))
    mu = np.zeros((len(ids), n_arms))
    for cid, arm, pv, mv in rows:
        p[id_index[cid], arm] = pv
        mu[id_index[cid], arm] = mv
    return np.asarray(ids, dtype=np.int64), p, mu


def generate_rct(config: GenConfig):
    """Sample one randomized trial and its full ground truth.

    Arm assignment is drawn independently of the features, so incentive and
    covariates are independent by construction. Feature draws, assignment,
    and outcomes for customer i all come from the (seed, i) stream.
    """
    n = config.n_customers
    m = config.n_arms
    rngs = [make_rng(config.seed, i) for i in range(n)]

    features = np.empty((n, N_FEATURES))
    for i in range(n):
        features[i] = config.features.sample(rngs[i])

    p, mu_promo, mu_post = config.response.surfaces(features)
    truth = GroundTruth(
        p_direct=p,
        mu_promo_given_direct=mu_promo,
        mu_post=mu_post,
        phi=config.phi,
        rho=config.rho,
        promo_gamma_shape=config.promo_gamma_shape,
    )

    cum_probs = np.cumsum(config.assignment_probs)
    k = config.promo_gamma_shape
    arm = np.empty(n, dtype=np.int64)
    s = np.empty(n, dtype=np.int64)
    y = np.empty(n)
    for i in range(n):
        rng = rngs[i]
        j = int(np.searchsorted(cum_probs, rng.random(), side="right"))
        j = min(j, m - 1)
        arm[i] = j
        direct = rng.random() < p[i, j]
        s[i] = 1 if direct else 0
        y_promo = float(rng.gamma(k, mu_promo[i, j] / k)) if direct else 0.0
        y_post = sample_cpg(mu_post[i, j], config.phi, config.rho, rng)
        y[i] = y_promo + y_post

    dataset = RctDataset(
        customer_id=np.arange(n, dtype=np.int64),
        features=features,
        arm=arm,
        s=s,
        y=y,
    )
    return dataset, truth


def redraw_outcomes(truth: GroundTruth, assignment_probs: np.ndarray, rng: np.random.Generator):
    """Fresh (arm, s, y) draws for fixed customers and ground truth.

    Vectorized single-stream sampler for Monte Carlo studies that need many
    outcome worlds over one fixed population (features and truth unchanged).
    """
    n = truth.n
    probs = np.asarray(assignment_probs, dtype=np.float64)
    if len(probs) != truth.n_arms:
        raise ValidationError("assignment_probs length must match the arm count")
    arm = np.searchsorted(np.cumsum(probs), rng.random(n), side="right")
    arm = np.minimum(arm, truth.n_arms - 1).astype(np.int64)
    rows = np.arange(n)
    p = truth.p_direct[rows, arm]
    s = (rng.random(n) < p).astype(np.int64)
    k = truth.promo_gamma_shape
    y_promo = np.where(s == 1, rng.gamma(k, truth.mu_promo_given_direct[rows, arm] / k), 0.0)
    y_post = sample_cpg(truth.mu_post[rows, arm], truth.phi, truth.rho, rng)
    return arm, s, y_post + y_promo


# ---------------------------------------------------------------------------
# Default worlds
# ---------------------------------------------------------------------------

# Standardization constants of the default FeatureConfig (approximate
# analytic moments, frozen so the response spec is a fixed object).
_DEFAULT_CENTER = np.array([33.3, 9.0, 2.0, 3.74, 2.23])
_DEFAULT_SCALE = np.array([32.8, 6.0, 2.0, 3.55, 2.92])


def _coupon_scaled(coupons: np.ndarray, slope: float, control: int) -> np.ndarray:
    eff = slope * coupons.astype(np.float64)
    eff[control] = 0.0
    return eff


def default_response_spec(n_arms: int, coupon_values: np.ndarray | None = None) -> ResponseSpec:
    """Separable default world: response effects scale with coupon value.

    Direct and enduring responses share feature heterogeneity, so modeling
    either helps the other; effects are big enough that a trained model can
    approach the true ranking.
    """
    if coupon_values is None:
        coupon_values = np.linspace(0.0, 3.0, n_arms)
    c = np.asarray(coupon_values, dtype=np.float64)
    control = int(np.flatnonzero(c == 0.0)[0])
    direct = LinearResponse(
        intercept=-1.3,
        feature_coefs=np.array([-0.7, 0.5, 0.45, 0.25, 0.2]),
        arm_effects=_coupon_scaled(c, 0.30, control),
        interactions=np.outer(c, np.array([0.0, 0.10, 0.15, 0.0, 0.08])),
    )
    promo = LinearResponse(
        intercept=-0.1,
        feature_coefs=np.array([-0.1, 0.1, 0.1, 0.35, 0.25]),
        arm_effects=_coupon_scaled(c, 0.08, control),
        interactions=np.zeros((len(c), N_FEATURES)),
    )
    post = LinearResponse(
        intercept=0.7,
        feature_coefs=np.array([-0.45, 0.35, 0.25, 0.45, 0.3]),
        arm_effects=_coupon_scaled(c, 0.22, control),
        interactions=np.outer(c, np.array([0.0, 0.08, 0.0, 0.12, 0.06])),
    )
    for block in (direct, promo, post):
        block.interactions[control] = 0.0
    return ResponseSpec(
        feature_center=_DEFAULT_CENTER.copy(),
        feature_scale=_DEFAULT_SCALE.copy(),
        direct=direct,
        promo=promo,
        post=post,
    )


def decorrelated_response_spec(n_arms: int, coupon_values: np.ndarray | None = None) -> ResponseSpec:
    """World where direct uplift and enduring uplift live on disjoint features.

    The direct response to coupons is heterogeneous in short-term frequency
    only; the enduring response is heterogeneous in long-term monetary value
    only (and anti-aligned with the direct interaction), so chasing the
    direct signal picks the wrong customers for the enduring objective.
    """
    if coupon_values is None:
        coupon_values = np.linspace(0.0, 3.0, n_arms)
    c = np.asarray(coupon_values, dtype=np.float64)
    control = int(np.flatnonzero(c == 0.0)[0])
    direct = LinearResponse(
        intercept=-1.2,
        feature_coefs=np.array([-0.6, 0.4, 0.5, 0.1, 0.1]),
        arm_effects=_coupon_scaled(c, 0.35, control),
        interactions=np.outer(c, np.array([0.0, 0.0, 0.30, -0.15, 0.0])),
    )
    promo = LinearResponse(
        intercept=-0.2,
        feature_coefs=np.array([-0.1, 0.1, 0.1, 0.3, 0.2]),
        arm_effects=_coupon_scaled(c, 0.05, control),
        interactions=np.zeros((len(c), N_FEATURES)),
    )
    post = LinearResponse(
        intercept=0.7,
        feature_coefs=np.array([-0.4, 0.3, 0.2, 0.5, 0.3]),
        arm_effects=_coupon_scaled(c, 0.10, control),
        interactions=np.outer(c, np.array([0.0, 0.0, -0.12, 0.30, 0.0])),
    )
    for block in (direct, promo, post):
        block.interactions[control] = 0.0
    return ResponseSpec(
        feature_center=_DEFAULT_CENTER.copy(),
        feature_scale=_DEFAULT_SCALE.copy(),
        direct=direct,
        promo=promo,
        post=post,
    )
