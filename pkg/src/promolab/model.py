"""Multi-head feed-forward response model over customer features and incentive arms.

One trunk of relu layers reads the standardized features concatenated with a
learned per-arm embedding. Three heads tap the trunk at increasing depth:

* direct purchase propensity (sigmoid) after the second trunk layer,
* enduring purchase propensity (sigmoid) after the third,
* enduring purchase amount (exp link) after the last.

The layered hybrid loss trains all heads at once: Tweedie deviance on the
amount, cross-entropy on 1{y > 0} for the enduring propensity, cross-entropy
on the direct flag. Earlier heads act as deep supervision for the shared
trunk, which is the point of the architecture.

Ablation variants share this file so comparisons change exactly one thing:

* ``full`` - the model above;
* ``no_enduring_ce`` - same wiring, enduring-propensity loss weight zero;
* ``l2_amount`` - amount head through an identity link trained with squared
  error (predictions clamped to a small positive floor afterwards);
* ``direct_only`` - trunk truncated at the direct head, no amount model; its
  amount prediction is defined as the direct propensity so downstream code
  can rank and allocate with it;
* ``two_model`` - no shared trunk: one full-depth tower for the direct flag
  and an independent one for the amount, each with its own embedding table.

Variants without an enduring-propensity head report the direct propensity in
that slot.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ShapeError, TrainingError, ValidationError
from .losses import LossWeights, cross_entropy_loss, hybrid_loss, l2_loss, tweedie_loss
from .nncore import (
    _EXP_CLIP,
    DenseLayer,
    DenseNet,
    adam_update,
    backward_pass,
    flatten_gradients,
    forward_pass,
    init_adam,
    init_dense_net,
    make_rng,
    max_relative_gradient_error,
    net_parameters,
)

VARIANTS = ("full", "no_enduring_ce", "l2_amount", "direct_only", "two_model")

_AMOUNT_FLOOR = 1e-6  # positive floor for identity-link amount predictions

# rng stream keys, so every consumer of the training seed is independent
_STREAM_SPLIT = 0
_STREAM_INIT = 1
_STREAM_BATCH = 2
_STREAM_DROPOUT = 3

_PREDICT_CHUNK = 8192


def default_embedding_dim(n_arms: int) -> int:
    """floor(n_arms ** 0.25) + 1, the usual fourth-root sizing rule."""
    if n_arms < 1:
        raise ValidationError("n_arms must be at least 1")
    return int(np.floor(n_arms**0.25)) + 1


@dataclass
class ModelConfig:
    """Architecture and training hyperparameters.

    Defaults are the production-scale settings; tests shrink ``hidden_dims``
    and ``max_epochs`` to stay fast. ``direct_head_depth`` and
    ``enduring_head_depth`` count trunk layers before each auxiliary head.
    """

    hidden_dims: tuple = (1024, 1024, 512, 16)
    direct_head_depth: int = 2
    enduring_head_depth: int = 3
    dropout_rate: float = 0.2
    learning_rate: float = 2e-4
    batch_size: int = 1024
    max_epochs: int = 200
    patience_epochs: int = 10
    plateau_epochs: int = 5
    lr_decay: float = 0.1
    validation_fraction: float = 0.1
    rho: float = 1.5
    weights: LossWeights = field(default_factory=LossWeights)
    embedding_dim: int | None = None
    variant: str = "full"

    def __post_init__(self):
        self.hidden_dims = tuple(int(d) for d in self.hidden_dims)
        if len(self.hidden_dims) < 2:
            raise ValidationError("need at least two trunk layers")
        if any(d < 1 for d in self.hidden_dims):
            raise ValidationError(f"hidden_dims must be positive, got {self.hidden_dims}")
        if not 1 <= self.direct_head_depth < len(self.hidden_dims):
            raise ValidationError(
                f"direct_head_depth {self.direct_head_depth} must be in "
                f"[1, {len(self.hidden_dims) - 1}]"
            )
        if self.variant not in ("direct_only",) and not (
            self.direct_head_depth < self.enduring_head_depth < len(self.hidden_dims)
        ):
            raise ValidationError(
                "enduring_head_depth must sit strictly between direct_head_depth "
                "and the trunk depth"
            )
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.learning_rate <= 0:
            raise ValidationError("learning_rate must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience_epochs < 1:
            raise ValidationError("batch_size, max_epochs and patience_epochs must be >= 1")
        if self.plateau_epochs < 1:
            raise ValidationError("plateau_epochs must be >= 1")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValidationError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if not 0.0 < self.validation_fraction <= 0.5:
            raise ValidationError("validation_fraction must be in (0, 0.5]")
        if not 1.0 < self.rho < 2.0:
            raise ValidationError(f"rho must lie strictly between 1 and 2, got {self.rho}")
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.embedding_dim is not None and self.embedding_dim < 1:
            raise ValidationError("embedding_dim must be positive when given")
        if self.variant not in VARIANTS:
            raise ValidationError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_dims"] = list(self.hidden_dims)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if isinstance(d.get("weights"), dict):
            d["weights"] = LossWeights(**d["weights"])
        if "hidden_dims" in d:
            d["hidden_dims"] = tuple(d["hidden_dims"])
        return cls(**d)


@dataclass
class PredictionTriple:
    """Per-record head outputs for an assigned arm."""

    direct: np.ndarray
    enduring_propensity: np.ndarray
    amount: np.ndarray


@dataclass
class PredictionMatrix:
    """Head outputs for every (customer, arm) pair; each field is (N, M)."""

    direct: np.ndarray
    enduring_propensity: np.ndarray
    amount: np.ndarray


@dataclass
class ResponseModel:
    """A built (possibly trained) model: parameters plus input normalization."""

    config: ModelConfig
    n_arms: int
    feature_mean: np.ndarray
    feature_sd: np.ndarray
    embedding: np.ndarray  # (M, E)
    trunk_a: DenseNet
    direct_head: DenseNet
    trunk_b: DenseNet | None = None
    enduring_head: DenseNet | None = None
    trunk_c: DenseNet | None = None
    amount_head: DenseNet | None = None
    amount_trunk: DenseNet | None = None  # two_model only
    amount_embedding: np.ndarray | None = None  # two_model only

    @property
    def n_features(self) -> int:
        return len(self.feature_mean)

    @property
    def embedding_dim(self) -> int:
        return self.embedding.shape[1]

    def parts(self) -> list[tuple[str, DenseNet]]:
        """Named sub-networks in a fixed order (parameter layout depends on it)."""
        out = [("trunk_a", self.trunk_a), ("direct_head", self.direct_head)]
        for name in ("trunk_b", "enduring_head", "trunk_c", "amount_trunk", "amount_head"):
            net = getattr(self, name)
            if net is not None:
                out.append((name, net))
        return out

    def parameters(self) -> list[np.ndarray]:
        params = [self.embedding]
        if self.amount_embedding is not None:
            params.append(self.amount_embedding)
        for _, net in self.parts():
            params.extend(net_parameters(net))
        return params

    def standardize(self, features: np.ndarray, dtype=np.float64) -> np.ndarray:
        features = np.asarray(features, dtype=dtype)
        if features.ndim != 2 or features.shape[1] != self.n_features:
            raise ShapeError(
                f"features must be (n, {self.n_features}), got {features.shape}"
            )
        return (features - self.feature_mean) / self.feature_sd


def build_model(
    config: ModelConfig,
    n_arms: int,
    feature_mean: np.ndarray,
    feature_sd: np.ndarray,
    rng: np.random.Generator,
) -> ResponseModel:
    """Initialize all parts for the configured variant.

    Draw order from ``rng`` is fixed (embedding tables, then nets front to
    back), so a seed fully pins the starting point.
    """
    feature_mean = np.asarray(feature_mean, dtype=np.float64)
    feature_sd = np.asarray(feature_sd, dtype=np.float64)
    if feature_mean.shape != feature_sd.shape or feature_mean.ndim != 1:
        raise ShapeError("feature_mean and feature_sd must be matching 1-D arrays")
    if np.any(feature_sd <= 0):
        raise ValidationError("feature_sd entries must be positive")
    if n_arms < 2:
        raise ValidationError("need at least two arms (control plus one incentive)")

    emb_dim = config.embedding_dim or default_embedding_dim(n_arms)
    input_dim = len(feature_mean) + emb_dim
    dims = (input_dim,) + config.hidden_dims
    d_cut = config.direct_head_depth
    e_cut = config.enduring_head_depth
    amount_act = "identity" if config.variant == "l2_amount" else "exp"
    drop = config.dropout_rate

    def trunk(lo: int, hi: int) -> DenseNet:
        return init_dense_net(dims[lo : hi + 1], ["relu"] * (hi - lo), rng, dropout_rate=drop)

    def head(width: int, act: str) -> DenseNet:
        return init_dense_net([width, 1], [act], rng)

    embedding = rng.uniform(-0.05, 0.05, size=(n_arms, emb_dim))
    common = dict(
        config=config,
        n_arms=n_arms,
        feature_mean=feature_mean,
        feature_sd=feature_sd,
        embedding=embedding,
    )

    if config.variant == "direct_only":
        return ResponseModel(
            trunk_a=trunk(0, d_cut),
            direct_head=head(dims[d_cut], "sigmoid"),
            **common,
        )
    if config.variant == "two_model":
        trunk_a = trunk(0, len(config.hidden_dims))
        direct = head(dims[-1], "sigmoid")
        amount_embedding = rng.uniform(-0.05, 0.05, size=(n_arms, emb_dim))
        amount_trunk = trunk(0, len(config.hidden_dims))
        amount = head(dims[-1], amount_act)
        return ResponseModel(
            trunk_a=trunk_a,
            direct_head=direct,
            amount_trunk=amount_trunk,
            amount_head=amount,
            amount_embedding=amount_embedding,
            **common,
        )
    return ResponseModel(
        trunk_a=trunk(0, d_cut),
        direct_head=head(dims[d_cut], "sigmoid"),
        trunk_b=trunk(d_cut, e_cut),
        enduring_head=head(dims[e_cut], "sigmoid"),
        trunk_c=trunk(e_cut, len(config.hidden_dims)),
        amount_head=head(dims[-1], amount_act),
        **common,
    )


@dataclass
class _ModelTrace:
    """Everything the backward pass needs from one forward pass."""

    x: np.ndarray
    x_amount: np.ndarray | None
    arms: np.ndarray
    traces: dict
    f_direct: np.ndarray
    f_enduring: np.ndarray
    f_amount: np.ndarray


def _model_forward(
    model: ResponseModel,
    features: np.ndarray,
    arms: np.ndarray,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    dtype=np.float64,
) -> _ModelTrace:
    arms = np.asarray(arms, dtype=np.int64)
    z = model.standardize(features, dtype=dtype)
    if arms.shape != (z.shape[0],):
        raise ShapeError(f"arms must have shape ({z.shape[0]},), got {arms.shape}")
    if np.any(arms < 0) or np.any(arms >= model.n_arms):
        raise ValidationError("arm index out of range")
    x = np.hstack([z, model.embedding[arms].astype(dtype)])
    traces: dict = {}
    variant = model.config.variant

    ta = forward_pass(model.trunk_a, x, mode, rng, dtype=dtype)
    traces["trunk_a"] = ta
    td = forward_pass(model.direct_head, ta.output, mode, rng, dtype=dtype)
    traces["direct_head"] = td
    f_direct = td.output[:, 0]

    if variant == "direct_only":
        return _ModelTrace(x, None, arms, traces, f_direct, f_direct, f_direct)

    if variant == "two_model":
        x_amount = np.hstack([z, model.amount_embedding[arms].astype(dtype)])
        tt = forward_pass(model.amount_trunk, x_amount, mode, rng, dtype=dtype)
        traces["amount_trunk"] = tt
        tm = forward_pass(model.amount_head, tt.output, mode, rng, dtype=dtype)
        traces["amount_head"] = tm
        return _ModelTrace(x, x_amount, arms, traces, f_direct, f_direct, tm.output[:, 0])

    tb = forward_pass(model.trunk_b, ta.output, mode, rng, dtype=dtype)
    traces["trunk_b"] = tb
    te = forward_pass(model.enduring_head, tb.output, mode, rng, dtype=dtype)
    traces["enduring_head"] = te
    tc = forward_pass(model.trunk_c, tb.output, mode, rng, dtype=dtype)
    traces["trunk_c"] = tc
    tm = forward_pass(model.amount_head, tc.output, mode, rng, dtype=dtype)
    traces["amount_head"] = tm
    return _ModelTrace(x, None, arms, traces, f_direct, te.output[:, 0], tm.output[:, 0])


def _embedding_gradient(table: np.ndarray, arms: np.ndarray, rows: np.ndarray) -> np.ndarray:
    grad = np.zeros_like(table)
    np.add.at(grad, arms, rows)
    return grad


def _model_backward(
    model: ResponseModel,
    mtrace: _ModelTrace,
    grad_direct: np.ndarray,
    grad_enduring: np.ndarray,
    grad_amount: np.ndarray,
) -> list[np.ndarray]:
    """Gradients aligned with ``model.parameters()``."""
    variant = model.config.variant
    traces = mtrace.traces
    n_features = model.n_features
    gd = grad_direct.reshape(-1, 1)

    back_d = backward_pass(model.direct_head, traces["direct_head"], gd)
    if variant == "direct_only":
        back_a = backward_pass(model.trunk_a, traces["trunk_a"], back_d.input_gradient)
        emb = _embedding_gradient(model.embedding, mtrace.arms, back_a.input_gradient[:, n_features:])
        return [emb] + flatten_gradients(back_a) + flatten_gradients(back_d)

    gm = grad_amount.reshape(-1, 1)
    back_m = backward_pass(model.amount_head, traces["amount_head"], gm)

    if variant == "two_model":
        back_a = backward_pass(model.trunk_a, traces["trunk_a"], back_d.input_gradient)
        back_t = backward_pass(model.amount_trunk, traces["amount_trunk"], back_m.input_gradient)
        emb = _embedding_gradient(model.embedding, mtrace.arms, back_a.input_gradient[:, n_features:])
        emb_amount = _embedding_gradient(
            model.amount_embedding, mtrace.arms, back_t.input_gradient[:, n_features:]
        )
        return (
            [emb, emb_amount]
            + flatten_gradients(back_a)
            + flatten_gradients(back_d)
            + flatten_gradients(back_t)
            + flatten_gradients(back_m)
        )

    ge = grad_enduring.reshape(-1, 1)
    back_c = backward_pass(model.trunk_c, traces["trunk_c"], back_m.input_gradient)
    back_e = backward_pass(model.enduring_head, traces["enduring_head"], ge)
    back_b = backward_pass(
        model.trunk_b, traces["trunk_b"], back_c.input_gradient + back_e.input_gradient
    )
    back_a = backward_pass(
        model.trunk_a, traces["trunk_a"], back_b.input_gradient + back_d.input_gradient
    )
    emb = _embedding_gradient(model.embedding, mtrace.arms, back_a.input_gradient[:, n_features:])
    return (
        [emb]
        + flatten_gradients(back_a)
        + flatten_gradients(back_d)
        + flatten_gradients(back_b)
        + flatten_gradients(back_e)
        + flatten_gradients(back_c)
        + flatten_gradients(back_m)
    )


def _loss_terms(model: ResponseModel, s, y, f_direct, f_enduring, f_amount):
    """Per-sample composite loss and weight-scaled head gradients for the variant."""
    cfg = model.config
    w = cfg.weights
    variant = cfg.variant
    if variant == "direct_only":
        value, grad = cross_entropy_loss(s, f_direct)
        return w.w_direct * value, w.w_direct * grad, None, None
    if variant == "two_model":
        d_value, d_grad = cross_entropy_loss(s, f_direct)
        a_value, a_grad = tweedie_loss(y, f_amount, cfg.rho)
        value = w.w_direct * d_value + w.w_amount * a_value
        return value, w.w_direct * d_grad, None, w.w_amount * a_grad
    if variant == "l2_amount":
        d_value, d_grad = cross_entropy_loss(s, f_direct)
        e_value, e_grad = cross_entropy_loss((np.asarray(y) > 0).astype(np.float64), f_enduring)
        a_value, a_grad = l2_loss(y, f_amount)
        value = w.w_direct * d_value + w.w_enduring * e_value + w.w_amount * a_value
        return value, w.w_direct * d_grad, w.w_enduring * e_grad, w.w_amount * a_grad
    if variant == "no_enduring_ce":
        w = LossWeights(w_amount=w.w_amount, w_enduring=0.0, w_direct=w.w_direct)
    value, gd, ge, gm = hybrid_loss(s, y, f_direct, f_enduring, f_amount, weights=w, rho=cfg.rho)
    return value, gd, ge, gm


def predict(model: ResponseModel, features: np.ndarray, arms: np.ndarray) -> PredictionTriple:
    """Head outputs for each record under its given arm (eval mode, chunked)."""
    features = np.asarray(features, dtype=np.float64)
    arms = np.asarray(arms, dtype=np.int64)
    outs = {"direct": [], "enduring": [], "amount": []}
    for lo in range(0, len(features), _PREDICT_CHUNK):
        hi = lo + _PREDICT_CHUNK
        mt = _model_forward(model, features[lo:hi], arms[lo:hi], mode="eval")
        outs["direct"].append(mt.f_direct)
        outs["enduring"].append(mt.f_enduring)
        outs["amount"].append(mt.f_amount)
    amount = np.concatenate(outs["amount"]) if outs["amount"] else np.empty(0)
    if model.config.variant == "l2_amount":
        amount = np.maximum(amount, _AMOUNT_FLOOR)
    return PredictionTriple(
        direct=np.concatenate(outs["direct"]) if outs["direct"] else np.empty(0),
        enduring_propensity=np.concatenate(outs["enduring"]) if outs["enduring"] else np.empty(0),
        amount=amount,
    )


def predict_matrix(model: ResponseModel, features: np.ndarray) -> PredictionMatrix:
    """Head outputs for every arm, one forward sweep per arm."""
    features = np.asarray(features, dtype=np.float64)
    n = len(features)
    m = model.n_arms
    direct = np.empty((n, m))
    enduring = np.empty((n, m))
    amount = np.empty((n, m))
    for j in range(m):
        triple = predict(model, features, np.full(n, j, dtype=np.int64))
        direct[:, j] = triple.direct
        enduring[:, j] = triple.enduring_propensity
        amount[:, j] = triple.amount
    return PredictionMatrix(direct=direct, enduring_propensity=enduring, amount=amount)


def _mean_loss(model: ResponseModel, features, arms, s, y, chunk: int = _PREDICT_CHUNK) -> float:
    total = 0.0
    n = len(features)
    for lo in range(0, n, chunk):
        hi = lo + chunk
        mt = _model_forward(model, features[lo:hi], arms[lo:hi], mode="eval")
        value, _, _, _ = _loss_terms(model, s[lo:hi], y[lo:hi], mt.f_direct, mt.f_enduring, mt.f_amount)
        total += float(np.sum(value))
    return total / n


def _logit(p: float) -> float:
    p = min(max(p, 1e-3), 1.0 - 1e-3)
    return float(np.log(p / (1.0 - p)))


def _warm_start_heads(model: ResponseModel, s_train: np.ndarray, y_train: np.ndarray):
    """Set head biases to match the marginal response rates.

    The exp-link amount head in particular starts at the mean amount instead
    of exp(0) = 1, which saves many epochs of bias-only drift at small
    learning rates.
    """
    mean_y = float(np.mean(y_train))
    model.direct_head.layers[-1].bias[0] = _logit(float(np.mean(s_train)))
    if model.enduring_head is not None:
        model.enduring_head.layers[-1].bias[0] = _logit(float(np.mean(y_train > 0)))
    if model.amount_head is not None:
        if model.amount_head.layers[-1].activation == "exp":
            model.amount_head.layers[-1].bias[0] = float(np.log(max(mean_y, _AMOUNT_FLOOR)))
        else:
            model.amount_head.layers[-1].bias[0] = mean_y


@dataclass
class EpochStats:
    """One training epoch: mean losses and the learning rate in effect."""

    epoch: int
    train_loss: float
    val_loss: float
    learning_rate: float

    def to_dict(self) -> dict:
        return {
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val_loss": self.val_loss,
            "learning_rate": self.learning_rate,
        }


@dataclass
class TrainResult:
    model: ResponseModel
    history: list[EpochStats]
    best_epoch: int
    best_val_loss: float
    stopped_epoch: int


def train_model(
    features: np.ndarray,
    arms: np.ndarray,
    s: np.ndarray,
    y: np.ndarray,
    n_arms: int,
    config: ModelConfig | None = None,
    seed: int = 0,
) -> TrainResult:
    """Fit the configured variant with Adam, early stopping, and lr decay.

    A validation slice is split off first (seeded shuffle). The learning rate
    is multiplied by ``lr_decay`` after ``plateau_epochs`` epochs without
    validation improvement; training stops after ``patience_epochs`` of them
    and the best-validation parameters are restored. All randomness (split,
    init, batch order, dropout) runs on streams derived from ``seed``.
    """
    if config is None:
        config = ModelConfig()
    features = np.asarray(features, dtype=np.float64)
    arms = np.asarray(arms, dtype=np.int64)
    s = np.asarray(s, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(features)
    if features.ndim != 2:
        raise ShapeError("features must be 2-D")
    for name, arr in (("arms", arms), ("s", s), ("y", y)):
        if arr.shape != (n,):
            raise ShapeError(f"{name} must have length {n}")
    if n < 10:
        raise ValidationError(f"need at least 10 records to fit, got {n}")
    if not np.all(np.isfinite(features)):
        raise ValidationError("features must be finite")
    if not np.all(np.isfinite(y)) or np.any(y < 0):
        raise ValidationError("amounts must be finite and nonnegative")
    if not np.all((s == 0) | (s == 1)):
        raise ValidationError("direct flags must be 0 or 1")
    if np.any(arms < 0) or np.any(arms >= n_arms):
        raise ValidationError(f"arm indices must lie in [0, {n_arms})")

    perm = make_rng(seed, _STREAM_SPLIT).permutation(n)
    n_val = max(1, int(round(config.validation_fraction * n)))
    if n - n_val < 1:
        raise ValidationError("validation split leaves no training data")
    val_idx, train_idx = perm[:n_val], perm[n_val:]

    f_tr, f_val = features[train_idx], features[val_idx]
    a_tr, a_val = arms[train_idx], arms[val_idx]
    s_tr, s_val = s[train_idx], s[val_idx]
    y_tr, y_val = y[train_idx], y[val_idx]

    feature_mean = f_tr.mean(axis=0)
    feature_sd = np.maximum(f_tr.std(axis=0), 1e-12)
    model = build_model(config, n_arms, feature_mean, feature_sd, make_rng(seed, _STREAM_INIT))
    _warm_start_heads(model, s_tr, y_tr)

    params = model.parameters()
    adam = init_adam(params, learning_rate=config.learning_rate)
    batch_rng = make_rng(seed, _STREAM_BATCH)
    dropout_rng = make_rng(seed, _STREAM_DROPOUT)

    n_train = len(train_idx)
    best_val = np.inf
    best_params = [p.copy() for p in params]
    best_epoch = -1
    since_improve = 0
    history = []
    epoch = -1

    for epoch in range(1, config.max_epochs + 1):
        order = batch_rng.permutation(n_train)
        train_total = 0.0
        for lo in range(0, n_train, config.batch_size):
            sel = order[lo : lo + config.batch_size]
            nb = len(sel)
            mt = _model_forward(model, f_tr[sel], a_tr[sel], mode="train", rng=dropout_rng)
            value, gd, ge, gm = _loss_terms(model, s_tr[sel], y_tr[sel], mt.f_direct, mt.f_enduring, mt.f_amount)
            batch_loss = float(np.sum(value))
            if not np.isfinite(batch_loss):
                raise TrainingError(f"non-finite training loss at epoch {epoch}")
            train_total += batch_loss
            zeros = np.zeros(nb)
            grads = _model_backward(
                model,
                mt,
                gd / nb,
                ge / nb if ge is not None else zeros,
                gm / nb if gm is not None else zeros,
            )
            try:
                adam_update(params, grads, adam)
            except ValidationError as exc:
                raise TrainingError(f"diverged at epoch {epoch}: {exc}") from exc

        val_loss = _mean_loss(model, f_val, a_val, s_val, y_val)
        if not np.isfinite(val_loss):
            raise TrainingError(f"non-finite validation loss at epoch {epoch}")
        history.append(
            EpochStats(
                epoch=epoch,
                train_loss=train_total / n_train,
                val_loss=val_loss,
                learning_rate=adam.learning_rate,
            )
        )
        if val_loss < best_val - 1e-12:
            best_val = val_loss
            best_epoch = epoch
            since_improve = 0
            for bp, p in zip(best_params, params):
                bp[...] = p
        else:
            since_improve += 1
            if since_improve >= config.patience_epochs:
                break
            if since_improve % config.plateau_epochs == 0:
                adam.learning_rate *= config.lr_decay

    for p, bp in zip(params, best_params):
        p[...] = bp
    return TrainResult(
        model=model,
        history=history,
        best_epoch=best_epoch,
        best_val_loss=float(best_val),
        stopped_epoch=epoch,
    )


def model_gradient_check(
    model: ResponseModel,
    features: np.ndarray,
    arms: np.ndarray,
    s: np.ndarray,
    y: np.ndarray,
    eps: float = 1e-5,
    rng: np.random.Generator | None = None,
    samples_per_tensor: int = 8,
    fd_dtype=np.longdouble,
) -> float:
    """Finite-difference check of the whole model's gradients on one batch.

    Covers every parameter tensor including the embedding tables, using the
    variant's own composite loss (eval mode, mean over the batch). Returns
    the worst sampled relative error. The differenced loss runs in
    ``fd_dtype`` (extended precision by default) so eval round-off does not
    masquerade as gradient error on small entries, and the relu and exp-clamp
    active sets guard the differencing: an entry whose perturbation flips a
    unit across its kink is remeasured with a smaller step instead of
    averaging over the kink.
    """
    features = np.asarray(features, dtype=np.float64)
    arms = np.asarray(arms, dtype=np.int64)
    s = np.asarray(s, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(features)

    def loss_value() -> float:
        mt = _model_forward(model, features, arms, mode="eval", dtype=fd_dtype)
        value, _, _, _ = _loss_terms(
            model, s.astype(fd_dtype), y.astype(fd_dtype), mt.f_direct, mt.f_enduring, mt.f_amount
        )
        return np.sum(value) / n

    def region_signature() -> np.ndarray:
        mt = _model_forward(model, features, arms, mode="eval")
        sigs = []
        for part_name, net in model.parts():
            trace = mt.traces[part_name]
            for layer, lt in zip(net.layers, trace.layers):
                if layer.activation == "relu":
                    sigs.append(lt.pre.ravel() > 0)
                elif layer.activation == "exp":
                    sigs.append(lt.pre.ravel() < _EXP_CLIP)
        if not sigs:
            return np.zeros(0, dtype=bool)
        return np.concatenate(sigs)

    def analytic() -> list[np.ndarray]:
        mt = _model_forward(model, features, arms, mode="eval")
        _, gd, ge, gm = _loss_terms(model, s, y, mt.f_direct, mt.f_enduring, mt.f_amount)
        zeros = np.zeros(n)
        return _model_backward(
            model,
            mt,
            gd / n,
            ge / n if ge is not None else zeros,
            gm / n if gm is not None else zeros,
        )

    return max_relative_gradient_error(
        model.parameters(), loss_value, analytic, eps, rng=rng,
        samples_per_tensor=samples_per_tensor, region_signature=region_signature,
    )


# ---------------------------------------------------------------------------
# Checkpointing
# ---------------------------------------------------------------------------

_CHECKPOINT_FORMAT = 1


def save_model(model: ResponseModel, path):
    """Write a self-describing checkpoint (npz, no pickling).

    Stores every parameter array bit-exactly plus a JSON header with the
    config, variant, and per-part activations, so ``load_model`` needs
    nothing but the file.
    """
    meta = {
        "format": _CHECKPOINT_FORMAT,
        "config": model.config.to_dict(),
        "n_arms": model.n_arms,
        "parts": [
            {
                "name": name,
                "activations": [layer.activation for layer in net.layers],
                "dropout_rate": net.dropout_rate,
                "n_layers": len(net.layers),
            }
            for name, net in model.parts()
        ],
        "has_amount_embedding": model.amount_embedding is not None,
    }
    arrays = {
        "feature_mean": model.feature_mean,
        "feature_sd": model.feature_sd,
        "embedding": model.embedding,
    }
    if model.amount_embedding is not None:
        arrays["amount_embedding"] = model.amount_embedding
    for name, net in model.parts():
        for i, layer in enumerate(net.layers):
            arrays[f"{name}__w{i}"] = layer.weight
            arrays[f"{name}__b{i}"] = layer.bias
    header = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    np.savez(path, __header__=header, **arrays)


def load_model(path) -> ResponseModel:
    """Rebuild a model from ``save_model`` output, byte-for-byte."""
    with np.load(path, allow_pickle=False) as data:
        if "__header__" not in data.files:
            raise ValidationError(f"{path} is not a model checkpoint")
        meta = json.loads(bytes(data["__header__"]).decode("utf-8"))
        if meta.get("format") != _CHECKPOINT_FORMAT:
            raise ValidationError(f"unsupported checkpoint format {meta.get('format')!r}")
        config = ModelConfig.from_dict(meta["config"])
        nets: dict[str, DenseNet] = {}
        for part in meta["parts"]:
            layers = []
            for i in range(part["n_layers"]):
                layers.append(
                    DenseLayer(
                        weight=data[f"{part['name']}__w{i}"],
                        bias=data[f"{part['name']}__b{i}"],
                        activation=part["activations"][i],
                    )
                )
            nets[part["name"]] = DenseNet(layers=layers, dropout_rate=part["dropout_rate"])
        return ResponseModel(
            config=config,
            n_arms=int(meta["n_arms"]),
            feature_mean=data["feature_mean"],
            feature_sd=data["feature_sd"],
            embedding=data["embedding"],
            trunk_a=nets["trunk_a"],
            direct_head=nets["direct_head"],
            trunk_b=nets.get("trunk_b"),
            enduring_head=nets.get("enduring_head"),
            trunk_c=nets.get("trunk_c"),
            amount_head=nets.get("amount_head"),
            amount_trunk=nets.get("amount_trunk"),
            amount_embedding=data["amount_embedding"] if meta["has_amount_embedding"] else None,
        )
