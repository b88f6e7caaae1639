"""Minimal dense feed-forward network engine with hand-derived gradients.

Everything runs in float64. A network is a plain stack of affine layers with
one of four activations (relu, sigmoid, exp, identity); dropout is the
inverted kind, applied after each layer's activation in train mode only, so
eval mode needs no rescaling. Backpropagation is written out explicitly for
this fixed topology and validated against central finite differences by
``gradient_check``.

Randomness is always drawn from a :class:`numpy.random.Generator` backed by
PCG64; ``make_rng`` builds one from a seed plus an optional stream key so
identical seeds give identical streams everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError, ValidationError

ACTIVATIONS = ("relu", "sigmoid", "exp", "identity")

# exp() pre-activations are clamped here so forward outputs stay finite even
# if training wanders; the derivative is zeroed past the clamp to stay
# consistent with the clamped forward value.
_EXP_CLIP = 500.0


def make_rng(seed: int, *stream: int) -> np.random.Generator:
    """Deterministic PCG64 generator for ``seed`` and an optional stream key."""
    entropy = (int(seed),) + tuple(int(s) for s in stream)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def _activate(name: str, pre: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(pre, 0.0)
    if name == "sigmoid":
        # Stable for large |pre|: exp argument is always <= 0.
        e = np.exp(-np.abs(pre))
        return np.where(pre >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    if name == "exp":
        return np.exp(np.minimum(pre, _EXP_CLIP))
    if name == "identity":
        return pre
    raise ValidationError(f"unknown activation {name!r}; expected one of {ACTIVATIONS}")


def _activation_derivative(name: str, pre: np.ndarray, activated: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (pre > 0.0).astype(np.float64)
    if name == "sigmoid":
        return activated * (1.0 - activated)
    if name == "exp":
        return np.where(pre < _EXP_CLIP, activated, 0.0)
    if name == "identity":
        return np.ones_like(pre)
    raise ValidationError(f"unknown activation {name!r}; expected one of {ACTIVATIONS}")


@dataclass
class DenseLayer:
    """One affine layer: ``activation(x @ weight + bias)``."""

    weight: np.ndarray  # (fan_in, fan_out)
    bias: np.ndarray  # (fan_out,)
    activation: str = "identity"

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weight.ndim != 2:
            raise ShapeError(f"weight must be 2-D, got shape {self.weight.shape}")
        if self.bias.shape != (self.weight.shape[1],):
            raise ShapeError(
                f"bias shape {self.bias.shape} does not match fan_out {self.weight.shape[1]}"
            )
        if self.activation not in ACTIVATIONS:
            raise ValidationError(
                f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}"
            )

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]


@dataclass
class DenseNet:
    """A stack of dense layers with a shared inverted-dropout rate."""

    layers: list[DenseLayer]
    dropout_rate: float = 0.0

    def __post_init__(self):
        if not self.layers:
            raise ValidationError("a DenseNet needs at least one layer")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValidationError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.fan_out != b.fan_in:
                raise ShapeError(
                    f"layer dims incompatible: fan_out {a.fan_out} feeds fan_in {b.fan_in}"
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0].fan_in

    @property
    def output_dim(self) -> int:
        return self.layers[-1].fan_out


def init_dense_net(
    dims: Sequence[int],
    activations: Sequence[str],
    rng: np.random.Generator,
    dropout_rate: float = 0.0,
) -> DenseNet:
    """Build a net with fan-in variance-scaled uniform weights and zero biases.

    ``dims`` is ``[input, h1, ..., out]``; weights for a layer with fan-in f
    are drawn from U(-sqrt(6/f), sqrt(6/f)).
    """
    if len(activations) != len(dims) - 1:
        raise ValidationError(
            f"need {len(dims) - 1} activations for {len(dims)} dims, got {len(activations)}"
        )
    layers = []
    for fan_in, fan_out, act in zip(dims, dims[1:], activations):
        limit = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-limit, limit, size=(fan_in, fan_out))
        layers.append(DenseLayer(weight=w, bias=np.zeros(fan_out), activation=act))
    return DenseNet(layers=layers, dropout_rate=dropout_rate)


@dataclass
class LayerTrace:
    pre: np.ndarray  # pre-activation
    activated: np.ndarray  # after activation, before dropout
    output: np.ndarray  # after dropout (== activated in eval mode)
    dropout_mask: np.ndarray | None  # scaled keep mask, train mode only


@dataclass
class ForwardTrace:
    """Per-layer activations of one forward pass, inputs included."""

    inputs: np.ndarray
    layers: list[LayerTrace] = field(default_factory=list)

    @property
    def output(self) -> np.ndarray:
        return self.layers[-1].output


def forward_pass(
    net: DenseNet,
    batch: np.ndarray,
    mode: str = "eval",
    rng: np.random.Generator | None = None,
    dtype=np.float64,
) -> ForwardTrace:
    """Run the net over a (batch, features) matrix and keep every activation.

    In train mode dropout masks are drawn from ``rng`` and scaled by
    1/(1 - rate) so the eval-mode output is the expectation of the train-mode
    output wherever the dropped activations feed a linear map.

    ``dtype`` upgrades the arithmetic (e.g. to ``np.longdouble``) without
    touching the stored float64 parameters; finite-difference checks use that
    to push evaluation round-off below the differencing scale.
    """
    if mode not in ("train", "eval"):
        raise ValidationError(f"mode must be 'train' or 'eval', got {mode!r}")
    batch = np.asarray(batch, dtype=dtype)
    if batch.ndim != 2:
        raise ShapeError(f"batch must be 2-D (batch, features), got shape {batch.shape}")
    if batch.shape[1] != net.input_dim:
        raise ShapeError(
            f"batch has {batch.shape[1]} columns but the net expects {net.input_dim}"
        )
    if not np.all(np.isfinite(batch)):
        raise ValidationError("batch contains non-finite values")
    use_dropout = mode == "train" and net.dropout_rate > 0.0
    if use_dropout and rng is None:
        raise ValidationError("train-mode forward with dropout needs an rng")

    trace = ForwardTrace(inputs=batch)
    x = batch
    for layer in net.layers:
        pre = x @ layer.weight + layer.bias
        activated = _activate(layer.activation, pre)
        if use_dropout:
            keep = rng.random(activated.shape) >= net.dropout_rate
            mask = keep / (1.0 - net.dropout_rate)
            out = activated * mask
        else:
            mask = None
            out = activated
        trace.layers.append(LayerTrace(pre=pre, activated=activated, output=out, dropout_mask=mask))
        x = out
    return trace


@dataclass
class BackwardResult:
    """Gradients from one backward pass, aligned with ``net.layers``."""

    weight_grads: list[np.ndarray]
    bias_grads: list[np.ndarray]
    input_gradient: np.ndarray


def backward_pass(net: DenseNet, trace: ForwardTrace, output_gradient: np.ndarray) -> BackwardResult:
    """Backpropagate d(loss)/d(output) through a recorded forward pass.

    Returns the gradient of the scalar loss with respect to every weight and
    bias, plus the gradient with respect to the input batch (needed when nets
    are chained). Deterministic given the trace (dropout masks are replayed,
    not redrawn).
    """
    if len(trace.layers) != len(net.layers):
        raise ShapeError(
            f"trace has {len(trace.layers)} layers but the net has {len(net.layers)}"
        )
    output_gradient = np.asarray(output_gradient, dtype=np.float64)
    if output_gradient.shape != trace.output.shape:
        raise ShapeError(
            f"output_gradient shape {output_gradient.shape} does not match "
            f"net output shape {trace.output.shape}"
        )

    weight_grads: list[np.ndarray] = [None] * len(net.layers)  # type: ignore[list-item]
    bias_grads: list[np.ndarray] = [None] * len(net.layers)  # type: ignore[list-item]
    g = output_gradient
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        ltrace = trace.layers[i]
        if ltrace.pre.shape != (g.shape[0], layer.fan_out):
            raise ShapeError(f"trace layer {i} does not match the net (stale trace?)")
        if ltrace.dropout_mask is not None:
            g = g * ltrace.dropout_mask
        dpre = g * _activation_derivative(layer.activation, ltrace.pre, ltrace.activated)
        below = trace.layers[i - 1].output if i > 0 else trace.inputs
        weight_grads[i] = below.T @ dpre
        bias_grads[i] = dpre.sum(axis=0)
        g = dpre @ layer.weight.T
    return BackwardResult(weight_grads=weight_grads, bias_grads=bias_grads, input_gradient=g)


def net_parameters(net: DenseNet) -> list[np.ndarray]:
    """Flat parameter list [W0, b0, W1, b1, ...] (views, not copies)."""
    params: list[np.ndarray] = []
    for layer in net.layers:
        params.append(layer.weight)
        params.append(layer.bias)
    return params


def flatten_gradients(back: BackwardResult) -> list[np.ndarray]:
    """Gradients in the same order as ``net_parameters``."""
    grads: list[np.ndarray] = []
    for dw, db in zip(back.weight_grads, back.bias_grads):
        grads.append(dw)
        grads.append(db)
    return grads


@dataclass
class AdamState:
    """Adam moments and hyperparameters for one flat parameter list."""

    first_moment: list[np.ndarray]
    second_moment: list[np.ndarray]
    step_count: int = 0
    learning_rate: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def init_adam(
    params: Sequence[np.ndarray],
    learning_rate: float = 2e-4,
    beta1: float = 0.9,
    beta2: float = 0.999,
    epsilon: float = 1e-8,
) -> AdamState:
    return AdamState(
        first_moment=[np.zeros_like(p) for p in params],
        second_moment=[np.zeros_like(p) for p in params],
        step_count=0,
        learning_rate=learning_rate,
        beta1=beta1,
        beta2=beta2,
        epsilon=epsilon,
    )


def adam_update(
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    state: AdamState,
) -> tuple[Sequence[np.ndarray], AdamState]:
    """One bias-corrected Adam step, in place on ``params`` and ``state``.

    Rejects non-finite gradients before touching anything, so a rejected
    update leaves parameters and moments unchanged.
    """
    if len(params) != len(grads) or len(params) != len(state.first_moment):
        raise ShapeError(
            f"got {len(params)} params, {len(grads)} grads, "
            f"{len(state.first_moment)} moment slots"
        )
    for p, g, m in zip(params, grads, state.first_moment):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"param shape {p.shape} vs grad {g.shape} vs moment {m.shape}")
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise ValidationError("non-finite gradient; update rejected")

    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1**t
    bias2 = 1.0 - b2**t
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        m_hat = m / bias1
        v_hat = v / bias2
        p -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params, state


def _entry_gradient_error(
    flat: np.ndarray,
    i: int,
    analytic: float,
    eps: float,
    loss_value: Callable[[], float],
    region_signature: Callable[[], np.ndarray] | None,
    refine_rtol: float,
    max_refinements: int,
) -> float:
    """Relative error for one parameter entry, with kink-aware step refinement."""

    def central(e: float) -> float:
        orig = flat[i]
        flat[i] = orig + e
        up = loss_value()
        flat[i] = orig - e
        down = loss_value()
        flat[i] = orig
        return float((up - down) / (2.0 * e))

    def same_region(e: float) -> bool:
        orig = flat[i]
        flat[i] = orig + e
        sig_up = region_signature()
        flat[i] = orig - e
        sig_dn = region_signature()
        flat[i] = orig
        return bool(np.array_equal(sig_up, sig_dn))

    def rel(numeric: float) -> float:
        denom = max(abs(analytic), abs(numeric), 1e-12)
        return float(abs(analytic - numeric) / denom)

    e = eps
    err = rel(central(e))
    if region_signature is None:
        return err
    for _ in range(max_refinements):
        if err <= refine_rtol or same_region(e):
            break
        e /= 10.0
        err = rel(central(e))
    return err


def max_relative_gradient_error(
    params: Sequence[np.ndarray],
    loss_value: Callable[[], float],
    analytic_grads: Callable[[], Sequence[np.ndarray]],
    eps: float,
    rng: np.random.Generator | None = None,
    samples_per_tensor: int = 8,
    region_signature: Callable[[], np.ndarray] | None = None,
    refine_rtol: float = 1e-6,
    max_refinements: int = 3,
) -> float:
    """Worst sampled relative error between analytic and central-difference grads.

    For each parameter tensor, up to ``samples_per_tensor`` entries are
    perturbed by +/- eps (all entries if the tensor is that small). The
    relative error for one entry is |analytic - numeric| divided by
    max(|analytic|, |numeric|, 1e-12).

    Central differences only measure the derivative when both evaluation
    points sit in the same smooth piece of the loss; a relu unit or an exp
    clamp switching state inside the interval turns the measurement into an
    average over a kink. When ``region_signature`` is given (a closure that
    reports the active-set pattern at the current parameters), any entry
    whose error exceeds ``refine_rtol`` while the two perturbed points
    disagree on the signature is remeasured with a 10x smaller step, up to
    ``max_refinements`` times. An entry whose error is large while the
    region is stable is a genuine gradient discrepancy and is kept as is.
    """
    if eps <= 0:
        raise ValidationError(f"eps must be positive, got {eps}")
    if rng is None:
        rng = make_rng(0)
    grads = [np.asarray(g, dtype=np.float64) for g in analytic_grads()]
    if len(grads) != len(params):
        raise ShapeError(f"{len(grads)} gradients for {len(params)} parameter tensors")
    worst = 0.0
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        n = p.size
        if n <= samples_per_tensor:
            idx = np.arange(n)
        else:
            idx = rng.choice(n, size=samples_per_tensor, replace=False)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in idx:
            err = _entry_gradient_error(
                flat, int(i), float(gflat[i]), eps, loss_value,
                region_signature, refine_rtol, max_refinements,
            )
            worst = max(worst, err)
    return worst


def gradient_check(
    net: DenseNet,
    loss_fn: Callable[[np.ndarray], tuple[float, np.ndarray]],
    batch: np.ndarray,
    eps: float = 1e-5,
    rng: np.random.Generator | None = None,
    samples_per_tensor: int = 8,
    fd_dtype=np.longdouble,
) -> float:
    """Check ``backward_pass`` against finite differences for one net and loss.

    ``loss_fn`` maps the net output to ``(scalar loss, d loss / d output)``.
    Runs in eval mode so the loss surface is deterministic. Returns the max
    sampled relative error; it raises nothing and reports a number even for
    badly broken gradients.

    The differenced loss is evaluated in ``fd_dtype`` (extended precision by
    default) because float64 round-off at eps=1e-5 would swamp the smallest
    genuine gradient entries; the analytic side stays in float64.
    """

    def loss_value() -> float:
        trace = forward_pass(net, batch, mode="eval", dtype=fd_dtype)
        value, _ = loss_fn(trace.output)
        return value

    def analytic() -> list[np.ndarray]:
        trace = forward_pass(net, batch, mode="eval")
        _, dout = loss_fn(trace.output)
        back = backward_pass(net, trace, dout)
        return flatten_gradients(back)

    return max_relative_gradient_error(
        net_parameters(net), loss_value, analytic, eps, rng=rng,
        samples_per_tensor=samples_per_tensor,
    )
