"""Memory-based parameter adaptation: training, local adaptation and the baseline predictors.

Local adaptation minimises, over a correction ``delta`` restricted to a mask,

    sum_k w_k * NLL(g_{theta + delta}(h_k), v_k) + beta/2 * ||delta||^2

for a fixed number of optimizer steps starting from ``delta = 0``.  The
prediction uses ``theta + delta`` and the correction is then thrown away, so
the trained parameters are never written to.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import EmptyBatchError, EmptyMemoryError
from .memory import Context, EpisodicMemory
from .nn import EmbeddingNet, OutputNet, softmax
from .optim import Optimizer, make_optimizer

LOCAL_OPTIMIZERS = ("sgd", "rmsprop")
MASKS = ("all", "last_layer")


@dataclass
class AdaptationConfig:
    alpha_m: float = 0.5
    beta: float = 0.0
    steps: int = 10
    k: int = 10
    epsilon: float = 1e-3
    mask: str = "all"
    local_optimizer: str = "sgd"

    def __post_init__(self):
        if self.alpha_m < 0:
            raise ValueError("alpha_m must be nonnegative")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.epsilon < 0:
            raise ValueError("epsilon must be nonnegative")
        if self.mask not in MASKS:
            raise ValueError(f"mask must be one of {MASKS}")
        if self.local_optimizer not in LOCAL_OPTIMIZERS:
            raise ValueError(f"local_optimizer must be one of {LOCAL_OPTIMIZERS}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "AdaptationConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown adaptation keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AdaptedOverlay:
    """Ephemeral ``theta + delta`` for one query. ``base`` is never modified."""

    base: np.ndarray
    support: np.ndarray
    delta: np.ndarray = None
    optimizer: Optimizer | None = field(default=None, repr=False)

    def __post_init__(self):
        if self.delta is None:
            self.delta = np.zeros_like(self.base)

    @property
    def params(self) -> np.ndarray:
        return self.base + self.delta


def adaptation_objective(net: OutputNet, params, context: Context, beta: float,
                         theta_ref, mask=None) -> float:
    """Weighted context NLL at ``params`` plus ``beta/2 * ||params - theta_ref||^2`` on the mask."""
    if len(context) == 0:
        raise EmptyBatchError("empty context")
    m = net.mask(mask)
    losses = net.per_example_loss(context.keys, context.values, params=params)
    d = (np.asarray(params) - np.asarray(theta_ref))[m]
    return float(np.dot(context.weights, losses) + 0.5 * beta * np.dot(d, d))


def adaptation_grad(net: OutputNet, params, context: Context, beta: float, theta_ref, mask=None):
    """``(objective, gradient)`` of :func:`adaptation_objective` with respect to ``params``."""
    if len(context) == 0:
        raise EmptyBatchError("empty context")
    m = net.mask(mask)
    loss, grad = net.loss_and_grad(context.keys, context.values, context.weights, params=params, mask=m)
    if beta:
        d = np.where(m, np.asarray(params) - np.asarray(theta_ref), 0.0)
        loss += 0.5 * beta * float(np.dot(d, d))
        grad = grad + beta * d
    return loss, grad


def new_overlay(net: OutputNet, cfg: AdaptationConfig, theta=None) -> AdaptedOverlay:
    base = net.params if theta is None else theta
    opt = make_optimizer(cfg.local_optimizer, base.size, cfg.alpha_m)
    return AdaptedOverlay(base=base, support=net.mask(cfg.mask), optimizer=opt)


def mbpa_step(net: OutputNet, overlay: AdaptedOverlay, context: Context, cfg: AdaptationConfig,
              grad_fn=adaptation_grad) -> AdaptedOverlay:
    """One local optimizer step on the adaptation objective at ``base + delta``.

    ``grad_fn`` is swappable so verification code can inject faults.
    """
    if len(context) == 0:
        raise EmptyBatchError("empty context")
    if overlay.optimizer is None:
        overlay.optimizer = make_optimizer(cfg.local_optimizer, overlay.base.size, cfg.alpha_m)
    if cfg.alpha_m == 0.0:
        return overlay
    _, g = grad_fn(net, overlay.params, context, cfg.beta, overlay.base, overlay.support)
    g = np.where(overlay.support, g, 0.0)
    overlay.delta = overlay.optimizer.step(overlay.delta, g)
    return overlay


def adapt(net: OutputNet, context: Context, cfg: AdaptationConfig, theta=None, grad_fn=adaptation_grad):
    """Run ``cfg.steps`` MbPA steps from a zero correction; returns the overlay."""
    overlay = new_overlay(net, cfg, theta)
    if cfg.alpha_m == 0.0:
        return overlay
    for _ in range(cfg.steps):
        mbpa_step(net, overlay, context, cfg, grad_fn)
    return overlay


def predict_parametric(embed: EmbeddingNet, net: OutputNet, x):
    return net.forward(embed(x))


def predict_mbpa(embed: EmbeddingNet, net: OutputNet, memory: EpisodicMemory, x,
                 cfg: AdaptationConfig, fallback: bool = True, context: Context | None = None):
    """Adapt a private copy of the output parameters on the query's neighbours, then predict.

    When memory is empty the parametric prediction is returned, or
    :class:`EmptyMemoryError` is raised if ``fallback`` is false.  A
    precomputed ``context`` can be passed to share one lookup between predictors.
    """
    q = embed(x)
    if cfg.steps == 0 or cfg.alpha_m == 0.0:
        return net.forward(q)
    if context is None:
        if len(memory) == 0:
            if fallback:
                return net.forward(q)
            raise EmptyMemoryError("predict_mbpa with empty memory")
        context = memory.lookup(q, cfg.k)
    overlay = adapt(net, context, cfg)
    return net.forward(q, params=overlay.params)


def predict_attention(context: Context, num_classes: int) -> np.ndarray:
    """Kernel-weighted class histogram of the neighbours."""
    if len(context) == 0:
        raise EmptyBatchError("empty context")
    values = np.asarray(context.values)
    if not np.issubdtype(values.dtype, np.integer):
        raise TypeError("predict_attention needs class-id values; use predict_attention_regression")
    p = np.bincount(values, weights=context.weights, minlength=num_classes)
    return p / np.sum(context.weights)


def predict_attention_regression(context: Context) -> float:
    """Kernel-weighted mean of scalar neighbour values."""
    if len(context) == 0:
        raise EmptyBatchError("empty context")
    w = context.weights
    return float(np.dot(w, np.asarray(context.values, dtype=np.float64)) / np.sum(w))


def fit_logits(context: Context, num_classes: int, steps: int = 500, lr: float = 1.0,
               tol: float = 1e-8) -> np.ndarray:
    """Fit a constant logit vector to the context by gradient descent on weighted NLL.

    Starting from zero logits, each step moves ``z`` against the gradient
    ``softmax(z) - target`` scaled per class by ``1 / softmax(z)``.  Without
    the scaling a class absent from the context (optimal logit at minus
    infinity) is only approached at rate ``O(1/t)``; with it that logit falls
    by ``lr`` per step.  Upward moves are capped at ``10 * lr`` so a class whose
    probability is badly underestimated cannot overshoot.  Stops once the
    plain gradient norm is below ``tol``.  At the optimum the softmax equals
    the attention prediction.
    """
    if len(context) == 0:
        raise EmptyBatchError("empty context")
    w = context.weights / np.sum(context.weights)
    target = np.bincount(np.asarray(context.values), weights=w, minlength=num_classes)
    z = np.zeros(num_classes)
    for _ in range(steps):
        p = softmax(z)
        g = p - target
        if np.sqrt(np.dot(g, g)) < tol:
            break
        z -= lr * np.maximum(g / p, -10.0)
        z -= z.max()
    return softmax(z)


def mix(p_param, p_mem, lam: float) -> np.ndarray:
    """Decision-level blend ``lam * p_param + (1 - lam) * p_mem``."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    return lam * np.asarray(p_param) + (1.0 - lam) * np.asarray(p_mem)


def predict_mixture(embed: EmbeddingNet, net: OutputNet, memory: EpisodicMemory, x, lam: float,
                    k: int = 10, context: Context | None = None) -> np.ndarray:
    q = embed(x)
    p_param = net.forward(q)
    if lam == 1.0:
        return mix(p_param, np.zeros_like(p_param), 1.0)
    if context is None:
        context = memory.lookup(q, k)
    return mix(p_param, predict_attention(context, net.output_dim), lam)


def predict_random_memory(embed: EmbeddingNet, net: OutputNet, memory: EpisodicMemory, x,
                          cfg: AdaptationConfig, rng: np.random.Generator):
    """MbPA on ``k`` uniformly random memory entries with uniform weights (naive replay control)."""
    q = embed(x)
    if cfg.steps == 0 or cfg.alpha_m == 0.0 or len(memory) == 0:
        return net.forward(q)
    context = memory.sample(cfg.k, rng, query=q)
    overlay = adapt(net, context, cfg)
    return net.forward(q, params=overlay.params)


def train_step(embed: EmbeddingNet, net: OutputNet, opt: Optimizer, memory: EpisodicMemory | None,
               xs, ys, store=True) -> float:
    """One optimizer step on the mean batch loss, then append the embedded batch to memory.

    No local adaptation happens here.  ``store`` may be a boolean array picking
    which batch rows get written to memory.  Returns the pre-step mean loss.
    """
    xs = np.asarray(xs, dtype=np.float64)
    if len(xs) == 0:
        raise EmptyBatchError("train_step needs a non-empty batch")
    h = embed(xs)
    b = len(xs)
    loss, grad = net.loss_and_grad(h, ys, np.full(b, 1.0 / b))
    net.params = opt.step(net.params, grad)
    if memory is not None:
        if store is True:
            memory.extend(h, ys)
        elif store is not False:
            keep = np.asarray(store, dtype=bool)
            if keep.any():
                memory.extend(h[keep], np.asarray(ys)[keep])
    return loss
