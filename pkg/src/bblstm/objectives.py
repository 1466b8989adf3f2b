"""Losses, Gamma KL, ELBO assembly, Gamma priors and the Adam optimiser."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import special
from . import tape as T
from .errors import DomainError, ShapeError, UsageError
from .tape import Tensor

SHAPE_FLOOR = 1e-4
NUM_GROUPS = 5


# -- Gamma KL -----------------------------------------------------------------------


def kl_gamma(alpha_q: float, alpha_p: float, beta_p: float) -> float:
    """KL( Gamma(alpha_q, rate 1) || Gamma(alpha_p, rate beta_p) ), closed form."""
    for name, v in (("alpha_q", alpha_q), ("alpha_p", alpha_p), ("beta_p", beta_p)):
        if not (v > 0 and math.isfinite(v)):
            raise DomainError(f"{name} must be finite and > 0, got {v!r}")
    value = (
        (alpha_q - alpha_p) * special.digamma(alpha_q)
        - special.log_gamma(alpha_q)
        + special.log_gamma(alpha_p)
        - alpha_p * math.log(beta_p)
        + alpha_q * (beta_p - 1.0)
    )
    # exact zero at equality is guaranteed; tiny negative round-off is clamped
    return max(value, 0.0)


def _kl_gamma_arrays(aq, ap, bp):
    return (
        (aq - ap) * special.digamma_array(aq)
        - special.log_gamma_array(aq)
        + special.log_gamma_array(ap)
        - ap * np.log(bp)
        + aq * (bp - 1.0)
    )


def kl_gamma_tensor(alpha_q, alpha_p, beta_p) -> Tensor:
    """Elementwise Gamma KL as a tape node, differentiable in all three arguments."""
    aq, ap, bp = T._lift(alpha_q), T._lift(alpha_p), T._lift(beta_p)
    shape = np.broadcast_shapes(aq.shape, ap.shape, bp.shape)
    a, p, b = np.broadcast_arrays(aq.data, ap.data, bp.data)
    if not (np.all(a > 0) and np.all(p > 0) and np.all(b > 0)):
        raise DomainError("kl_gamma_tensor needs positive shapes and rates")
    out = _kl_gamma_arrays(a, p, b)

    def back(g):
        psi_q = special.digamma_array(a)
        d_aq = (a - p) * special.trigamma_array(a) + b - 1.0
        d_ap = special.digamma_array(p) - psi_q - np.log(b)
        d_bp = a - p / b
        return (
            T._unbroadcast(g * d_aq, aq.shape),
            T._unbroadcast(g * d_ap, ap.shape),
            T._unbroadcast(g * d_bp, bp.shape),
        )

    return T._emit("kl_gamma", np.broadcast_to(out, shape).copy(), (aq, ap, bp), back)


# -- priors ---------------------------------------------------------------------------


@dataclass
class GammaPrior:
    """Prior Gamma(shape, rate) for each of the five shape groups at one step.

    Entries may be floats, arrays broadcastable to [batch, hidden] or tensors.
    """

    shapes: list = field(default_factory=lambda: [1.0] * NUM_GROUPS)
    rates: list = field(default_factory=lambda: [1.0] * NUM_GROUPS)

    @classmethod
    def constant(cls, shape: float = 1.0, rate: float = 1.0) -> "GammaPrior":
        return cls([shape] * NUM_GROUPS, [rate] * NUM_GROUPS)

    def shape(self, j: int):
        return self.shapes[j]

    def rate(self, j: int):
        return self.rates[j]


@dataclass
class PriorSpec:
    mode: str = "constant"  # "constant" | "kernel"
    shapes: tuple = (1.0,) * NUM_GROUPS
    rates: tuple = (1.0,) * NUM_GROUPS
    length_scale: float = 1.0
    output_scale: float = 1.0
    lam: float = 0.01

    def __post_init__(self):
        if self.mode not in ("constant", "kernel"):
            raise UsageError(f"prior mode must be 'constant' or 'kernel', got {self.mode!r}")
        if len(self.shapes) != NUM_GROUPS or len(self.rates) != NUM_GROUPS:
            raise UsageError("prior needs one shape and one rate per group (5)")
        values = (*self.shapes, *self.rates, self.length_scale, self.output_scale)
        if not all(v > 0 for v in values):
            raise UsageError("prior shapes, rates, length scale and output scale must be > 0")
        if self.lam < 0:
            raise UsageError("lambda must be >= 0")


LAMBDA_SWEEP = (0.001, 0.01, 0.1, 1.0)


def rbf_prior_shape(feat_t, feat_prev, length_scale: float, output_scale: float) -> float:
    """s * exp(-||b_t - b_{t-1}||^2 / (2 l^2)) + floor: the prior shape for groups 1-2."""
    a = np.asarray(feat_t, dtype=np.float64)
    b = np.asarray(feat_prev, dtype=np.float64)
    if a.shape != b.shape:
        raise UsageError(f"feature vectors differ in length: {a.shape} vs {b.shape}")
    if not (length_scale > 0 and output_scale > 0):
        raise DomainError("length and output scale must be > 0")
    d2 = float(np.sum((a - b) ** 2))
    return output_scale * math.exp(-d2 / (2.0 * length_scale**2)) + SHAPE_FLOOR


def rbf_prior_shape_tensor(feat_t: np.ndarray, feat_prev: np.ndarray, log_length: Tensor, log_scale: Tensor) -> Tensor:
    """Batched kernel prior shape [B, 1] with learnable log length/output scales."""
    d2 = np.sum((np.asarray(feat_t) - np.asarray(feat_prev)) ** 2, axis=-1, keepdims=True)
    inv_l2 = T.exp(-2.0 * log_length)
    return T.exp(log_scale - 0.5 * inv_l2 * d2) + SHAPE_FLOOR


# -- objectives ----------------------------------------------------------------------


def elbo_loss(nll, kl_sum, lam: float):
    """Negative ELBO in minimisation form: nll + lambda * KL."""
    if lam < 0:
        raise UsageError("lambda must be >= 0")
    if lam == 0:
        return nll
    return nll + lam * kl_sum


def linear_head(h: Tensor, W: Tensor, b: Tensor) -> Tensor:
    return h @ W + b


def classification_loss(h_final: Tensor, labels, W: Tensor, b: Tensor) -> Tensor:
    """Mean softmax cross-entropy of a linear head on the final hidden state."""
    labels = np.asarray(labels, dtype=np.int64)
    logits = linear_head(h_final, W, b)
    n_classes = logits.shape[-1]
    if labels.shape != (logits.shape[0],):
        raise ShapeError("classification_loss labels", labels.shape, logits.shape)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise UsageError(f"labels must lie in [0, {n_classes})")
    logp = T.log_softmax(logits)
    picked = np.zeros(logits.shape)
    picked[np.arange(labels.size), labels] = 1.0
    return -T.sum(logp * picked) * (1.0 / labels.size)


def tagging_loss(hiddens: Sequence[Tensor], labels, mask, W: Tensor, b: Tensor) -> Tensor:
    """Per-step softmax cross-entropy averaged over valid steps of the batch."""
    labels = np.asarray(labels, dtype=np.int64)
    mask = np.asarray(mask, dtype=np.float64)
    total = None
    for t, h in enumerate(hiddens):
        logits = linear_head(h, W, b)
        picked = np.zeros(logits.shape)
        picked[np.arange(labels.shape[1]), labels[t]] = mask[t]
        term = T.sum(T.log_softmax(logits) * picked)
        total = term if total is None else total + term
    return -total * (1.0 / max(mask.sum(), 1.0))


def bernoulli_nll_logits(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Elementwise -log Bernoulli(targets | sigmoid(logits)) = softplus(z) - y z."""
    return T.softplus(logits) - logits * targets


def polyphonic_nll(hiddens: Sequence[Tensor], targets, mask, W: Tensor, b: Tensor) -> Tensor:
    """Frame-level Bernoulli NLL of next-step note predictions.

    ``hiddens[t]`` is the state after consuming input frame t and predicts
    ``targets[t]`` (frame t + 1 of the piece).  Notes are summed per frame,
    frames averaged over each sequence's valid steps, then over sequences.
    """
    targets = np.asarray(targets, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    if not np.all((targets == 0) | (targets == 1)):
        raise UsageError("polyphonic targets must be binary")
    if targets.shape[:2] != mask.shape or len(hiddens) != mask.shape[0]:
        raise ShapeError("polyphonic_nll", targets.shape, mask.shape)
    lengths = np.maximum(mask.sum(axis=0), 1.0)
    weights = mask / lengths[None, :] / mask.shape[1]
    total = None
    for t, h in enumerate(hiddens):
        frame = T.sum(bernoulli_nll_logits(linear_head(h, W, b), targets[t]), axis=-1)
        term = T.sum(frame * weights[t])
        total = term if total is None else total + term
    return total


# -- Adam ---------------------------------------------------------------------------------


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    state: AdamState,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> AdamState:
    """Bias-corrected Adam; updates ``params`` in place and returns ``state``."""
    state.t += 1
    c1 = 1.0 - beta1**state.t
    c2 = 1.0 - beta2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ShapeError(f"adam_step {name}", p.shape, g.shape)
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
    return state
