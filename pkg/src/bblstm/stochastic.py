"""Random streams, Gamma / binary-concrete sampling and pathwise gradients."""

from __future__ import annotations

import math
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass

import numpy as np
from numba import njit

from . import special
from .errors import DomainError, NumericError

DRAW_FLOOR = 1e-12
GUMBEL_CLAMP = 1e-12
PDF_UNDERFLOW = 1e-290
_LOG_PDF_UNDERFLOW = math.log(PDF_UNDERFLOW)
_MASK64 = (1 << 64) - 1


class RngStream:
    """Counter-based random stream keyed by ``(seed, stream_id)``.

    Backed by Philox, whose 128-bit key is exactly the pair of 64-bit words
    ``(seed, stream_id)``; identical keys give identical draws on every
    platform.  ``spawn(i)`` derives a child key deterministically, so draws
    for timestep ``t`` and gate group ``j`` do not depend on the order in
    which other streams are consumed.
    """

    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed) & _MASK64
        self.stream_id = int(stream_id) & _MASK64
        key = np.array([self.seed, self.stream_id], dtype=np.uint64)
        self._gen = np.random.Generator(np.random.Philox(key=key))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def spawn(self, index: int) -> "RngStream":
        mixed = np.random.SeedSequence([self.stream_id & 0xFFFFFFFF, self.stream_id >> 32, int(index), 0x5EED])
        child_id = int(mixed.generate_state(1, dtype=np.uint64)[0])
        return RngStream(self.seed, child_id)

    def uniform(self, size=None) -> np.ndarray:
        return self._gen.random(size)

    def normal(self, size=None) -> np.ndarray:
        return self._gen.standard_normal(size)

    def gumbel(self, size=None) -> np.ndarray:
        u = np.clip(self._gen.random(size), GUMBEL_CLAMP, 1.0 - GUMBEL_CLAMP)
        return -np.log(-np.log(u))

    def permutation(self, n: int) -> np.ndarray:
        """Fisher-Yates shuffle of ``range(n)`` driven by this stream."""
        perm = np.arange(n)
        for i in range(n - 1, 0, -1):
            j = int(self._gen.integers(0, i + 1))
            perm[i], perm[j] = perm[j], perm[i]
        return perm


@dataclass(frozen=True)
class GammaDraw:
    shape: float
    value: float
    pathwise_grad: float
    boost: float = 1.0


# -- Gamma --------------------------------------------------------------------


@njit(cache=True)
def _squeeze_round(d, c, z, u, out, pending):
    """One Marsaglia-Tsang attempt for every pending index.

    ``z``/``u`` hold one normal/uniform per pending index, consumed in order.
    Returns the indices still pending after this round.
    """
    still = np.empty(pending.size, dtype=np.int64)
    n_left = 0
    for k in range(pending.size):
        idx = pending[k]
        zk = z[k]
        v = 1.0 + c[idx] * zk
        v = v * v * v
        accepted = False
        if v > 0.0:
            z2 = zk * zk
            uk = u[k]
            if uk < 1.0 - 0.0331 * z2 * z2:
                accepted = True
            elif math.log(max(uk, 1e-300)) < 0.5 * z2 + d[idx] * (1.0 - v + math.log(v)):
                accepted = True
        if accepted:
            out[idx] = d[idx] * v
        else:
            still[n_left] = idx
            n_left += 1
    return still[:n_left]


def _marsaglia_tsang(shape: np.ndarray, rng: RngStream) -> np.ndarray:
    """Gamma(shape, 1) draws for shape >= 1 via the Marsaglia-Tsang squeeze."""
    d = (shape - 1.0 / 3.0).ravel()
    c = 1.0 / np.sqrt(9.0 * d)
    out = np.empty_like(d)
    pending = np.arange(d.size, dtype=np.int64)
    while pending.size:
        z = rng.normal(pending.size)
        u = rng.uniform(pending.size)
        pending = _squeeze_round(d, c, z, u, out, pending)
    return out.reshape(shape.shape)


class QuantileReplay:
    """Common random numbers for Gamma draws in quantile space.

    Under :meth:`recording`, every :func:`sample_gamma_array` call stores the
    CDF level of each draw (the upper tail for draws right of ``a + 1``, for
    precision).  Under :meth:`replaying`, the calls are matched up in the same
    order and each draw is recomputed as the inverse CDF of the recorded level
    at the *current* shape.  This is the transport map whose derivative the
    implicit pathwise gradient computes, so finite differences taken while
    replaying agree with backward draw by draw.
    """

    def __init__(self):
        self._levels: list[tuple[np.ndarray, np.ndarray]] = []
        self._cursor = 0
        self._mode: str | None = None

    @contextmanager
    def recording(self):
        self._levels.clear()
        self._mode = "record"
        token = _ACTIVE_REPLAY.set(self)
        try:
            yield self
        finally:
            _ACTIVE_REPLAY.reset(token)
            self._mode = None

    @contextmanager
    def replaying(self):
        self._cursor = 0
        self._mode = "replay"
        token = _ACTIVE_REPLAY.set(self)
        try:
            yield self
        finally:
            _ACTIVE_REPLAY.reset(token)
            self._mode = None

    def _record(self, shape: np.ndarray, values: np.ndarray) -> None:
        upper = values >= shape + 1.0
        level = np.where(
            upper, special.reg_upper_gamma_array(shape, values), special.reg_lower_gamma_array(shape, values)
        )
        self._levels.append((level, upper))

    def _replay(self, shape: np.ndarray) -> np.ndarray:
        level, upper = self._levels[self._cursor]
        self._cursor += 1
        if level.shape != shape.shape:
            raise DomainError(f"replayed draw shape {shape.shape} differs from recorded {level.shape}")
        return np.maximum(special.gamma_inverse_cdf_array(shape, level, upper), DRAW_FLOOR)


_ACTIVE_REPLAY: ContextVar[QuantileReplay | None] = ContextVar("gamma_replay", default=None)


def sample_gamma_array(shape, rng: RngStream, with_grads: bool = True):
    """Elementwise Gamma(shape, 1) draws and their pathwise gradients.

    Returns ``(values, grads, boosts)``.  Shapes below one are sampled at
    ``shape + 1`` and multiplied by ``U ** (1 / shape)``; the boost factor is
    returned for inspection only, the gradient is always the implicit one at
    the final value.  ``with_grads=False`` skips the gradients (``grads`` is
    then None), which Monte-Carlo diagnostics use.
    """
    shape = np.asarray(shape, dtype=np.float64)
    if not np.all(shape > 0) or not np.all(np.isfinite(shape)):
        raise DomainError("Gamma shape must be finite and > 0")
    replay = _ACTIVE_REPLAY.get()
    if replay is not None and replay._mode == "replay":
        values = replay._replay(shape)
        grads = pathwise_grad_gamma_array(shape, values) if with_grads else None
        return values, grads, np.ones_like(shape)
    small = shape < 1.0
    base = _marsaglia_tsang(np.where(small, shape + 1.0, shape), rng)
    boosts = np.ones_like(shape)
    if small.any():
        u = rng.uniform(int(small.sum()))
        boosts[small] = np.exp(np.log(np.maximum(u, 1e-300)) / shape[small])
    values = np.maximum(base * boosts, DRAW_FLOOR)
    grads = pathwise_grad_gamma_array(shape, values) if with_grads else None
    if replay is not None:
        replay._record(shape, values)
    return values, grads, boosts


def sample_gamma(shape: float, rng: RngStream) -> GammaDraw:
    values, grads, boosts = sample_gamma_array(np.array([shape], dtype=np.float64), rng)
    return GammaDraw(float(shape), float(values[0]), float(grads[0]), float(boosts[0]))


def pathwise_grad_gamma_array(shape, value) -> np.ndarray:
    """du/d(shape) = -(dP/d shape) / pdf, the implicit reparameterisation gradient."""
    shape, value = np.broadcast_arrays(np.asarray(shape, dtype=np.float64), np.asarray(value, dtype=np.float64))
    grads = special.guarded_quantile_shape_derivative_array(shape, value, _LOG_PDF_UNDERFLOW)
    if not np.all(np.isfinite(grads)):
        idx = np.flatnonzero(~np.isfinite(np.ravel(grads)))[0]
        raise NumericError(
            "Gamma density underflow in pathwise gradient",
            shape=float(shape.ravel()[idx]),
            value=float(value.ravel()[idx]),
        )
    return grads


def pathwise_grad_gamma(shape: float, value: float) -> float:
    if not (shape > 0 and value > 0):
        raise DomainError(f"pathwise_grad_gamma needs shape > 0 and value > 0, got ({shape}, {value})")
    return float(pathwise_grad_gamma_array(shape, value))


# -- binary concrete / Beta ----------------------------------------------------


def binary_concrete(logit, temperature: float, g1, g2) -> np.ndarray:
    """sigma((logit + g1 - g2) / temperature) for given Gumbel noise."""
    if not temperature > 0:
        raise DomainError(f"temperature must be > 0, got {temperature}")
    z = (np.asarray(logit, dtype=np.float64) + g1 - g2) / temperature
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def sample_binary_concrete(logit, temperature: float, rng: RngStream):
    """Relaxed Bernoulli gate with two independent standard Gumbel draws.

    The derivative with respect to ``logit`` is ``value * (1 - value) / temperature``.
    """
    logit = np.asarray(logit, dtype=np.float64)
    g1 = rng.gumbel(logit.shape)
    g2 = rng.gumbel(logit.shape)
    value = binary_concrete(logit, temperature, g1, g2)
    return float(value) if value.ndim == 0 else value


def beta_from_gammas(u1, u2):
    """u1 / (u1 + u2); with u_k ~ Gamma(a_k, 1) this is Beta(a_1, a_2)."""
    u1 = np.asarray(u1, dtype=np.float64)
    u2 = np.asarray(u2, dtype=np.float64)
    if not (np.all(u1 > 0) and np.all(u2 > 0)):
        raise DomainError("beta_from_gammas needs positive arguments")
    out = u1 / (u1 + u2)
    return float(out) if out.ndim == 0 else out
