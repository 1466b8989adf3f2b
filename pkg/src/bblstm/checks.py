"""Self-verification suite behind ``bblstm check``.

Every property is measured, compared against a pinned threshold and
reported; nothing is skipped.  Samplers are looked up through the
``stochastic`` module at call time, so a test harness can swap in a faulty
sampler and watch the moment checks fail.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass
from importlib import resources
from typing import Callable

import numpy as np

from . import cells, diagnostics, objectives, special, stochastic
from . import tape as T
from .stochastic import RngStream

N_SAMPLES = 100_000
KS_CRITICAL_1E5 = 0.0061  # significance 0.001, n = 1e5


@dataclass
class CheckResult:
    name: str
    value: float
    threshold: float
    relation: str  # "<=" or ">="
    passed: bool
    seconds: float = 0.0


def simpson(f: Callable[[np.ndarray], np.ndarray], a: float, b: float, n: int = 20000) -> float:
    """Composite Simpson rule with ``n`` (even) panels."""
    n += n % 2
    x = np.linspace(a, b, n + 1)
    y = f(x)
    return float((b - a) / (3 * n) * (y[0] + y[-1] + 4 * y[1:-1:2].sum() + 2 * y[2:-1:2].sum()))


def kl_gamma_quadrature(aq: float, ap: float, bp: float) -> float:
    """KL(Gamma(aq, 1) || Gamma(ap, bp)) by Simpson on u = exp(s), u in (e^-90, 60)."""

    def integrand(s):
        u = np.exp(s)
        log_q = (aq - 1) * s - u - special.log_gamma(aq)
        log_p = ap * math.log(bp) + (ap - 1) * s - bp * u - special.log_gamma(ap)
        return np.exp(log_q) * (log_q - log_p) * u

    return simpson(integrand, -90.0, math.log(60.0), 100000)


def ks_statistic(samples: np.ndarray, cdf: Callable[[np.ndarray], np.ndarray]) -> float:
    x = np.sort(samples)
    n = x.size
    c = cdf(x)
    return float(max(np.max(np.arange(1, n + 1) / n - c), np.max(c - np.arange(n) / n)))


def inverse_cdf_fd(a: float, p: float, eps: float = 1e-4) -> float:
    """[F^-1(p; a + eps) - F^-1(p; a - eps)] / (2 eps)."""
    hi = special.gamma_inverse_cdf_array(a + eps, p, False)
    lo = special.gamma_inverse_cdf_array(a - eps, p, False)
    return float((hi - lo) / (2 * eps))


def richardson_da(a: float, x: float) -> float:
    """Richardson-extrapolated central difference of P(a, x) in a."""
    h = 1e-3 * max(1.0, a)
    if a - h <= 0:
        h = a / 4

    def d(step):
        return (special.reg_lower_gamma(a + step, x) - special.reg_lower_gamma(a - step, x)) / (2 * step)

    return (4 * d(h / 2) - d(h)) / 3


def five_gamma_fixture() -> dict:
    with resources.files("bblstm").joinpath("fixtures/five_gamma_extremes.json").open() as fh:
        return json.load(fh)


# -- individual properties ------------------------------------------------------------
# each returns the measured value; the table below pairs it with a threshold


def _log_gamma_known():
    cases = [(1.0, 0.0), (5.0, math.log(24.0)), (0.5, 0.5 * math.log(math.pi))]
    return max(abs(special.log_gamma(x) - v) for x, v in cases)


def _log_gamma_recurrence():
    x = np.geomspace(1e-3, 1e6, 400)
    lhs = special.log_gamma_array(x + 1)
    return float(np.max(np.abs(lhs - special.log_gamma_array(x) - np.log(x)) / np.maximum(1.0, np.abs(lhs))))


def _digamma_known():
    g = 0.5772156649015329
    cases = [(1.0, -g), (2.0, 1 - g), (0.5, -g - 2 * math.log(2))]
    return max(abs(special.digamma(x) - v) for x, v in cases)


def _reg_lower_exponential():
    x = np.linspace(0.0, 30.0, 301)
    return float(np.max(np.abs(special.reg_lower_gamma_array(np.ones_like(x), x) + np.expm1(-x))))


def _reg_lower_monotone_limits():
    worst = 0.0
    for a in (0.1, 0.5, 1.0, 2.0, 8.0, 32.0):
        p = special.reg_lower_gamma_array(np.full(500, a), np.linspace(0, max(50 * a, 60.0), 500))
        worst = max(worst, float(np.max(np.maximum(-np.diff(p), 0.0))), 1.0 - float(p[-1]), float(p[0]))
    return worst


def _shape_derivative_oracle():
    worst = 0.0
    for a in (0.1, 0.3, 0.5, 1.0, 2.0, 8.0, 32.0):
        for q in np.linspace(0.05, 0.95, 7):
            x = float(special.gamma_inverse_cdf_array(a, q, False))
            worst = max(worst, T.relative_error(special.d_reg_lower_gamma_da(a, x), richardson_da(a, x)))
    return worst


def _pdf_integral():
    worst = 0.0
    for a in (2.0, 5.0):
        total = simpson(lambda x: np.exp(special.log_gamma_pdf_array(np.full_like(x, a), np.maximum(x, 1e-300))), 0.0, 80.0, 40000)
        worst = max(worst, abs(total - 1.0))
    return worst


def _pathwise_oracle():
    worst = 0.0
    for a in (0.3, 0.5, 1.0, 2.0, 8.0):
        for q in (0.1, 0.3, 0.5, 0.7, 0.9):
            u = float(special.gamma_inverse_cdf_array(a, q, False))
            worst = max(worst, T.relative_error(stochastic.pathwise_grad_gamma(a, u), inverse_cdf_fd(a, q)))
    return worst


def _pathwise_positive():
    a = np.repeat([0.3, 0.5, 1.0, 2.0, 8.0], 9)
    u = special.gamma_inverse_cdf_array(a, np.tile(np.linspace(0.1, 0.9, 9), 5), False)
    return float(np.min(stochastic.pathwise_grad_gamma_array(a, u)))


def _gamma_draws(alpha: float, stream: int) -> np.ndarray:
    values, _, _ = stochastic.sample_gamma_array(np.full(N_SAMPLES, alpha), RngStream(1234, stream), with_grads=False)
    return values


def _gamma_mean_z(alpha: float):
    def run():
        x = _gamma_draws(alpha, 1)
        return abs(x.mean() - alpha) / math.sqrt(alpha / N_SAMPLES)

    return run


def _gamma_var_z(alpha: float):
    def run():
        x = _gamma_draws(alpha, 2)
        # Var of the sample variance of Gamma(a, 1): (mu4 - sigma^4) / n with mu4 = 3a^2 + 6a
        se = math.sqrt((3 * alpha**2 + 6 * alpha - alpha**2) / N_SAMPLES)
        return abs(x.var(ddof=1) - alpha) / se

    return run


def _ks_exponential():
    return ks_statistic(_gamma_draws(1.0, 3), lambda x: -np.expm1(-x))


def _quantile_uniformity():
    x = _gamma_draws(2.0, 4)
    q = special.reg_lower_gamma_array(np.full_like(x, 2.0), x)
    return ks_statistic(q, lambda v: v)


def _binary_concrete_mean():
    rng = RngStream(1234, 5)
    return abs(float(np.mean(stochastic.sample_binary_concrete(np.zeros(N_SAMPLES), 1.0, rng))) - 0.5)


def _beta_ratio_mean():
    u1 = stochastic.sample_gamma_array(np.full(N_SAMPLES, 2.0), RngStream(1234, 6), with_grads=False)[0]
    u2 = stochastic.sample_gamma_array(np.full(N_SAMPLES, 3.0), RngStream(1234, 7), with_grads=False)[0]
    return abs(float(np.mean(stochastic.beta_from_gammas(u1, u2))) - 0.4)


def _kl_equality():
    return max(objectives.kl_gamma(a, a, 1.0) for a in (0.3, 1.0, 2.0, 7.5))


def _kl_quadrature():
    grid = (0.5, 1.0, 2.0, 5.0)
    return max(
        abs(objectives.kl_gamma(aq, ap, bp) - kl_gamma_quadrature(aq, ap, bp))
        for aq in grid
        for ap in grid
        for bp in (0.5, 1.0, 2.0)
    )


def _kl_nonnegative():
    grid = (0.5, 1.0, 2.0, 5.0)
    return min(objectives.kl_gamma(aq, ap, bp) for aq in grid for ap in grid for bp in (0.5, 1.0, 2.0))


def _primitive_gradients():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(3, 4))
    y = rng.normal(size=(3, 4))
    w = rng.normal(size=(4, 2))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    cases = [
        lambda p: T.sum(T.sigmoid(p["x"]) * p["y"]),
        lambda p: T.sum(T.tanh(p["x"]) * p["y"]),
        lambda p: T.sum(T.softplus(p["x"]) * p["y"]),
        lambda p: T.sum(T.relu(p["x"] + 0.05) * p["y"]),
        lambda p: T.sum(T.square(p["x"] @ p["w"])),
        lambda p: T.sum(p["x"] / p["pos"] - p["y"] * p["pos"]),
        lambda p: T.mean(T.exp(p["x"] * 0.3) + T.log(p["pos"])),
        lambda p: T.sum(T.concat([p["x"], p["y"]]) * 1.5) + T.sum(T.slice_last(p["x"], 1, 3) * p["y"][:, :2]),
        lambda p: T.sum(T.log_softmax(p["x"]) * p["y"]),
    ]
    params = {"x": x, "y": y, "w": w, "pos": pos}
    return max(T.check_gradients(fn, params, probes=10, seed=k) for k, fn in enumerate(cases))


def _cell_setup(variant: str, seed: int = 0):
    rng = np.random.default_rng(seed)
    arrays = cells.init_cell_params(variant, 3, 4, rng)
    for k in arrays:
        arrays[k] = arrays[k] + rng.normal(scale=0.3, size=arrays[k].shape)
    x = rng.normal(size=(4, 2, 3))
    return arrays, x


def _cell_gradient(variant: str):
    def run():
        arrays, x = _cell_setup(variant)

        def loss(ts):
            p = cells.CellParams.from_arrays(variant, ts)
            r = cells.unroll(variant, [p], x, rng=RngStream(11))
            out = T.sum(T.square(r.outputs[-1])) + T.sum(r.outputs[1] * 0.5)
            return out + 0.1 * r.kl_sum if r.kl_sum is not None else out

        return T.check_gradients(loss, arrays, probes=15)

    return run


def _gates_open_interval():
    worst = math.inf
    for variant in cells.VARIANTS:
        arrays, x = _cell_setup(variant, 1)
        r = cells.unroll(variant, [cells.CellParams.from_arrays(variant, arrays)], x * 3, rng=RngStream(2))
        for tr in r.traces[0]:
            for g in (tr.i, tr.f, tr.o):
                worst = min(worst, float(np.min(g.data)), float(np.min(1.0 - g.data)))
    return worst


def _cifg_sum():
    arrays, x = _cell_setup("cifg", 2)
    r = cells.unroll("cifg", [cells.CellParams.from_arrays("cifg", arrays)], x * 5)
    return max(float(np.max(np.abs(tr.i.data + tr.f.data - 1.0))) for tr in r.traces[0])


def _corr_blstm():
    rep = diagnostics.gate_correlation("blstm", [1.0, 1.0, 1.0, 1.0], 10000, RngStream(77))
    return abs(rep.rho) / rep.se


def _corr_3g():
    rep = diagnostics.gate_correlation("bblstm3g", [1.0, 1.0, 1.0], 10000, RngStream(78))
    return rep.rho / rep.se


def _corr_5g(sign: str):
    def run():
        fx = five_gamma_fixture()[sign]
        rep = diagnostics.gate_correlation("bblstm5g", fx["shapes"], 10000, RngStream(79))
        return rep.rho

    return run


def _branch_continuity():
    s1 = diagnostics.bound_s1(diagnostics.BRANCH_DELTA)
    return float(abs(s1 - diagnostics.BRANCH_CONSTANT) / diagnostics.BRANCH_CONSTANT)


def _branch_constant():
    return abs(float(diagnostics.BRANCH_CONSTANT) - 0.34433244)


def _rng_determinism():
    a = RngStream(5, 9).spawn(3).normal(1000)
    b = RngStream(5, 9).spawn(3).normal(1000)
    return float(np.max(np.abs(a - b)))


def _tape_replay():
    arrays, x = _cell_setup("bblstm5gp", 3)

    def once():
        p = cells.CellParams.from_arrays("bblstm5gp", arrays)
        r = cells.unroll("bblstm5gp", [p], x, rng=RngStream(4))
        return (T.sum(r.outputs[-1]) + r.kl_sum).item()

    return abs(once() - once())


def _checkpoint_roundtrip():
    import os
    import tempfile

    rng = np.random.default_rng(3)
    params = {"a": rng.normal(size=(3, 4)) * 1e-7, "b": rng.normal(size=5) * 1e9, "c": np.array(math.pi)}
    fd, path = tempfile.mkstemp(suffix=".json")
    os.close(fd)
    try:
        T.save_checkpoint(path, params)
        back, _ = T.load_checkpoint(path)
    finally:
        os.remove(path)
    return max(float(np.max(np.abs(back[k] - params[k]))) for k in params)


def _adam_zero_grad():
    p = {"w": np.array([1.0, -2.0, 3.0])}
    before = p["w"].copy()
    objectives.adam_step(p, {"w": np.zeros(3)}, objectives.AdamState())
    return float(np.max(np.abs(p["w"] - before)))


def _polyphonic_half():
    h = [T.Tensor(np.zeros((2, 3))) for _ in range(3)]
    targets = (np.random.default_rng(0).uniform(size=(3, 2, 88)) < 0.3).astype(float)
    nll = objectives.polyphonic_nll(h, targets, np.ones((3, 2)), T.Tensor(np.zeros((3, 88))), T.Tensor(np.zeros(88)))
    return abs(nll.item() - 88 * math.log(2))


PROPERTIES: list[tuple[str, Callable[[], float], str, float]] = [
    ("log_gamma known values (abs err)", _log_gamma_known, "<=", 1e-10),
    ("log_gamma recurrence (rel err)", _log_gamma_recurrence, "<=", 1e-13),
    ("digamma known values (abs err)", _digamma_known, "<=", 1e-9),
    ("P(1,x) = 1 - exp(-x) (abs err)", _reg_lower_exponential, "<=", 1e-10),
    ("P(a,.) monotone with limits 0 and 1", _reg_lower_monotone_limits, "<=", 1e-10),
    ("dP/da vs Richardson oracle (rel err)", _shape_derivative_oracle, "<=", 1e-6),
    ("gamma pdf integrates to 1", _pdf_integral, "<=", 1e-8),
    ("pathwise grad vs inverse-CDF oracle (rel err)", _pathwise_oracle, "<=", 1e-2),
    ("pathwise grad positive (min value)", _pathwise_positive, ">=", 0.0),
    *[(f"gamma mean a={a} (|z|)", _gamma_mean_z(a), "<=", 3.0) for a in (0.5, 1.0, 2.0, 5.0)],
    *[(f"gamma variance a={a} (|z|)", _gamma_var_z(a), "<=", 3.0) for a in (0.5, 1.0, 2.0, 5.0)],
    ("KS Gamma(1) vs exponential", _ks_exponential, "<=", KS_CRITICAL_1E5),
    ("KS of draw quantiles vs uniform", _quantile_uniformity, "<=", KS_CRITICAL_1E5),
    ("binary concrete mean at logit 0 (|err|)", _binary_concrete_mean, "<=", 0.01),
    ("Beta(2,3) ratio mean (|err|)", _beta_ratio_mean, "<=", 0.004),
    ("KL = 0 at equality", _kl_equality, "<=", 1e-12),
    ("KL closed form vs quadrature (abs err)", _kl_quadrature, "<=", 1e-6),
    ("KL nonnegative (min value)", _kl_nonnegative, ">=", 0.0),
    ("tape primitives vs finite differences (rel err)", _primitive_gradients, "<=", 1e-4),
    *[
        (f"{v} gradient vs finite differences (rel err)", _cell_gradient(v), "<=", 2e-2 if v in cells.STOCHASTIC else 1e-4)
        for v in cells.VARIANTS
    ],
    ("gates strictly inside (0,1) (min margin)", _gates_open_interval, ">=", 1e-300),
    ("CIFG i + f = 1 (max deviation)", _cifg_sum, "<=", 0.0),
    ("BLSTM |rho| / SE", _corr_blstm, "<=", 3.0),
    ("3G rho / SE", _corr_3g, ">=", -3.0),
    ("5G negative fixture rho", _corr_5g("negative"), "<=", -0.2 + 0.05),
    ("5G positive fixture rho", _corr_5g("positive"), ">=", 0.2 - 0.05),
    ("bound branches continuous at 8/1167 (rel)", _branch_continuity, "<=", 1e-6),
    ("bound constant 6260063/18180288 (abs err)", _branch_constant, "<=", 1e-8),
    ("RngStream determinism (max diff)", _rng_determinism, "<=", 0.0),
    ("tape replay determinism (abs diff)", _tape_replay, "<=", 0.0),
    ("checkpoint round trip (max diff)", _checkpoint_roundtrip, "<=", 0.0),
    ("Adam zero gradient leaves params (max change)", _adam_zero_grad, "<=", 0.0),
    ("music NLL at p=0.5 equals 88 ln 2 (abs err)", _polyphonic_half, "<=", 1e-9),
]


def check(progress: Callable[[CheckResult], None] | None = None) -> list[CheckResult]:
    """Run every property; an exception counts as a failure with value NaN."""
    results = []
    for name, fn, relation, threshold in PROPERTIES:
        t0 = time.perf_counter()
        try:
            value = float(fn())
            passed = value <= threshold if relation == "<=" else value >= threshold
        except Exception:  # noqa: BLE001 - a crashing property is a failed property
            value, passed = float("nan"), False
        res = CheckResult(name, value, threshold, relation, bool(passed and not math.isnan(value)), time.perf_counter() - t0)
        results.append(res)
        if progress is not None:
            progress(res)
    return results


def report_json(results: list[CheckResult]) -> str:
    doc = {"passed": all(r.passed for r in results), "count": len(results), "properties": [asdict(r) for r in results]}
    return json.dumps(doc, indent=2, allow_nan=True)
