"""Gate histograms, gate correlations, gradient-flow traces and the
numerical check of the input-gate derivative bounds.

All CSV writers emit a header row; every Monte-Carlo routine takes an
:class:`RngStream` so outputs are reproducible under a fixed seed.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import cells
from . import tape as T
from .data import Batch
from .errors import UsageError
from .stochastic import RngStream, pathwise_grad_gamma_array, sample_gamma_array

MIN_DRAWS = 1000
BRANCH_DELTA = Fraction(8, 1167)
BRANCH_CONSTANT = Fraction(6260063, 18180288)
SIGMOID_PRIME_MAX = 0.25
MIN_ACCEPTANCE = 1e-4


def write_csv(path, header: Sequence[str], rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


# -- histograms ----------------------------------------------------------------


def gate_values(traces, mask: np.ndarray | None = None, gates: Sequence[str] = ("i", "f", "o")) -> dict[str, np.ndarray]:
    """Flatten gate values from traces ([t] or [layer][t]); ``mask`` [T, B] drops padding."""
    if traces and isinstance(traces[0], cells.GateTrace):
        traces = [traces]
    out = {g: [] for g in gates}
    for layer in traces:
        for t, tr in enumerate(layer):
            for g in gates:
                v = getattr(tr, g).data
                if mask is not None:
                    v = v[np.asarray(mask)[t] > 0]
                out[g].append(np.ravel(v))
    return {g: np.concatenate(v) if v else np.zeros(0) for g, v in out.items()}


def gate_histogram(traces, bins: int = 10, mask: np.ndarray | None = None) -> dict[str, np.ndarray]:
    """Counts of gate values on ``bins`` equal bins over [0, 1].

    ``traces`` is a sequence of :class:`GateTrace` (or per-layer sequences)
    or a mapping gate name -> values.  Returns gate -> array of rows
    (bin_left, bin_right, count).
    """
    if bins < 2:
        raise UsageError("gate_histogram needs bins >= 2")
    values = dict(traces) if isinstance(traces, Mapping) else gate_values(traces, mask) if traces else {}
    if not values or all(np.size(v) == 0 for v in values.values()):
        raise UsageError("gate_histogram got no gate values")
    edges = np.linspace(0.0, 1.0, bins + 1)
    table = {}
    for g, v in values.items():
        counts, _ = np.histogram(np.asarray(v, dtype=np.float64), bins=edges)
        table[g] = np.column_stack([edges[:-1], edges[1:], counts.astype(np.float64)])
    return table


def write_histograms(table: dict[str, np.ndarray], out_dir) -> list[Path]:
    paths = []
    for g, rows in table.items():
        rows_out = [(float(a), float(b), int(c)) for a, b, c in rows]
        paths.append(write_csv(Path(out_dir) / f"histogram_{g}.csv", ("bin_left", "bin_right", "count"), rows_out))
    return paths


# -- correlation ---------------------------------------------------------------------


@dataclass
class CorrelationReport:
    rho: float | None  # None when a gate has zero variance
    se: float | None
    n: int
    mean_i: float
    mean_f: float

    @property
    def undefined(self) -> bool:
        return self.rho is None


def gates_from_draws(variant: str, u: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    if variant == "blstm":
        return u[0] / (u[0] + u[1]), u[2] / (u[2] + u[3])
    if variant == "bblstm3g":
        return u[0] / (u[0] + u[2]), u[1] / (u[1] + u[2])
    if variant in ("bblstm5g", "bblstm5gp"):
        return cells.five_gamma_gates(u)
    raise UsageError(f"variant {variant!r} has no Gamma-built gates")


def pearson(x: np.ndarray, y: np.ndarray, axis: int = 0) -> np.ndarray:
    """Pearson correlation along ``axis``; NaN where either variance is zero."""
    xc = x - x.mean(axis=axis, keepdims=True)
    yc = y - y.mean(axis=axis, keepdims=True)
    sxy = (xc * yc).sum(axis=axis)
    sxx = (xc * xc).sum(axis=axis)
    syy = (yc * yc).sum(axis=axis)
    with np.errstate(invalid="ignore", divide="ignore"):
        rho = sxy / np.sqrt(sxx * syy)
    degenerate = (sxx <= 1e-300) | (syy <= 1e-300)
    return np.where(degenerate, np.nan, np.clip(rho, -1.0, 1.0))


def mc_gate_correlation(variant: str, shapes: Sequence, n: int, rng: RngStream) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-configuration Monte-Carlo (rho, mean_i, mean_f).

    ``shapes[j]`` is an array (any common shape S) of group-j shape values;
    ``n`` fresh draws are taken for every configuration, results have shape S.
    """
    arrays = [np.asarray(s, dtype=np.float64) for s in shapes]
    common = np.broadcast_shapes(*(a.shape for a in arrays))
    u = [
        sample_gamma_array(np.broadcast_to(a, (n,) + common).copy(), rng.spawn(j), with_grads=False)[0]
        for j, a in enumerate(arrays, start=1)
    ]
    i, f = gates_from_draws(variant, u)
    return pearson(i, f), i.mean(axis=0), f.mean(axis=0)


def gate_correlation(variant: str, shapes: Sequence[float], n: int, rng: RngStream) -> CorrelationReport:
    """Pearson rho of (i, f) over ``n`` fresh draws at fixed shapes; SE = (1 - rho^2) / sqrt(n)."""
    if n < MIN_DRAWS:
        raise UsageError(f"gate_correlation needs n >= {MIN_DRAWS}")
    expected = cells.num_shape_groups(variant) if variant in cells.BETA_VARIANTS else None
    if expected is None or len(shapes) != expected:
        raise UsageError(f"variant {variant!r} needs {expected} shape values, got {len(shapes)}")
    if not all(s > 0 for s in shapes):
        raise UsageError("shapes must be > 0")
    rho, mi, mf = mc_gate_correlation(variant, [np.array(s) for s in shapes], n, rng)
    rho = float(rho)
    if math.isnan(rho):
        return CorrelationReport(None, None, n, float(mi), float(mf))
    return CorrelationReport(rho, (1.0 - rho * rho) / math.sqrt(n), n, float(mi), float(mf))


def five_gamma_sweep(n_configs: int = 200, n_draws: int = 10000, seed: int = 0, low: float = 0.05, high: float = 20.0):
    """Random 5G shape configurations (log-uniform in [low, high]) and their MC rho.

    Returns (shapes [n_configs, 5], rho [n_configs]).
    """
    rng = RngStream(seed)
    picker = rng.spawn(0)
    shapes = np.exp(np.log(low) + (np.log(high) - np.log(low)) * picker.uniform((n_configs, 5)))
    rhos = np.empty(n_configs)
    for k in range(n_configs):
        report = gate_correlation("bblstm5g", list(shapes[k]), n_draws, rng.spawn(k + 1))
        rhos[k] = np.nan if report.undefined else report.rho
    return shapes, rhos


def persist_sweep_extremes(path, shapes: np.ndarray, rhos: np.ndarray, seed: int, n_draws: int) -> dict:
    """Store the most negative and most positive configurations as regression fixtures."""
    lo, hi = int(np.nanargmin(rhos)), int(np.nanargmax(rhos))
    doc = {
        "seed": seed,
        "n_draws": n_draws,
        "n_configs": int(len(rhos)),
        "negative": {"shapes": [float(s) for s in shapes[lo]], "rho": float(rhos[lo])},
        "positive": {"shapes": [float(s) for s in shapes[hi]], "rho": float(rhos[hi])},
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")
    return doc


def timestep_correlation(
    variant: str, traces: Sequence[cells.GateTrace], n_draws: int, rng: RngStream, max_configs: int = 64, mask=None
) -> list[dict]:
    """Per-timestep MC rho at the shapes the network produced.

    At each step up to ``max_configs`` (sequence, unit) shape configurations
    are chosen; rho is estimated per configuration and averaged.
    """
    if variant not in cells.BETA_VARIANTS:
        raise UsageError(f"correlation diagnostics need a Beta variant, not {variant!r}")
    rows = []
    picker = rng.spawn(0)
    for t, tr in enumerate(traces):
        U = [u.data for u in tr.U]
        valid = np.ones(U[0].shape[0], bool) if mask is None else np.asarray(mask)[t] > 0
        cand = np.argwhere(np.broadcast_to(valid[:, None], U[0].shape))
        if len(cand) == 0:
            continue
        pick = cand[np.sort(picker.permutation(len(cand))[:max_configs])]
        shapes = [u[pick[:, 0], pick[:, 1]] for u in U]
        rho, _, _ = mc_gate_correlation(variant, shapes, n_draws, rng.spawn(t + 1))
        ok = rho[~np.isnan(rho)]
        rows.append(
            {
                "t": t,
                "mean_i": float(tr.i.data[valid].mean()),
                "mean_f": float(tr.f.data[valid].mean()),
                "rho": float(ok.mean()) if ok.size else float("nan"),
                "se": float(ok.std(ddof=1) / math.sqrt(ok.size)) if ok.size > 1 else float("nan"),
                "configs": int(ok.size),
            }
        )
    return rows


# -- gradient flow ----------------------------------------------------------------------


def gradient_norm_trace(model, params: Mapping[str, np.ndarray], batch: Batch, rng: RngStream | None = None, opts=None, layer: int = 0) -> np.ndarray:
    """Per-timestep ||d loss / d c_t||, the L2 norm over units averaged over the batch."""
    if model.spec.variant not in cells.VARIANTS:
        raise UsageError(f"variant {model.spec.variant!r} has no cell state")
    opts = opts or cells.StepOptions("mean")
    if opts.mode == "sample" and rng is None:
        rng = RngStream(0)
    tape = T.Tape()
    ts = {k: tape.param(v, k) for k, v in params.items()}
    res = model.forward(ts, batch, rng, opts)
    cs = [s.c for s in res.unrolled.states[layer]]
    grads = tape.backward(res.loss, wrt=cs)
    return np.array([np.linalg.norm(grads[c], axis=-1).mean() for c in cs])


@dataclass
class DecayReport:
    norms: np.ndarray  # ||dL/dc_t|| for t = 0..T-1
    max_forget: float
    worst_ratio: float  # max over adjacent nonzero pairs of norm[t-1] / norm[t]
    geometric: bool


def forced_forget_decay(steps: int = 20, hidden: int = 8, input_dim: int = 3, forget_bias: float = -30.0, seed: int = 0) -> DecayReport:
    """LSTM with the forget gate pinned near zero and the recurrent weights cut.

    The loss reads only the final hidden state, so dL/dc_{t-1} = f_t * dL/dc_t
    and every adjacent ratio must be at most max f.
    """
    rng = np.random.default_rng(seed)
    arrays = cells.init_cell_params("lstm", input_dim, hidden, rng, forget_bias)
    arrays["Wh"][:] = 0.0
    x = rng.normal(size=(steps, 2, input_dim))
    tape = T.Tape()
    p = cells.CellParams.from_arrays("lstm", {k: tape.param(v, k) for k, v in arrays.items()})
    res = cells.unroll("lstm", [p], x)
    loss = T.sum(res.outputs[-1] * rng.normal(size=hidden))
    cs = [s.c for s in res.states[0]]
    grads = tape.backward(loss, wrt=cs)
    norms = np.array([np.linalg.norm(grads[c], axis=-1).mean() for c in cs])
    max_f = max(float(np.max(tr.f.data)) for tr in res.traces[0])
    ratios = [norms[t - 1] / norms[t] for t in range(1, steps) if norms[t] > 0]
    worst = max(ratios) if ratios else 0.0
    return DecayReport(norms, max_f, worst, bool(worst <= max_f * (1 + 1e-9) and np.all(np.isfinite(norms))))


def write_gradient_trace(path, norms: np.ndarray) -> Path:
    return write_csv(path, ("t", "norm"), [(t, float(v)) for t, v in enumerate(norms)])


# -- derivative bounds ------------------------------------------------------------------


def bound_s0(delta) -> Fraction | float:
    d = Fraction(delta) if isinstance(delta, Fraction) else delta
    return -(36125 * d * d + 107780 * d - 214200) / (38880 * (4 - d) ** 2)


def bound_s1(delta) -> Fraction | float:
    d = Fraction(delta) if isinstance(delta, Fraction) else delta
    return -(36125 * d * d - 107780 * d - 214200) / (38880 * (4 + d) ** 2)


def upper_bound(delta) -> Fraction | float:
    return bound_s1(delta) if delta <= BRANCH_DELTA else BRANCH_CONSTANT


@dataclass
class PropositionReport:
    delta: float
    s0: float
    s1: float
    upper: float
    n_draws: int
    n_accepted: int
    acceptance_rate: float
    sampling_failure: bool
    mean_derivative: float
    min_derivative: float
    max_derivative: float
    containment_rate: float
    mean_inside: bool
    sigmoid_prime_max: float = SIGMOID_PRIME_MAX


def input_gate_shape_derivative(u1: np.ndarray, u3=0.5, u4=0.5, u5=0.5, shape1: float = 0.5) -> np.ndarray:
    """d i / d U1 for the 5-Gamma input gate: (u4 + u5) / (u1 + u3 + u4 + u5)^2 * du1/dU1."""
    di_du1 = (u4 + u5) / (u1 + u3 + u4 + u5) ** 2
    return di_du1 * pathwise_grad_gamma_array(np.full_like(u1, shape1), u1)


def verify_proposition1(deltas: Sequence[float], n: int, rng: RngStream, chunk: int = 100000, max_draws: int = 20_000_000) -> list[PropositionReport]:
    """Sample u1 ~ Gamma(0.5, 1) restricted to |u1 - 0.5| <= 0.5 delta, with u3 = u4 = u5 = 0.5.

    Reports, per delta, the exact bounds, the acceptance rate of the band
    rejection step, and how many sampled derivatives fall inside the bounds.
    The report records violations; it does not assert containment.
    """
    reports = []
    for k, delta in enumerate(deltas):
        if not delta > 0:
            raise UsageError(f"delta must be > 0, got {delta}")
        stream = rng.spawn(k)
        accepted: list[np.ndarray] = []
        got = drawn = 0
        while got < n and drawn < max_draws:
            u, _, _ = sample_gamma_array(np.full(chunk, 0.5), stream.spawn(drawn // chunk), with_grads=False)
            drawn += chunk
            keep = u[np.abs(u - 0.5) <= 0.5 * delta]
            accepted.append(keep)
            got += keep.size
            if drawn >= 10 * chunk and got / drawn < MIN_ACCEPTANCE:
                break
        u1 = np.concatenate(accepted)[:n] if accepted else np.zeros(0)
        rate = got / drawn if drawn else 0.0
        s0, s1, up = float(bound_s0(delta)), float(bound_s1(delta)), float(upper_bound(delta))
        failure = rate < MIN_ACCEPTANCE or u1.size == 0
        if u1.size:
            deriv = input_gate_shape_derivative(u1)
            inside = (deriv >= s0) & (deriv <= up)
            mean_d = float(deriv.mean())
            stats = (mean_d, float(deriv.min()), float(deriv.max()), float(inside.mean()), bool(s0 <= mean_d <= up))
        else:
            stats = (float("nan"),) * 4 + (False,)
        reports.append(PropositionReport(float(delta), s0, s1, up, drawn, int(u1.size), rate, failure, *stats))
    return reports


def write_proposition(path, reports: Sequence[PropositionReport]) -> Path:
    fields = list(asdict(reports[0])) if reports else list(PropositionReport.__dataclass_fields__)
    return write_csv(path, fields, [[getattr(r, f) for f in fields] for r in reports])


# -- synthetic regime demo --------------------------------------------------------------


def regime_correlation_rows(model, params, dataset, n_draws: int = 500, max_configs: int = 64, seed: int = 0) -> list[dict]:
    """Per-timestep gate means and MC rho on a two-regime dataset, split by regime."""
    from .data import collate

    pairs = list(zip(dataset.inputs, dataset.labels))
    b = collate(pairs, "steps")
    res = model.forward(params, b, None, cells.StepOptions("mean"))
    traces = res.unrolled.traces[0]
    regimes = np.stack(dataset.regimes, axis=1)  # [T, B]
    rng = RngStream(seed)
    rows = []
    for t, tr in enumerate(traces):
        U = [u.data for u in tr.U]
        row = {"t": t, "mean_i": float(tr.i.data.mean()), "mean_f": float(tr.f.data.mean())}
        picker = rng.spawn(2 * t)
        for label, sel in (("all", np.ones(b.size, bool)), ("copy", regimes[t] == 0), ("overwrite", regimes[t] == 1)):
            seqs = np.flatnonzero(sel)
            if seqs.size == 0:
                row[f"rho_{label}"] = float("nan")
                continue
            cand = np.array([(s, h) for s in seqs for h in range(U[0].shape[1])])
            pick = cand[np.sort(picker.permutation(len(cand))[:max_configs])]
            rho, _, _ = mc_gate_correlation(model.spec.variant, [u[pick[:, 0], pick[:, 1]] for u in U], n_draws, rng.spawn(2 * t + 1))
            ok = rho[~np.isnan(rho)]
            row[f"rho_{label}"] = float(ok.mean()) if ok.size else float("nan")
        rows.append(row)
    return rows


def synthetic_correlation_demo(config, out_dir, n_draws: int = 500, max_configs: int = 64, log=None) -> tuple[Path, list[dict], object]:
    """Train a small 5G model on the two-regime task and write per-step gates and rho.

    ``config`` is a RunConfig (task "synthetic").  Returns the CSV path, the
    rows and the training result.
    """
    from .training import build_model, load_task_data, train

    if config.task != "synthetic" or config.variant not in cells.BETA_VARIANTS:
        raise UsageError("the synthetic demo needs task 'synthetic' and a Beta variant")
    out = Path(out_dir)
    result = train(config, out / "train", log=log)
    task_data = load_task_data(config)
    model = build_model(config, task_data)
    rows = regime_correlation_rows(model, result.params, task_data.test, n_draws, max_configs, config.seeds["sampler"])
    header = ("t", "mean_i", "mean_f", "rho_all", "rho_copy", "rho_overwrite")
    path = write_csv(out / "synthetic_correlation.csv", header, [[r[h] for h in header] for r in rows])
    return path, rows, result
