"""Recurrent cell variants sharing one step contract.

Every ``step_*`` function has the signature
``step(params, x, state, rng=None, prior=None, opts=StepOptions())`` and
returns ``(CellState, GateTrace)``, so callers switch variants by name only.

Parameters are stored fused: ``Wx`` (input x G*H), ``Wh`` (H x G*H) and
``b`` (G*H), where the G column blocks follow :data:`BLOCKS` for the variant.
For the Beta variants a block ``Uj`` is the pre-softplus output of the gate
network g_j, i.e. a single affine map of concat(x_t, h_{t-1}).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tape as T
from .errors import ShapeError, UsageError
from .objectives import GammaPrior, kl_gamma_tensor
from .stochastic import RngStream
from .tape import Tensor

SHAPE_FLOOR = 1e-4

BLOCKS: dict[str, tuple[str, ...]] = {
    "lstm": ("i", "f", "o", "c"),
    "cifg": ("i", "o", "c"),
    "g2lstm": ("i", "f", "o", "c"),
    "blstm": ("o", "c", "U1", "U2", "U3", "U4"),
    "bblstm3g": ("o", "c", "U1", "U2", "U3"),
    "bblstm5g": ("o", "c", "U1", "U2", "U3", "U4", "U5"),
    # the shape head of 5G+p is the variational network q(u | x_t, h_{t-1})
    "bblstm5gp": ("o", "c", "U1", "U2", "U3", "U4", "U5"),
}
VARIANTS = tuple(BLOCKS)
STOCHASTIC = frozenset({"g2lstm", "blstm", "bblstm3g", "bblstm5g", "bblstm5gp"})
BETA_VARIANTS = frozenset({"blstm", "bblstm3g", "bblstm5g", "bblstm5gp"})

# sign of the optional shape bias per group: + feeds the forget numerator,
# - feeds the forget denominator only, so a positive bias opens f toward 1
SHAPE_FORGET_SIGNS: dict[str, dict[str, float]] = {
    "blstm": {"U3": 1.0, "U4": -1.0},
    "bblstm3g": {"U2": 1.0, "U3": -1.0},
    "bblstm5g": {"U2": 1.0, "U3": -1.0, "U5": -1.0},
    "bblstm5gp": {"U2": 1.0, "U3": -1.0, "U5": -1.0},
}


def num_shape_groups(variant: str) -> int:
    return sum(1 for b in BLOCKS[variant] if b.startswith("U"))


@dataclass
class CellParams:
    variant: str
    Wx: Tensor
    Wh: Tensor
    b: Tensor
    # extra hidden layers of g_j when the gate networks are deeper than one affine map
    shape_mlp: dict[str, Tensor] = field(default_factory=dict)

    @property
    def hidden(self) -> int:
        return self.Wh.shape[0]

    @property
    def input_dim(self) -> int:
        return self.Wx.shape[0]

    @property
    def shape_depth(self) -> int:
        return 1 + sum(1 for k in self.shape_mlp if k.startswith("g1.W") and k != "g1.Wout")

    def block(self, z: Tensor, name: str) -> Tensor:
        k = BLOCKS[self.variant].index(name)
        h = self.hidden
        return T.slice_last(z, k * h, (k + 1) * h)

    @classmethod
    def from_arrays(cls, variant: str, arrays: dict, prefix: str = "") -> "CellParams":
        get = lambda k: arrays[prefix + k] if isinstance(arrays[prefix + k], Tensor) else Tensor(arrays[prefix + k])
        mlp = {k[len(prefix) :]: get(k[len(prefix) :]) for k in arrays if k.startswith(prefix + "g")}
        return cls(variant, get("Wx"), get("Wh"), get("b"), mlp)


@dataclass
class CellState:
    c: Tensor
    h: Tensor

    @classmethod
    def zeros(cls, batch: int, hidden: int) -> "CellState":
        return cls(Tensor(np.zeros((batch, hidden))), Tensor(np.zeros((batch, hidden))))


@dataclass
class GateTrace:
    i: Tensor
    f: Tensor
    o: Tensor
    u: list[Tensor] | None = None
    U: list[Tensor] | None = None
    kl: Tensor | None = None
    kl_rows: Tensor | None = None


@dataclass(frozen=True)
class StepOptions:
    mode: str = "sample"  # "sample" draws stochastic gates, "mean" uses their analytic means
    tau: float = 1.0
    shape_floor: float = SHAPE_FLOOR

    def __post_init__(self):
        if self.mode not in ("sample", "mean"):
            raise UsageError(f"mode must be 'sample' or 'mean', got {self.mode!r}")
        if not self.tau > 0:
            raise UsageError(f"tau must be > 0, got {self.tau}")


DEFAULT_OPTIONS = StepOptions()


# -- initialisation ------------------------------------------------------------


def init_cell_params(
    variant: str,
    input_dim: int,
    hidden: int,
    rng: np.random.Generator,
    forget_bias: float = 1.0,
    shape_depth: int = 1,
    prefix: str = "",
    shape_forget_bias: float = 0.0,
    recurrent_scale: float = 1.0,
) -> dict[str, np.ndarray]:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases except the forget gate.

    ``shape_forget_bias`` (Beta variants, default 0) adds +b to the output
    bias of the shape groups in the forget numerator and -b to the groups
    only in its denominator, the analogue of a forget-gate bias.
    ``recurrent_scale`` multiplies the initial Wh; long sequences (hundreds
    of steps) explode at the default scale of 1.
    """
    if variant not in BLOCKS:
        raise UsageError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}")
    if shape_depth < 1:
        raise UsageError("shape_depth must be >= 1")
    blocks = BLOCKS[variant]
    width = len(blocks) * hidden
    bound = 1.0 / np.sqrt(input_dim + hidden)
    out = {
        prefix + "Wx": rng.uniform(-bound, bound, (input_dim, width)),
        prefix + "Wh": recurrent_scale * rng.uniform(-bound, bound, (hidden, width)),
        prefix + "b": np.zeros(width),
    }
    if "f" in blocks:
        k = blocks.index("f")
        out[prefix + "b"][k * hidden : (k + 1) * hidden] = forget_bias
    if shape_depth > 1:
        hb = 1.0 / np.sqrt(hidden)
        for j in range(1, num_shape_groups(variant) + 1):
            # layer 1 reads concat(x, h); later layers and the output read the hidden layer
            out[f"{prefix}g{j}.W1"] = rng.uniform(-bound, bound, (input_dim + hidden, hidden))
            out[f"{prefix}g{j}.b1"] = np.zeros(hidden)
            for d in range(2, shape_depth):
                out[f"{prefix}g{j}.W{d}"] = rng.uniform(-hb, hb, (hidden, hidden))
                out[f"{prefix}g{j}.b{d}"] = np.zeros(hidden)
            out[f"{prefix}g{j}.Wout"] = rng.uniform(-hb, hb, (hidden, hidden))
            out[f"{prefix}g{j}.bout"] = np.zeros(hidden)
    if shape_forget_bias and variant in SHAPE_FORGET_SIGNS:
        for name, sign in SHAPE_FORGET_SIGNS[variant].items():
            if shape_depth > 1:
                out[f"{prefix}g{name[1:]}.bout"] += sign * shape_forget_bias
            else:
                k = blocks.index(name)
                out[prefix + "b"][k * hidden : (k + 1) * hidden] += sign * shape_forget_bias
    return out


def count_parameters(arrays: dict[str, np.ndarray]) -> int:
    return int(sum(np.size(v) for v in arrays.values()))


# -- shared pieces ---------------------------------------------------------------


def _preactivation(params: CellParams, x: Tensor, h: Tensor) -> Tensor:
    if x.ndim != 2 or x.shape[1] != params.input_dim:
        raise ShapeError(f"{params.variant} step input", x.shape, params.Wx.shape)
    if h.shape != (x.shape[0], params.hidden):
        raise ShapeError(f"{params.variant} step hidden", h.shape, (x.shape[0], params.hidden))
    return x @ params.Wx + h @ params.Wh + params.b


def _update(params: CellParams, z: Tensor, state: CellState, i: Tensor, f: Tensor) -> tuple[CellState, Tensor]:
    o = T.sigmoid(params.block(z, "o"))
    candidate = T.tanh(params.block(z, "c"))
    c = f * state.c + i * candidate
    h = o * T.tanh(c)
    return CellState(c, h), o


def compute_shapes(
    params: CellParams, x: Tensor, h_prev: Tensor, z: Tensor | None = None, floor: float = SHAPE_FLOOR
) -> list[Tensor]:
    """U^(j) = softplus(g_j(concat(x, h_prev))) + floor for every shape group j."""
    n = num_shape_groups(params.variant)
    if not params.shape_mlp:
        if z is None:
            z = _preactivation(params, x, h_prev)
        # the U blocks are contiguous, so one softplus covers every group
        H = params.hidden
        start = BLOCKS[params.variant].index("U1") * H
        joint = T.softplus(T.slice_last(z, start, start + n * H)) + floor
        return [T.slice_last(joint, (j - 1) * H, j * H) for j in range(1, n + 1)]
    xh = T.concat([x, h_prev])
    shapes = []
    for j in range(1, n + 1):
        a = T.relu(xh @ params.shape_mlp[f"g{j}.W1"] + params.shape_mlp[f"g{j}.b1"])
        d = 2
        while f"g{j}.W{d}" in params.shape_mlp:
            a = T.relu(a @ params.shape_mlp[f"g{j}.W{d}"] + params.shape_mlp[f"g{j}.b{d}"])
            d += 1
        shapes.append(T.softplus(a @ params.shape_mlp[f"g{j}.Wout"] + params.shape_mlp[f"g{j}.bout"]) + floor)
    return shapes


def _draw(shapes: list[Tensor], rng: RngStream | None, opts: StepOptions) -> list[Tensor]:
    if opts.mode == "mean":
        return list(shapes)
    if rng is None:
        raise UsageError("sampling mode needs an RngStream")
    # one sampler call for all groups; each group is a column block of the joint draw
    H = shapes[0].shape[-1]
    u = T.gamma_node(T.concat(shapes), rng.spawn(1))
    return [T.slice_last(u, j * H, (j + 1) * H) for j in range(len(shapes))]


# -- steps ---------------------------------------------------------------------------


def step_lstm(params, x, state, rng=None, prior=None, opts=DEFAULT_OPTIONS):
    z = _preactivation(params, x, state.h)
    i = T.sigmoid(params.block(z, "i"))
    f = T.sigmoid(params.block(z, "f"))
    new, o = _update(params, z, state, i, f)
    return new, GateTrace(i, f, o)


def step_cifg(params, x, state, rng=None, prior=None, opts=DEFAULT_OPTIONS):
    z = _preactivation(params, x, state.h)
    raw = T.sigmoid(params.block(z, "i"))
    f = 1.0 - raw
    # re-deriving i from f makes i + f == 1 hold exactly in floating point
    i = 1.0 - f
    new, o = _update(params, z, state, i, f)
    return new, GateTrace(i, f, o)


def step_g2lstm(params, x, state, rng=None, prior=None, opts=DEFAULT_OPTIONS):
    z = _preactivation(params, x, state.h)
    gates = []
    for j, name in enumerate(("i", "f"), start=1):
        pre = params.block(z, name)
        if opts.mode == "sample":
            if rng is None:
                raise UsageError("sampling mode needs an RngStream")
            stream = rng.spawn(j)
            noise = stream.gumbel(pre.shape) - stream.gumbel(pre.shape)
            pre = pre + noise
        gates.append(T.sigmoid(pre * (1.0 / opts.tau)))
    i, f = gates
    new, o = _update(params, z, state, i, f)
    return new, GateTrace(i, f, o)


def step_blstm(params, x, state, rng=None, prior=None, opts=DEFAULT_OPTIONS):
    z = _preactivation(params, x, state.h)
    U = compute_shapes(params, x, state.h, z, opts.shape_floor)
    u = _draw(U, rng, opts)
    i = u[0] / (u[0] + u[1])
    f = u[2] / (u[2] + u[3])
    new, o = _update(params, z, state, i, f)
    return new, GateTrace(i, f, o, u, U)


def step_bblstm3g(params, x, state, rng=None, prior=None, opts=DEFAULT_OPTIONS):
    z = _preactivation(params, x, state.h)
    U = compute_shapes(params, x, state.h, z, opts.shape_floor)
    u = _draw(U, rng, opts)
    i = u[0] / (u[0] + u[2])
    f = u[1] / (u[1] + u[2])
    new, o = _update(params, z, state, i, f)
    return new, GateTrace(i, f, o, u, U)


def five_gamma_gates(u: Sequence) -> tuple:
    """Input and forget gates from five Gamma variables.

    i = (u1 + u3) / (u1 + u3 + u4 + u5),  f = (u2 + u4) / (u2 + u3 + u4 + u5).
    Works on tensors and plain arrays alike.
    """
    u1, u2, u3, u4, u5 = u
    i_num = u1 + u3
    f_num = u2 + u4
    i = i_num / (i_num + u4 + u5)
    f = f_num / (f_num + u3 + u5)
    return i, f


def step_bblstm5g(params, x, state, rng=None, prior=None, opts=DEFAULT_OPTIONS):
    z = _preactivation(params, x, state.h)
    U = compute_shapes(params, x, state.h, z, opts.shape_floor)
    u = _draw(U, rng, opts)
    i, f = five_gamma_gates(u)
    new, o = _update(params, z, state, i, f)
    return new, GateTrace(i, f, o, u, U)


def step_bblstm5g_p(params, x, state, rng=None, prior=None, opts=DEFAULT_OPTIONS):
    """5G step whose shapes are the variational posterior; adds KL(q || prior)."""
    if prior is None:
        prior = GammaPrior.constant()
    new, trace = step_bblstm5g(params, x, state, rng, None, opts)
    rows = None
    for j, Uq in enumerate(trace.U):
        kl = T.sum(kl_gamma_tensor(Uq, prior.shape(j), prior.rate(j)), axis=-1)
        rows = kl if rows is None else rows + kl
    trace.kl_rows = rows
    trace.kl = T.mean(rows)
    return new, trace


STEPS: dict[str, Callable] = {
    "lstm": step_lstm,
    "cifg": step_cifg,
    "g2lstm": step_g2lstm,
    "blstm": step_blstm,
    "bblstm3g": step_bblstm3g,
    "bblstm5g": step_bblstm5g,
    "bblstm5gp": step_bblstm5g_p,
}


def get_step(variant: str) -> Callable:
    try:
        return STEPS[variant]
    except KeyError:
        raise UsageError(f"unknown variant {variant!r}; choose from {', '.join(VARIANTS)}") from None


# -- unrolling ---------------------------------------------------------------------


@dataclass
class UnrollResult:
    outputs: list[Tensor]  # top-layer h per step
    traces: list[list[GateTrace]]  # [layer][t]
    states: list[list[CellState]]  # [layer][t], state after step t
    kl_sum: Tensor | None  # sum over steps of the batch-mean masked KL
    kl_steps: list[Tensor] | None  # per-step masked KL rows of all layers, shape [B]


def unroll(
    variant: str,
    params: Sequence[CellParams],
    inputs,
    initial: Sequence[CellState] | None = None,
    rng: RngStream | None = None,
    mask: np.ndarray | None = None,
    prior_fn: Callable[[int, int], GammaPrior | None] | None = None,
    opts: StepOptions = DEFAULT_OPTIONS,
) -> UnrollResult:
    """Run a (stacked) cell over a sequence.

    ``inputs`` is an array [T, B, in] or a list of T tensors [B, in].
    ``mask`` [T, B] marks valid steps; a sequence's state is frozen past its
    end.  Layer ``l`` consumes layer ``l-1``'s hidden states.
    """
    step = get_step(variant)
    steps = list(inputs) if not isinstance(inputs, np.ndarray) else [Tensor(inputs[t]) for t in range(inputs.shape[0])]
    if not steps:
        raise UsageError("unroll needs at least one timestep")
    steps = [s if isinstance(s, Tensor) else Tensor(s) for s in steps]
    batch = steps[0].shape[0]
    if initial is None:
        initial = [CellState.zeros(batch, p.hidden) for p in params]
    if mask is not None:
        mask = np.asarray(mask, dtype=np.float64)
        if mask.shape != (len(steps), batch):
            raise ShapeError("unroll mask", mask.shape, (len(steps), batch))
    layer_rngs = [rng.spawn(layer) if rng is not None else None for layer in range(len(params))]
    states = list(initial)
    traces: list[list[GateTrace]] = [[] for _ in params]
    history: list[list[CellState]] = [[] for _ in params]
    outputs: list[Tensor] = []
    kl_steps: list[Tensor] = []
    kl_sum = None
    for t, x in enumerate(steps):
        m = None
        if mask is not None and not mask[t].all():
            m = mask[t][:, None]
        step_kl = None
        for layer, p in enumerate(params):
            step_rng = layer_rngs[layer].spawn(t) if layer_rngs[layer] is not None else None
            prior = prior_fn(t, layer) if prior_fn is not None else None
            new, trace = step(p, x, states[layer], step_rng, prior, opts)
            if m is not None:
                old = states[layer]
                new = CellState(old.c + m * (new.c - old.c), old.h + m * (new.h - old.h))
            if trace.kl_rows is not None:
                rows = trace.kl_rows if mask is None else trace.kl_rows * mask[t]
                step_kl = rows if step_kl is None else step_kl + rows
            states[layer] = new
            traces[layer].append(trace)
            history[layer].append(new)
            x = new.h
        outputs.append(x)
        if step_kl is not None:
            kl_steps.append(step_kl)
            kl_sum = T.mean(step_kl) if kl_sum is None else kl_sum + T.mean(step_kl)
    return UnrollResult(outputs, traces, history, kl_sum, kl_steps or None)
