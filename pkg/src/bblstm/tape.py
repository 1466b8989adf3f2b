"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every operation applied to tensors that belong to
it; ``Tape.backward`` then replays the records in exact reverse order.
Tensors without a tape are constants: operations on constants alone are
evaluated eagerly and never recorded, which is how evaluation runs without
any bookkeeping.

Stochastic Gamma nodes (:func:`gamma_node`) store the elementwise pathwise
gradient of each draw and multiply the upstream gradient by it.
"""

from __future__ import annotations

import json
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .errors import NumericError, ShapeError, UsageError
from .stochastic import QuantileReplay, RngStream, sample_gamma_array

CHECKPOINT_FORMAT = "bblstm-checkpoint"
CHECKPOINT_VERSION = 1


class Tensor:
    __slots__ = ("data", "tape", "node", "name")
    __array_priority__ = 100.0

    def __init__(self, data, tape: "Tape | None" = None, node: int | None = None, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape
        self.node = node
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        tag = f" node={self.node}" if self.node is not None else ""
        return f"Tensor(shape={self.shape}{tag})"

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    __add__ = lambda self, o: add(self, o)
    __radd__ = lambda self, o: add(o, self)
    __sub__ = lambda self, o: sub(self, o)
    __rsub__ = lambda self, o: sub(o, self)
    __mul__ = lambda self, o: mul(self, o)
    __rmul__ = lambda self, o: mul(o, self)
    __truediv__ = lambda self, o: div(self, o)
    __rtruediv__ = lambda self, o: div(o, self)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: neg(self)

    def __getitem__(self, index):
        return take(self, index)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


class Gradients(Mapping):
    """Gradients by tensor; tensors the loss does not reach map to zeros."""

    def __init__(self, grads: dict, tensors: dict):
        self._grads = grads
        self._tensors = tensors

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        g = self._grads.get(tensor.node)
        return np.zeros_like(tensor.data) if g is None else g

    def __iter__(self):
        return iter(self._tensors.values())

    def __len__(self) -> int:
        return len(self._tensors)

    def by_name(self) -> dict[str, np.ndarray]:
        return {t.name: self[t] for t in self._tensors.values() if t.name is not None}


class Tape:
    """Ordered record of operations; recording order is topological order."""

    def __init__(self, check_finite: bool = True):
        self._parents: list[tuple] = []
        self._backward: list[Callable | None] = []
        self._ops: list[str] = []
        self.params: dict[str, Tensor] = {}
        self.check_finite = check_finite

    def __len__(self) -> int:
        return len(self._ops)

    def param(self, data, name: str | None = None) -> Tensor:
        """Register a differentiable leaf."""
        t = Tensor(np.array(data, dtype=np.float64), self, len(self._ops), name)
        self._parents.append(())
        self._backward.append(None)
        self._ops.append("leaf")
        if name is not None:
            self.params[name] = t
        return t

    def record(self, op: str, data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
        if self.check_finite and not np.isfinite(data).all():
            raise NumericError(f"non-finite value produced by {op}", shape=data.shape)
        t = Tensor(data, self, len(self._ops))
        self._parents.append(parents)
        self._backward.append(backward)
        self._ops.append(op)
        return t

    def backward(self, loss: Tensor, wrt: Iterable[Tensor] | None = None) -> Gradients:
        """Propagate d loss / d node back through the tape.

        Keeps gradients for every leaf plus any tensors listed in ``wrt``
        (e.g. intermediate cell states); other intermediates are dropped as
        soon as they have been consumed.
        """
        if loss.tape is not self or loss.node is None:
            raise UsageError("loss is not recorded on this tape")
        if loss.data.size != 1:
            raise UsageError(f"backward needs a scalar loss, got shape {loss.shape}")
        keep = {node for node, op in enumerate(self._ops) if op == "leaf"}
        tensors = {t.node: t for t in self.params.values()}
        for t in wrt or ():
            if t.tape is self and t.node is not None:
                keep.add(t.node)
                tensors[t.node] = t
        grads: dict[int, np.ndarray] = {loss.node: np.ones_like(loss.data)}
        kept: dict[int, np.ndarray] = {}
        for node in range(loss.node, -1, -1):
            g = grads.pop(node, None)
            if g is None:
                continue
            if node in keep:
                kept[node] = g
            fn = self._backward[node]
            if fn is None:
                continue
            for parent, pg in zip(self._parents[node], fn(g)):
                if pg is None or parent.tape is not self:
                    continue
                prev = grads.get(parent.node)
                grads[parent.node] = pg if prev is None else prev + pg
        return Gradients(kept, tensors)


def _lift(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tape_of(*xs: Tensor) -> "Tape | None":
    for x in xs:
        if x.tape is not None:
            return x.tape
    return None


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _emit(op: str, data: np.ndarray, parents: tuple, backward: Callable) -> Tensor:
    tape = _tape_of(*parents)
    if tape is None:
        return Tensor(data)
    return tape.record(op, data, parents, backward)


def _broadcast_check(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(op, a.shape, b.shape) from None


# -- elementwise binary ------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_check("add", a, b)
    sa, sb = a.shape, b.shape
    return _emit("add", a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_check("sub", a, b)
    sa, sb = a.shape, b.shape
    return _emit("sub", a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_check("mul", a, b)
    ad, bd = a.data, b.data
    return _emit(
        "mul", ad * bd, (a, b), lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape))
    )


def div(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _broadcast_check("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd

    def back(g):
        ga = g / bd
        return _unbroadcast(ga, ad.shape), _unbroadcast(-ga * out, bd.shape)

    return _emit("div", out, (a, b), back)


def neg(a) -> Tensor:
    a = _lift(a)
    return _emit("neg", -a.data, (a,), lambda g: (-g,))


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)
    ad, bd = a.data, b.data
    return _emit("matmul", ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g))


# -- elementwise unary -------------------------------------------------------


def sigmoid(a) -> Tensor:
    a = _lift(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return _emit("sigmoid", out, (a,), lambda g: (g * out * (1.0 - out),))


def tanh(a) -> Tensor:
    a = _lift(a)
    out = np.tanh(a.data)
    return _emit("tanh", out, (a,), lambda g: (g * (1.0 - out * out),))


def softplus(a) -> Tensor:
    a = _lift(a)
    x = a.data
    out = np.logaddexp(0.0, x)
    return _emit("softplus", out, (a,), lambda g: (g * 0.5 * (1.0 + np.tanh(0.5 * x)),))


def relu(a) -> Tensor:
    a = _lift(a)
    x = a.data
    return _emit("relu", np.maximum(x, 0.0), (a,), lambda g: (g * (x > 0),))


def exp(a) -> Tensor:
    a = _lift(a)
    out = np.exp(a.data)
    return _emit("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _lift(a)
    x = a.data
    return _emit("log", np.log(x), (a,), lambda g: (g / x,))


def square(a) -> Tensor:
    a = _lift(a)
    x = a.data
    return _emit("square", x * x, (a,), lambda g: (2.0 * g * x,))


# -- structural --------------------------------------------------------------


def concat(xs: Sequence, axis: int = -1) -> Tensor:
    xs = [_lift(x) for x in xs]
    ax = axis % xs[0].ndim
    lead = [x.shape[:ax] + x.shape[ax + 1 :] for x in xs]
    if any(s != lead[0] for s in lead):
        raise ShapeError("concat", *(x.shape for x in xs))
    sizes = [x.shape[ax] for x in xs]
    splits = np.cumsum(sizes)[:-1]
    return _emit(
        "concat",
        np.concatenate([x.data for x in xs], axis=ax),
        tuple(xs),
        lambda g: tuple(np.split(g, splits, axis=ax)),
    )


def take(a, index) -> Tensor:
    """Basic (non-fancy) indexing, e.g. ``x[:, 0:8]`` or ``x[3]``."""
    a = _lift(a)
    shape = a.shape

    def back(g):
        full = np.zeros(shape)
        full[index] = g
        return (full,)

    return _emit("slice", a.data[index], (a,), back)


def slice_last(a, start: int, stop: int) -> Tensor:
    a = _lift(a)
    if not 0 <= start < stop <= a.shape[-1]:
        raise ShapeError(f"slice[{start}:{stop}]", a.shape)
    return take(a, (Ellipsis, slice(start, stop)))


def reshape(a, shape) -> Tensor:
    a = _lift(a)
    orig = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape to {tuple(shape)}", orig) from None
    return _emit("reshape", out, (a,), lambda g: (g.reshape(orig),))


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _lift(a)
    shape = a.shape

    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("sum", np.sum(a.data, axis=axis, keepdims=keepdims), (a,), back)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _lift(a)
    n = a.data.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def log_softmax(a) -> Tensor:
    """Log-softmax over the last axis."""
    a = _lift(a)
    x = a.data
    shifted = x - x.max(axis=-1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    probs = np.exp(out)
    return _emit("log_softmax", out, (a,), lambda g: (g - probs * g.sum(axis=-1, keepdims=True),))


def embedding(table, ids: np.ndarray) -> Tensor:
    """Rows of ``table`` selected by integer ``ids`` (any shape)."""
    table = _lift(table)
    ids = np.asarray(ids, dtype=np.int64)
    rows = table.shape[0]

    def back(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, table.shape[1]))
        return (full,)

    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        raise ShapeError("embedding ids out of range", table.shape, ids.shape)
    return _emit("embedding", table.data[ids], (table,), back)


# -- stochastic --------------------------------------------------------------


def gamma_node(shape_tensor, rng: RngStream) -> Tensor:
    """Elementwise Gamma(shape, 1) draws; backward multiplies by du/d(shape)."""
    shape_tensor = _lift(shape_tensor)
    values, grads, _ = sample_gamma_array(shape_tensor.data, rng)
    return _emit("gamma", values, (shape_tensor,), lambda g: (g * grads,))


# -- gradient checking -------------------------------------------------------


def numeric_gradient(f: Callable[[], float], x: np.ndarray, index, h: float = 1e-5) -> float:
    """Central difference of ``f`` in entry ``index`` of array ``x`` (restored after)."""
    old = x[index]
    x[index] = old + h
    fp = f()
    x[index] = old - h
    fm = f()
    x[index] = old
    return (fp - fm) / (2.0 * h)


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_gradients(
    loss_fn: Callable[[Mapping[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    probes: int = 20,
    h: float = 1e-5,
    seed: int = 0,
) -> float:
    """Largest relative error between tape gradients and central differences.

    ``loss_fn`` maps a dict of tensors to a scalar tensor and must be
    deterministic (freeze any :class:`RngStream` it uses).  ``probes`` random
    scalar entries across all parameters are compared.  Gamma draws made
    during the perturbed evaluations are replayed at their recorded CDF
    levels, so differences follow the same transport map as backward.
    """
    arrays = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    replay = QuantileReplay()

    def run(record: bool):
        if record:
            tape = Tape()
            ts = {k: tape.param(v, k) for k, v in arrays.items()}
            with replay.recording():
                return tape, ts, loss_fn(ts)
        with replay.replaying():
            return loss_fn({k: Tensor(v) for k, v in arrays.items()}).item()

    tape, ts, loss = run(True)
    grads = tape.backward(loss)
    picker = np.random.default_rng(seed)
    names = sorted(arrays)
    sizes = np.array([arrays[k].size for k in names], dtype=float)
    worst = 0.0
    for _ in range(probes):
        k = names[picker.choice(len(names), p=sizes / sizes.sum())]
        idx = np.unravel_index(picker.integers(arrays[k].size), arrays[k].shape)
        fd = numeric_gradient(lambda: run(False), arrays[k], idx, h)
        worst = max(worst, relative_error(float(grads[ts[k]][idx]), fd))
    return worst


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    norm = float(np.sqrt(np.sum([np.sum(g * g) for g in grads.values()])))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


# -- checkpoints ---------------------------------------------------------------


def save_checkpoint(path, params: Mapping[str, np.ndarray], meta: dict | None = None) -> None:
    """Write parameters as JSON; floats use repr so the round trip is exact."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "meta": meta or {},
        "params": {
            name: {"shape": list(np.shape(v)), "data": np.asarray(v, dtype=np.float64).ravel().tolist()}
            for name, v in sorted(params.items())
        },
    }
    with open(path, "w") as fh:
        json.dump(doc, fh)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise UsageError(f"{path}: not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise UsageError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    params = {
        name: np.array(entry["data"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in doc["params"].items()
    }
    return params, doc.get("meta", {})
