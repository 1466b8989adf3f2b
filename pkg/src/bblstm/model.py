"""Sequence models: input embedding, stacked cells, task head and prior."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import cells
from . import objectives as O
from . import tape as T
from .data import NUM_NOTES, Batch
from .errors import ArchitectureMismatch, ShapeError, UsageError
from .objectives import GammaPrior, PriorSpec
from .stochastic import RngStream
from .tape import Tensor

TASKS = ("classify", "music", "mnist", "synthetic")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture of a model; everything needed to build or check parameters.

    ``input_dim`` is the vocabulary size for token inputs and the feature
    width otherwise.  ``output_dim`` is the class count (88 notes for music).
    """

    variant: str
    task: str
    input_dim: int
    output_dim: int
    hidden: int = 64
    layers: int = 1
    embed_dim: int = 64
    shape_depth: int = 1
    forget_bias: float = 1.0
    shape_forget_bias: float = 0.0
    recurrent_scale: float = 1.0
    prior: PriorSpec = field(default_factory=PriorSpec)

    def __post_init__(self):
        if self.variant not in cells.VARIANTS:
            raise UsageError(f"unknown variant {self.variant!r}; choose from {', '.join(cells.VARIANTS)}")
        if self.task not in TASKS:
            raise UsageError(f"unknown task {self.task!r}; choose from {', '.join(TASKS)}")
        for name in ("input_dim", "output_dim", "hidden", "layers", "embed_dim", "shape_depth"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be >= 1")
        if self.task == "music" and self.output_dim != NUM_NOTES:
            raise UsageError(f"music models predict {NUM_NOTES} notes")
        if self.prior.mode == "kernel" and (self.task != "classify" or self.variant != "bblstm5gp"):
            raise UsageError("the kernel prior needs token inputs (task classify) and variant bblstm5gp")

    @property
    def token_inputs(self) -> bool:
        return self.task == "classify"

    @property
    def sequence_labels(self) -> bool:
        return self.task in ("classify", "mnist")


def init_params(spec: ModelSpec, seed: int) -> dict[str, np.ndarray]:
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    width = spec.input_dim
    if spec.token_inputs:
        params["embed"] = rng.uniform(-0.1, 0.1, (spec.input_dim, spec.embed_dim))
        width = spec.embed_dim
    for layer in range(spec.layers):
        params.update(
            cells.init_cell_params(
                spec.variant,
                width,
                spec.hidden,
                rng,
                spec.forget_bias,
                spec.shape_depth,
                prefix=f"L{layer}.",
                shape_forget_bias=spec.shape_forget_bias,
                recurrent_scale=spec.recurrent_scale,
            )
        )
        width = spec.hidden
    bound = 1.0 / np.sqrt(spec.hidden)
    params["head.W"] = rng.uniform(-bound, bound, (spec.hidden, spec.output_dim))
    params["head.b"] = np.zeros(spec.output_dim)
    if spec.prior.mode == "kernel":
        params["prior.log_length"] = np.array(np.log(spec.prior.length_scale))
        params["prior.log_scale"] = np.array(np.log(spec.prior.output_scale))
    return params


def param_shapes(spec: ModelSpec) -> dict[str, tuple]:
    return {k: v.shape for k, v in init_params(spec, 0).items()}


def check_compatible(spec: ModelSpec, params: Mapping[str, np.ndarray]) -> None:
    """Raise :class:`ArchitectureMismatch` listing every parameter whose shape differs."""
    want = param_shapes(spec)
    diffs = []
    for name in sorted(set(want) | set(params)):
        a = want.get(name)
        b = tuple(np.shape(params[name])) if name in params else None
        if a != b:
            diffs.append((name, a, b))
    if diffs:
        raise ArchitectureMismatch(diffs)


@dataclass
class ForwardResult:
    loss: Tensor  # training objective (negative ELBO)
    nll: Tensor
    kl: Tensor | None
    correct: float  # accuracy numerator (classification / tagging)
    count: float  # accuracy denominator, or number of sequences for music
    unrolled: cells.UnrollResult


class Model:
    """Stateless forward pass over a :class:`ModelSpec`.

    ``features`` is the per-token feature table required by the kernel prior.
    """

    def __init__(self, spec: ModelSpec, features: np.ndarray | None = None):
        self.spec = spec
        if spec.prior.mode == "kernel":
            if features is None:
                raise UsageError("the kernel prior needs a token feature table")
            if features.shape[0] < spec.input_dim:
                raise UsageError(f"feature table has {features.shape[0]} rows for a vocabulary of {spec.input_dim}")
        self.features = features

    def _layers(self, params) -> list[cells.CellParams]:
        return [cells.CellParams.from_arrays(self.spec.variant, params, f"L{k}.") for k in range(self.spec.layers)]

    def _inputs(self, params, batch: Batch) -> list[Tensor]:
        if self.spec.token_inputs:
            table = params["embed"]
            return [T.embedding(table, batch.inputs[t]) for t in range(batch.inputs.shape[0])]
        x = batch.inputs
        if x.ndim != 3 or x.shape[2] != self.spec.input_dim:
            raise ShapeError("model inputs", x.shape, (None, None, self.spec.input_dim))
        return [Tensor(x[t]) for t in range(x.shape[0])]

    def _prior_fn(self, params, batch: Batch):
        spec = self.spec.prior
        if self.spec.variant != "bblstm5gp":
            return None
        constant = GammaPrior(list(spec.shapes), list(spec.rates))
        if spec.mode == "constant":
            return lambda t, layer: constant
        feats = self.features[batch.inputs]  # [T, B, D]
        log_l, log_s = params["prior.log_length"], params["prior.log_scale"]
        cache: dict[int, Tensor] = {}

        def prior(t, layer):
            if t not in cache:
                prev = feats[t - 1] if t > 0 else feats[t]
                cache[t] = O.rbf_prior_shape_tensor(feats[t], prev, log_l, log_s)
            k = cache[t]
            return GammaPrior([k, k] + list(spec.shapes[2:]), list(spec.rates))

        return prior

    def forward(
        self,
        params: Mapping[str, Tensor],
        batch: Batch,
        rng: RngStream | None = None,
        opts: cells.StepOptions = cells.DEFAULT_OPTIONS,
        lam: float | None = None,
    ) -> ForwardResult:
        params = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}
        lam = self.spec.prior.lam if lam is None else lam
        res = cells.unroll(
            self.spec.variant,
            self._layers(params),
            self._inputs(params, batch),
            rng=rng,
            mask=batch.mask,
            prior_fn=self._prior_fn(params, batch),
            opts=opts,
        )
        W, b = params["head.W"], params["head.b"]
        task = self.spec.task
        if self.spec.sequence_labels:
            h = res.outputs[-1]  # frozen past each sequence's end, so this is the last valid state
            nll = O.classification_loss(h, batch.targets, W, b)
            pred = np.argmax(h.data @ W.data + b.data, axis=-1)
            correct, count = float(np.sum(pred == batch.targets)), float(batch.size)
        elif task == "synthetic":
            nll = O.tagging_loss(res.outputs, batch.targets, batch.mask, W, b)
            logits = np.stack([h.data @ W.data + b.data for h in res.outputs])
            hits = (np.argmax(logits, axis=-1) == batch.targets) * batch.mask
            correct, count = float(hits.sum()), float(batch.mask.sum())
        else:
            nll = O.polyphonic_nll(res.outputs, batch.targets, batch.mask, W, b)
            correct, count = 0.0, float(batch.size)
        kl = res.kl_sum
        loss = O.elbo_loss(nll, kl, lam) if kl is not None else nll
        return ForwardResult(loss, nll, kl, correct, count, res)
