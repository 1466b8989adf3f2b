"""Run configuration, dataset assembly, the training loop and evaluation.

Outputs of a run directory:

* ``metadata.json``: full config, derived seeds, package version, data sizes;
  feeding it back as ``--config`` reproduces the run;
* ``metrics.jsonl``: one JSON object per epoch (deterministic content only);
* ``timing.jsonl``: wall-clock seconds per epoch, kept apart so that
  ``metrics.jsonl`` is bit-identical across repeated runs;
* ``best.json`` / ``last.json``: checkpoints (best by validation metric).
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from . import cells
from . import data as D
from . import tape as T
from .errors import DataFormatError, NumericError, UsageError
from .model import Model, ModelSpec, check_compatible, init_params
from .objectives import NUM_GROUPS, AdamState, PriorSpec, adam_step
from .stochastic import RngStream

OUT_ENV = "BBLSTM_OUT"
EVAL_SAMPLES = 10


@dataclass
class RunConfig:
    variant: str = "bblstm5g"
    task: str = "synthetic"  # classify | music | mnist | synthetic
    # data
    train_path: str | None = None
    valid_path: str | None = None
    test_path: str | None = None
    music_path: str | None = None  # piano-roll JSON: a list, or {"train","valid","test"} splits
    mnist_dir: str | None = None
    mnist_variant: str = "smnist"
    digits: list | None = None
    features_path: str | None = None
    max_sequences: int | None = None  # desk-scale cap per split
    synthetic_sequences: int = 200
    synthetic_length: int = 20
    # model
    hidden: int = 64
    layers: int = 1
    embed_dim: int = 64
    shape_depth: int = 1
    forget_bias: float = 1.0
    shape_forget_bias: float = 0.0  # Beta variants; 0 keeps zero biases
    recurrent_scale: float = 1.0  # multiplier on the initial Wh
    tau: float = 1.0
    # objective
    lam: float = 0.01
    prior_mode: str = "constant"
    prior_shapes: list = field(default_factory=lambda: [1.0] * NUM_GROUPS)
    prior_rates: list = field(default_factory=lambda: [1.0] * NUM_GROUPS)
    length_scale: float = 1.0
    output_scale: float = 1.0
    # optimisation
    batch_size: int = 32
    epochs: int = 10
    lr: float = 1e-3
    clip_norm: float = 5.0
    # seeds; None derives from ``seed``
    seed: int = 0
    init_seed: int | None = None
    shuffle_seed: int | None = None
    sampler_seed: int | None = None
    permutation_seed: int = D.DEFAULT_PERMUTATION_SEED
    # evaluation and output
    eval_mode: str = "mean"
    eval_samples: int = EVAL_SAMPLES
    eval_train: bool = False
    out_dir: str = "runs/default"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.variant not in cells.VARIANTS:
            raise UsageError(f"unknown variant {self.variant!r}; choose from {', '.join(cells.VARIANTS)}")
        if self.task not in ("classify", "music", "mnist", "synthetic"):
            raise UsageError(f"unknown task {self.task!r}")
        for name in ("hidden", "layers", "embed_dim", "shape_depth", "batch_size", "eval_samples"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise UsageError("epochs must be >= 0")
        for name in ("lr", "tau", "length_scale", "output_scale"):
            if not getattr(self, name) > 0:
                raise UsageError(f"{name} must be > 0")
        if self.lam < 0 or self.clip_norm < 0:
            raise UsageError("lambda and clip_norm must be >= 0")
        if self.eval_mode not in ("mean", "sample"):
            raise UsageError("eval_mode must be 'mean' or 'sample'")
        if self.task == "classify" and not self.train_path:
            raise UsageError("task classify needs train_path")
        if self.task == "mnist" and not self.mnist_dir:
            raise UsageError("task mnist needs mnist_dir")
        if self.prior_mode == "kernel" and not self.features_path:
            raise UsageError("the kernel prior needs features_path")
        self.prior_spec()  # validates prior fields

    # seeds -------------------------------------------------------------
    @property
    def seeds(self) -> dict[str, int]:
        pick = lambda v, k: v if v is not None else self.seed * 1000 + k
        return {
            "init": pick(self.init_seed, 1),
            "shuffle": pick(self.shuffle_seed, 2),
            "sampler": pick(self.sampler_seed, 3),
            "permutation": self.permutation_seed,
        }

    def prior_spec(self) -> PriorSpec:
        return PriorSpec(
            self.prior_mode,
            tuple(self.prior_shapes),
            tuple(self.prior_rates),
            self.length_scale,
            self.output_scale,
            self.lam,
        )

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if "config" in doc and isinstance(doc["config"], dict):
            doc = doc["config"]  # a run's metadata.json
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - names)
        if unknown:
            raise UsageError(f"unknown config field(s): {', '.join(unknown)}")
        return cls(**doc)

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: invalid JSON config ({exc.msg})") from None
        except OSError as exc:
            raise UsageError(f"cannot read config {path}: {exc.strerror}") from None
        return cls.from_dict(doc)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


def resolve_out_dir(config: RunConfig, flag: str | None = None) -> str:
    """--out flag, then the BBLSTM_OUT environment variable, then the config."""
    return flag or os.environ.get(OUT_ENV) or config.out_dir


# -- data ------------------------------------------------------------------------


@dataclass
class TaskData:
    train: object
    valid: object
    test: object
    input_dim: int
    output_dim: int
    features: np.ndarray | None = None


def _split_tail(items, fraction: float = 1.0 / 6.0):
    n_train = int(round(len(items) * (1.0 - fraction)))
    return items[:n_train], items[n_train:]


def _mnist_files(directory: Path, split: str):
    for stem_img, stem_lab in ((f"{split}-images-idx3-ubyte", f"{split}-labels-idx1-ubyte"),):
        for suffix in (".gz", ""):
            img, lab = directory / (stem_img + suffix), directory / (stem_lab + suffix)
            if img.exists() and lab.exists():
                return img, lab
    raise DataFormatError(f"{directory}: missing {split}-images-idx3-ubyte[.gz] / {split}-labels-idx1-ubyte[.gz]")


def load_task_data(config: RunConfig) -> TaskData:
    cap = config.max_sequences
    seeds = config.seeds
    if config.task == "classify":
        train = D.load_jsonl_classification(config.train_path)
        if config.valid_path:
            valid = D.load_jsonl_classification(config.valid_path)
        else:
            head, tail = _split_tail(train.records)
            valid = D.ClassificationDataset(tail, train.vocab, train.classes)
            train = D.ClassificationDataset(head, train.vocab, train.classes, train.rejected)
        test = D.load_jsonl_classification(config.test_path) if config.test_path else valid
        vocab = max(train.vocab, valid.vocab, test.vocab)
        classes = max(train.classes, valid.classes, test.classes, 2)
        features = D.load_feature_vectors(config.features_path) if config.features_path else None
        return TaskData(D.cap(train, cap), D.cap(valid, cap), D.cap(test, cap), vocab, classes, features)
    if config.task == "music":
        if config.music_path:
            splits = D.load_pianoroll_splits(config.music_path)
        else:
            # no corpus given: generated chorale-like rolls
            rolls = D.synthetic_chorales(config.synthetic_sequences, seed=seeds["shuffle"] + 17)
            n = len(rolls)
            splits = {"train": rolls[: int(0.7 * n)], "valid": rolls[int(0.7 * n) : int(0.85 * n)], "test": rolls[int(0.85 * n) :]}
        if "valid" not in splits:
            splits["train"], splits["valid"] = _split_tail(splits["train"])
        splits.setdefault("test", splits["valid"])
        return TaskData(*(D.cap(splits[k], cap) for k in ("train", "valid", "test")), D.NUM_NOTES, D.NUM_NOTES)
    if config.task == "mnist":
        directory = Path(config.mnist_dir)
        full = D.load_mnist_idx(*_mnist_files(directory, "train"), config.mnist_variant, config.permutation_seed)
        test = D.load_mnist_idx(*_mnist_files(directory, "test"), config.mnist_variant, config.permutation_seed)
        if config.digits:
            full = full.subset(np.isin(full.labels, config.digits))
            test = test.subset(np.isin(test.labels, config.digits))
            # relabel to 0..k-1 in the listed order
            lookup = {d: k for k, d in enumerate(config.digits)}
            full.labels = np.array([lookup[int(y)] for y in full.labels], dtype=np.int64)
            test.labels = np.array([lookup[int(y)] for y in test.labels], dtype=np.int64)
        train, valid = D.split_train_valid(full)
        classes = len(config.digits) if config.digits else 10
        return TaskData(D.cap(train, cap), D.cap(valid, cap), D.cap(test, cap), 1, classes)
    n, length = config.synthetic_sequences, config.synthetic_length
    base = seeds["shuffle"] + 101
    train = D.two_regime_task(n, length, base)
    valid = D.two_regime_task(max(n // 4, 1), length, base + 1)
    test = D.two_regime_task(max(n // 4, 1), length, base + 2)
    return TaskData(D.cap(train, cap), D.cap(valid, cap), D.cap(test, cap), 4, 2)


def build_model(config: RunConfig, task_data: TaskData) -> Model:
    spec = ModelSpec(
        config.variant,
        config.task,
        task_data.input_dim,
        task_data.output_dim,
        hidden=config.hidden,
        layers=config.layers,
        embed_dim=config.embed_dim,
        shape_depth=config.shape_depth,
        forget_bias=config.forget_bias,
        shape_forget_bias=config.shape_forget_bias,
        recurrent_scale=config.recurrent_scale,
        prior=config.prior_spec(),
    )
    return Model(spec, task_data.features)


# -- evaluation ----------------------------------------------------------------------


def higher_is_better(task: str) -> bool:
    return task != "music"


def _pass(model: Model, params, dataset, config: RunConfig, opts, rng: RngStream | None) -> dict:
    correct = count = 0.0
    nll_sum = kl_sum = 0.0
    n_seq = 0
    for bi, b in enumerate(D.batch(dataset, config.batch_size)):
        res = model.forward(params, b, rng.spawn(bi) if rng is not None else None, opts)
        correct += res.correct
        count += res.count
        nll_sum += res.nll.item() * b.size
        kl_sum += (res.kl.item() if res.kl is not None else 0.0) * b.size
        n_seq += b.size
    nll = nll_sum / max(n_seq, 1)
    metric = nll if config.task == "music" else correct / max(count, 1.0)
    return {"metric": metric, "nll": nll, "kl": kl_sum / max(n_seq, 1)}


def evaluate(model: Model, params, dataset, config: RunConfig, mode: str | None = None, k: int | None = None) -> dict:
    """Test metric: accuracy, or per-frame NLL for music.

    ``mean`` mode is deterministic.  ``sample`` mode runs ``k`` stochastic
    passes (default 10) and reports their mean and standard deviation.
    """
    mode = mode or config.eval_mode
    k = k or config.eval_samples
    params = {name: T.Tensor(v) for name, v in params.items()}
    if mode == "mean" or model.spec.variant not in cells.STOCHASTIC:
        out = _pass(model, params, dataset, config, cells.StepOptions("mean", config.tau), None)
        return {**out, "std": 0.0, "mode": "mean", "passes": 1}
    base = RngStream(config.seeds["sampler"], 1)
    runs = [_pass(model, params, dataset, config, cells.StepOptions("sample", config.tau), base.spawn(p)) for p in range(k)]
    metrics = np.array([r["metric"] for r in runs])
    return {
        "metric": float(metrics.mean()),
        "std": float(metrics.std()),
        "nll": float(np.mean([r["nll"] for r in runs])),
        "kl": float(np.mean([r["kl"] for r in runs])),
        "mode": "sample",
        "passes": k,
    }


# -- training -------------------------------------------------------------------------


@dataclass
class TrainResult:
    out_dir: Path
    best_metric: float | None
    best_epoch: int
    history: list[dict]
    params: dict


def _write_json(path: Path, doc) -> None:
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _metadata(config: RunConfig, task_data: TaskData, params: dict) -> dict:
    return {
        "config": config.to_dict(),
        "seeds": config.seeds,
        "version": __version__,
        "parameters": int(sum(v.size for v in params.values())),
        "sizes": {k: len(getattr(task_data, k)) for k in ("train", "valid", "test")},
        "mnist_permutation_seed": config.permutation_seed if config.task == "mnist" else None,
    }


def train(config: RunConfig, out_dir: str | Path | None = None, log=sys.stdout) -> TrainResult:
    """Train per ``config``; writes metadata, metrics and checkpoints to ``out_dir``.

    A non-finite loss or gradient aborts the run with :class:`NumericError`;
    the best checkpoint written so far is left in place.
    """
    out = Path(out_dir or config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    task_data = load_task_data(config)
    model = build_model(config, task_data)
    seeds = config.seeds
    params = init_params(model.spec, seeds["init"])
    _write_json(out / "metadata.json", _metadata(config, task_data, params))
    metrics_path, timing_path = out / "metrics.jsonl", out / "timing.jsonl"
    metrics_path.write_text("")
    timing_path.write_text("")
    meta = {"config": config.to_dict(), "epoch": 0}
    T.save_checkpoint(out / "best.json", params, meta)

    better = higher_is_better(config.task)
    best_metric, best_epoch = None, 0
    history = []
    adam = AdamState()
    sampler = RngStream(seeds["sampler"])
    opts = cells.StepOptions("sample", config.tau)
    for epoch in range(1, config.epochs + 1):
        t0 = time.perf_counter()
        epoch_rng = sampler.spawn(epoch)
        loss_sum = nll_sum = kl_sum = gnorm_sum = 0.0
        correct = count = 0.0
        n_batches = n_seq = 0
        for bi, b in enumerate(D.batch(task_data.train, config.batch_size, seeds["shuffle"], epoch)):
            tape = T.Tape()
            ts = {k: tape.param(v, k) for k, v in params.items()}
            try:
                res = model.forward(ts, b, epoch_rng.spawn(bi), opts)
                grads = tape.backward(res.loss).by_name()
            except NumericError as exc:
                _abort(out, epoch, bi, str(exc), log)
                raise
            bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
            if bad or not math.isfinite(res.loss.item()):
                msg = f"non-finite gradient in {', '.join(bad)}" if bad else "non-finite loss"
                _abort(out, epoch, bi, msg, log)
                raise NumericError(msg, epoch=epoch, batch=bi)
            gnorm_sum += T.clip_by_global_norm(grads, config.clip_norm)
            adam_step(params, grads, adam, lr=config.lr)
            loss_sum += res.loss.item() * b.size
            nll_sum += res.nll.item() * b.size
            kl_sum += (res.kl.item() if res.kl is not None else 0.0) * b.size
            correct += res.correct
            count += res.count
            n_batches += 1
            n_seq += b.size
        valid = evaluate(model, params, task_data.valid, config)
        record = {
            "epoch": epoch,
            "train_loss": loss_sum / max(n_seq, 1),
            "train_nll": nll_sum / max(n_seq, 1),
            "train_metric": (nll_sum / max(n_seq, 1)) if config.task == "music" else correct / max(count, 1.0),
            "valid_metric": valid["metric"],
            "valid_nll": valid["nll"],
            "kl": kl_sum / max(n_seq, 1),
            "grad_norm": gnorm_sum / max(n_batches, 1),
        }
        if config.eval_train:
            record["train_eval_metric"] = evaluate(model, params, task_data.train, config)["metric"]
        improved = best_metric is None or (valid["metric"] > best_metric if better else valid["metric"] < best_metric)
        if improved:
            best_metric, best_epoch = valid["metric"], epoch
            T.save_checkpoint(out / "best.json", params, {**meta, "epoch": epoch, "valid_metric": valid["metric"]})
        history.append(record)
        with open(metrics_path, "a") as fh:
            fh.write(json.dumps(record) + "\n")
        with open(timing_path, "a") as fh:
            fh.write(json.dumps({"epoch": epoch, "wall_time": time.perf_counter() - t0}) + "\n")
        if log is not None:
            print(
                f"epoch {epoch}: loss {record['train_loss']:.4f} train {record['train_metric']:.4f} "
                f"valid {record['valid_metric']:.4f} kl {record['kl']:.4g}",
                file=log,
                flush=True,
            )
    T.save_checkpoint(out / "last.json", params, {**meta, "epoch": config.epochs})
    if log is not None:
        shown = "n/a" if best_metric is None else f"{best_metric:.4f}"
        print(f"done: best valid {shown} at epoch {best_epoch}; outputs in {out}", file=log, flush=True)
    return TrainResult(out, best_metric, best_epoch, history, params)


def _abort(out: Path, epoch: int, batch_index: int, message: str, log) -> None:
    _write_json(out / "abort.json", {"epoch": epoch, "batch": batch_index, "error": message})
    if log is not None:
        print(f"aborted at epoch {epoch} batch {batch_index}: {message}; best.json keeps the last good state", file=log)


def load_for_eval(config: RunConfig, checkpoint) -> tuple[Model, dict, TaskData]:
    task_data = load_task_data(config)
    model = build_model(config, task_data)
    params, _ = T.load_checkpoint(checkpoint)
    check_compatible(model.spec, params)
    return model, params, task_data
