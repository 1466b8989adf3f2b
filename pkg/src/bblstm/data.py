"""Dataset formats, loaders/writers, batching and synthetic task generators.

Supported on-disk formats:

* classification JSONL: one ``{"tokens": [...], "label": k}`` object per
  line, optionally preceded by a header ``{"vocab": V, "classes": C}``;
* piano-roll JSON: a list of sequences, each a list of timesteps, each a
  list of active note indices in ``[0, 88)``;
* MNIST IDX (optionally gzipped), the standard big-endian layout;
* token feature vectors for the kernel prior: a header line ``dim vocab``
  followed by one line of ``dim`` reals per token id.
"""

from __future__ import annotations

import gzip
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .errors import DataFormatError, UsageError
from .stochastic import RngStream

NUM_NOTES = 88
MNIST_PIXELS = 784
DEFAULT_PERMUTATION_SEED = 92916
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


# -- classification JSONL ------------------------------------------------------


@dataclass
class LabeledSequence:
    tokens: list[int]
    label: int


@dataclass
class ClassificationDataset:
    records: list[LabeledSequence]
    vocab: int
    classes: int
    rejected: int = 0

    def __len__(self) -> int:
        return len(self.records)


def load_jsonl_classification(path) -> ClassificationDataset:
    """Parse a classification JSONL file.

    Records with an empty token list are skipped and counted in
    ``rejected``.  Without a header, the vocabulary size is ``max id + 1``
    and the class count ``max label + 1``.
    """
    records: list[LabeledSequence] = []
    header = None
    rejected = 0
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise DataFormatError(f"{path}:{lineno}: expected a JSON object")
            if lineno == 1 and "tokens" not in obj and ("vocab" in obj or "classes" in obj):
                header = obj
                continue
            tokens, label = obj.get("tokens"), obj.get("label")
            if not isinstance(tokens, list) or not all(isinstance(t, int) and t >= 0 for t in tokens):
                raise DataFormatError(f"{path}:{lineno}: 'tokens' must be a list of non-negative integers")
            if not isinstance(label, int) or isinstance(label, bool) or label < 0:
                raise DataFormatError(f"{path}:{lineno}: 'label' must be a non-negative integer")
            if not tokens:
                rejected += 1
                continue
            records.append(LabeledSequence(tokens, label))
    vocab = max((max(r.tokens) for r in records), default=-1) + 1
    classes = max((r.label for r in records), default=-1) + 1
    if header is not None:
        h_vocab, h_classes = header.get("vocab", vocab), header.get("classes", classes)
        if h_vocab < vocab or h_classes < classes:
            raise DataFormatError(f"{path}: records exceed header sizes (vocab {h_vocab}, classes {h_classes})")
        vocab, classes = h_vocab, h_classes
    return ClassificationDataset(records, vocab, classes, rejected)


def write_jsonl_classification(path, dataset: ClassificationDataset) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps({"vocab": dataset.vocab, "classes": dataset.classes}) + "\n")
        for r in dataset.records:
            fh.write(json.dumps({"tokens": list(r.tokens), "label": r.label}) + "\n")


# -- piano rolls -----------------------------------------------------------------


@dataclass
class PianoRoll:
    steps: list[list[int]]

    def __post_init__(self):
        if len(self.steps) < 2:
            raise DataFormatError("a piano roll needs at least 2 timesteps")

    def to_array(self) -> np.ndarray:
        roll = np.zeros((len(self.steps), NUM_NOTES))
        for t, notes in enumerate(self.steps):
            roll[t, list(notes)] = 1.0
        return roll

    def next_step_pair(self) -> tuple[np.ndarray, np.ndarray]:
        """(inputs, targets): frames 0..T-2 predict frames 1..T-1."""
        roll = self.to_array()
        return roll[:-1], roll[1:]


def _parse_rolls(doc, source) -> list[PianoRoll]:
    if not isinstance(doc, list):
        raise DataFormatError(f"{source}: expected a list of sequences")
    rolls = []
    for s, seq in enumerate(doc):
        if not isinstance(seq, list):
            raise DataFormatError(f"{source}: sequence {s} is not a list of timesteps")
        steps = []
        for t, notes in enumerate(seq):
            if not isinstance(notes, list):
                raise DataFormatError(f"{source}: sequence {s} step {t} is not a list of notes")
            for n in notes:
                if not isinstance(n, int) or not 0 <= n < NUM_NOTES:
                    raise DataFormatError(f"{source}: sequence {s} step {t}: note {n!r} outside [0, {NUM_NOTES})")
            steps.append(sorted(set(notes)))
        if len(steps) < 2:
            raise DataFormatError(f"{source}: sequence {s} has fewer than 2 timesteps")
        rolls.append(PianoRoll(steps))
    return rolls


def load_pianoroll_json(path) -> list[PianoRoll]:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataFormatError(f"{path}: invalid JSON ({exc.msg})") from None
    if isinstance(doc, dict):
        # optional split container {"train": [...], "valid": [...], "test": [...]}
        raise DataFormatError(f"{path}: expected a list of sequences; use load_pianoroll_splits for split files")
    return _parse_rolls(doc, path)


def write_pianoroll_json(path, rolls: list[PianoRoll]) -> None:
    with open(path, "w") as fh:
        json.dump([r.steps for r in rolls], fh)


def load_pianoroll_splits(path) -> dict[str, list[PianoRoll]]:
    """Split container ``{"train": rolls, "valid": rolls, "test": rolls}``."""
    with open(path) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        return {"train": _parse_rolls(doc, path)}
    return {name: _parse_rolls(seqs, f"{path}[{name}]") for name, seqs in doc.items()}


def write_pianoroll_splits(path, splits: dict[str, list[PianoRoll]]) -> None:
    with open(path, "w") as fh:
        json.dump({k: [r.steps for r in v] for k, v in splits.items()}, fh)


# -- MNIST IDX -------------------------------------------------------------------


@dataclass
class PixelDataset:
    images: np.ndarray  # [N, 784] in [0, 1], already permuted for pMNIST
    labels: np.ndarray  # [N] ints
    variant: str = "smnist"
    permutation: np.ndarray | None = None

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index) -> "PixelDataset":
        return PixelDataset(self.images[index], self.labels[index], self.variant, self.permutation)


def _open_maybe_gz(path):
    path = Path(path)
    with open(path, "rb") as fh:
        magic = fh.read(2)
    return gzip.open(path, "rb") if magic == b"\x1f\x8b" else open(path, "rb")


def _read_idx(path, expected_magic: int) -> np.ndarray:
    with _open_maybe_gz(path) as fh:
        raw = fh.read()
    if len(raw) < 8:
        raise DataFormatError(f"{path}: truncated IDX header")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DataFormatError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    body = raw[4 + 4 * ndim :]
    if len(body) != int(np.prod(dims)):
        raise DataFormatError(f"{path}: payload has {len(body)} bytes, dims {dims} need {int(np.prod(dims))}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 IDX file (gzipped when ``path`` ends in .gz)."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise UsageError("IDX writer supports uint8 arrays only")
    header = struct.pack(">I", 0x00000800 | array.ndim) + struct.pack(f">{array.ndim}I", *array.shape)
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(header + array.tobytes())


def mnist_permutation(seed: int = DEFAULT_PERMUTATION_SEED) -> np.ndarray:
    """The single fixed pixel order used by pMNIST for ``seed``."""
    return RngStream(seed).permutation(MNIST_PIXELS)


def load_mnist_idx(
    images_path, labels_path, variant: str = "smnist", permutation_seed: int = DEFAULT_PERMUTATION_SEED
) -> PixelDataset:
    """Read IDX images/labels as 784-step pixel sequences scaled to [0, 1].

    ``variant`` "smnist" keeps row-major order; "pmnist" applies one fixed
    permutation, drawn from ``permutation_seed``, to every image.
    """
    variant = variant.lower()
    if variant not in ("smnist", "pmnist"):
        raise UsageError(f"MNIST variant must be smnist or pmnist, got {variant!r}")
    images = _read_idx(images_path, IDX_IMAGES_MAGIC)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC)
    if images.ndim != 3 or images.shape[1] * images.shape[2] != MNIST_PIXELS:
        raise DataFormatError(f"{images_path}: expected N x 28 x 28 images, got {images.shape}")
    if labels.shape != (images.shape[0],):
        raise DataFormatError(f"label count {labels.shape[0]} does not match image count {images.shape[0]}")
    flat = images.reshape(len(images), MNIST_PIXELS).astype(np.float64) / 255.0
    perm = None
    if variant == "pmnist":
        perm = mnist_permutation(permutation_seed)
        flat = flat[:, perm]
    return PixelDataset(flat, labels.astype(np.int64), variant, perm)


def split_train_valid(dataset: PixelDataset, valid_fraction: float = 1.0 / 6.0):
    """First part train, remainder validation, in original order (50k/10k at full scale)."""
    if not 0.0 < valid_fraction < 1.0:
        raise UsageError("valid_fraction must lie in (0, 1)")
    n_train = int(round(len(dataset) * (1.0 - valid_fraction)))
    return dataset.subset(slice(0, n_train)), dataset.subset(slice(n_train, None))


# -- kernel-prior features -------------------------------------------------------------


def load_feature_vectors(path) -> np.ndarray:
    """Token feature table [vocab, dim] from the textual ``dim vocab`` format."""
    with open(path) as fh:
        head = fh.readline().split()
        if len(head) != 2:
            raise DataFormatError(f"{path}: header must be 'dim vocab'")
        dim, vocab = int(head[0]), int(head[1])
        rows = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            values = line.split()
            if len(values) != dim:
                raise DataFormatError(f"{path}:{lineno}: expected {dim} values, got {len(values)}")
            rows.append([float(v) for v in values])
    if len(rows) != vocab:
        raise DataFormatError(f"{path}: header promises {vocab} rows, found {len(rows)}")
    return np.array(rows, dtype=np.float64).reshape(vocab, dim)


def write_feature_vectors(path, table: np.ndarray) -> None:
    table = np.asarray(table, dtype=np.float64)
    with open(path, "w") as fh:
        fh.write(f"{table.shape[1]} {table.shape[0]}\n")
        for row in table:
            fh.write(" ".join(repr(float(v)) for v in row) + "\n")


# -- batching ---------------------------------------------------------------------------


@dataclass
class Batch:
    """One padded minibatch, time-major.

    ``inputs`` is [T, B] token ids or [T, B, D] features, ``mask`` [T, B]
    marks valid steps, ``targets`` is [B] class ids (sequence labels) or a
    per-step array [T, B, ...].
    """

    inputs: np.ndarray
    mask: np.ndarray
    targets: np.ndarray
    lengths: np.ndarray
    index: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    @property
    def size(self) -> int:
        return self.mask.shape[1]


@dataclass
class TaggingDataset:
    """Per-step classification: feature sequences with one label per step."""

    inputs: list[np.ndarray]  # each [T_n, D]
    labels: list[np.ndarray]  # each [T_n]
    classes: int
    regimes: list[np.ndarray] | None = None

    def __len__(self) -> int:
        return len(self.inputs)


def _examples(dataset):
    """Uniform view: list of (input array [T, ...], target) pairs and a kind tag."""
    if isinstance(dataset, ClassificationDataset):
        return [(np.asarray(r.tokens, dtype=np.int64), r.label) for r in dataset.records], "tokens"
    if isinstance(dataset, PixelDataset):
        return [(img[:, None], lab) for img, lab in zip(dataset.images, dataset.labels)], "label"
    if isinstance(dataset, TaggingDataset):
        return list(zip(dataset.inputs, dataset.labels)), "steps"
    if isinstance(dataset, list) and (not dataset or isinstance(dataset[0], PianoRoll)):
        return [r.next_step_pair() for r in dataset], "steps"
    raise UsageError(f"cannot batch a {type(dataset).__name__}")


def collate(pairs, kind: str) -> Batch:
    lengths = np.array([len(x) for x, _ in pairs], dtype=np.int64)
    T, B = int(lengths.max()), len(pairs)
    first = pairs[0][0]
    inputs = np.zeros((T, B) + first.shape[1:], dtype=first.dtype)
    mask = np.zeros((T, B))
    for b, (x, _) in enumerate(pairs):
        inputs[: len(x), b] = x
        mask[: len(x), b] = 1.0
    if kind == "steps":
        y0 = np.asarray(pairs[0][1])
        targets = np.zeros((T, B) + y0.shape[1:], dtype=y0.dtype)
        for b, (_, y) in enumerate(pairs):
            targets[: len(y), b] = y
    else:
        targets = np.array([y for _, y in pairs], dtype=np.int64)
    return Batch(inputs, mask, targets, lengths)


def batch(dataset, batch_size: int, seed: int | None = None, epoch: int = 0) -> Iterator[Batch]:
    """Padded minibatches; shuffled by ``RngStream(seed).spawn(epoch)`` when seeded."""
    if batch_size < 1:
        raise UsageError("batch_size must be >= 1")
    pairs, kind = _examples(dataset)
    order = np.arange(len(pairs)) if seed is None else RngStream(seed).spawn(epoch).permutation(len(pairs))
    for start in range(0, len(order), batch_size):
        idx = order[start : start + batch_size]
        out = collate([pairs[i] for i in idx], kind)
        out.index = idx
        yield out


def cap(dataset, limit: int | None):
    """Keep the first ``limit`` examples (desk-scale cap); ``None`` keeps all."""
    if limit is None or limit >= len(dataset):
        return dataset
    if isinstance(dataset, ClassificationDataset):
        return ClassificationDataset(dataset.records[:limit], dataset.vocab, dataset.classes, dataset.rejected)
    if isinstance(dataset, PixelDataset):
        return dataset.subset(slice(0, limit))
    if isinstance(dataset, TaggingDataset):
        regimes = dataset.regimes[:limit] if dataset.regimes is not None else None
        return TaggingDataset(dataset.inputs[:limit], dataset.labels[:limit], dataset.classes, regimes)
    return dataset[:limit]


# -- synthetic tasks -----------------------------------------------------------------


def two_regime_task(n: int, length: int, seed: int, switch_prob: float = 0.3) -> TaggingDataset:
    """Latch task with two regimes.

    Each step shows a random bit and a regime flag.  In the *overwrite*
    regime the target is the current bit; in the *copy* regime the target is
    the previous target, so the network must hold its memory.  The first
    step is always an overwrite.  Features are one-hot: [bit=0, bit=1,
    copy, overwrite].
    """
    if n < 1 or length < 1:
        raise UsageError("two_regime_task needs n >= 1 and length >= 1")
    rng = RngStream(seed)
    inputs, labels, regimes = [], [], []
    for k in range(n):
        stream = rng.spawn(k)
        bits = (stream.uniform(length) < 0.5).astype(np.int64)
        copy = stream.uniform(length) < switch_prob
        copy[0] = False
        y = np.empty(length, dtype=np.int64)
        for t in range(length):
            y[t] = y[t - 1] if copy[t] else bits[t]
        x = np.zeros((length, 4))
        x[np.arange(length), bits] = 1.0
        x[np.arange(length), 2 + (~copy).astype(np.int64)] = 1.0
        inputs.append(x)
        labels.append(y)
        regimes.append(np.where(copy, 0, 1))
    return TaggingDataset(inputs, labels, 2, regimes)


_MAJOR = (0, 4, 7)
_MINOR = (0, 3, 7)
# scale degree roots and qualities of a major key
_DEGREES = ((0, _MAJOR), (2, _MINOR), (4, _MINOR), (5, _MAJOR), (7, _MAJOR), (9, _MINOR))
_CADENCE = (0, 3, 4, 0)


def synthetic_chorales(n: int, seed: int, min_chords: int = 8, max_chords: int = 16) -> list[PianoRoll]:
    """Four-voice chorale-like piano rolls.

    Each piece is a chord progression in a random key: chords are held for
    1-4 frames, voiced bass plus three upper voices, and every piece ends on
    a cadence back to the tonic.  The structure (held chords, triads, tonal
    centre) gives a next-step model a lot to learn relative to chance.
    """
    rng = RngStream(seed)
    rolls = []
    for k in range(n):
        stream = rng.spawn(k)
        key = 36 + int(stream.uniform() * 12)
        count = min_chords + int(stream.uniform() * (max_chords - min_chords + 1))
        degrees = [int(stream.uniform() * len(_DEGREES)) for _ in range(count - len(_CADENCE))]
        degrees += list(_CADENCE)
        steps = []
        for d in degrees:
            root, quality = _DEGREES[d]
            base = key + root
            bass = base - 12 if base - 12 >= 21 else base
            voices = {bass, base + 12 + quality[0], base + 12 + quality[1], base + 12 + quality[2]}
            notes = sorted(v - 21 for v in voices if 21 <= v < 21 + NUM_NOTES)
            for _ in range(1 + int(stream.uniform() * 4)):
                steps.append(list(notes))
        rolls.append(PianoRoll(steps))
    return rolls
