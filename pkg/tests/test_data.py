"""Dataset loaders, writers, batching and synthetic generators."""

import gzip
import json
import struct

import numpy as np
import pytest

from bblstm import data as D
from bblstm.errors import DataFormatError, UsageError


def write_lines(path, objs):
    path.write_text("".join(json.dumps(o) + "\n" for o in objs))
    return path


def mnist_files(tmp_path, images, labels, gz=False):
    suffix = ".gz" if gz else ""
    D.write_idx(tmp_path / f"img{suffix}", images.astype(np.uint8))
    lab = tmp_path / f"lab{suffix}"
    raw = struct.pack(">II", D.IDX_LABELS_MAGIC, len(labels)) + labels.astype(np.uint8).tobytes()
    (gzip.open if gz else open)(lab, "wb").write(raw)
    return tmp_path / f"img{suffix}", lab


class TestClassificationJSONL:
    def test_two_lines(self, tmp_path):
        path = write_lines(tmp_path / "a.jsonl", [{"tokens": [1, 2], "label": 0}, {"tokens": [4], "label": 2}])
        ds = D.load_jsonl_classification(path)
        assert len(ds) == 2 and ds.vocab == 5 and ds.classes == 3 and ds.rejected == 0

    def test_empty_tokens_rejected(self, tmp_path):
        path = write_lines(tmp_path / "a.jsonl", [{"tokens": [], "label": 0}, {"tokens": [1], "label": 1}])
        ds = D.load_jsonl_classification(path)
        assert len(ds) == 1 and ds.rejected == 1

    def test_round_trip(self, tmp_path):
        ds = D.ClassificationDataset([D.LabeledSequence([3, 1, 4], 1), D.LabeledSequence([5], 0)], 10, 4)
        D.write_jsonl_classification(tmp_path / "x.jsonl", ds)
        again = D.load_jsonl_classification(tmp_path / "x.jsonl")
        assert again == ds

    def test_header_sets_sizes(self, tmp_path):
        path = write_lines(tmp_path / "a.jsonl", [{"vocab": 100, "classes": 5}, {"tokens": [1], "label": 0}])
        ds = D.load_jsonl_classification(path)
        assert (ds.vocab, ds.classes) == (100, 5)

    def test_header_too_small(self, tmp_path):
        path = write_lines(tmp_path / "a.jsonl", [{"vocab": 2, "classes": 5}, {"tokens": [7], "label": 0}])
        with pytest.raises(DataFormatError):
            D.load_jsonl_classification(path)

    def test_malformed_line_reports_number(self, tmp_path):
        path = tmp_path / "a.jsonl"
        path.write_text('{"tokens": [1], "label": 0}\n{"tokens": [1], "label": \n')
        with pytest.raises(DataFormatError, match=":2:"):
            D.load_jsonl_classification(path)

    @pytest.mark.parametrize("obj", [{"tokens": [1, -2], "label": 0}, {"tokens": [1], "label": "x"},
                                     {"tokens": "ab", "label": 0}, {"tokens": [1], "label": True}])
    def test_bad_fields(self, tmp_path, obj):
        with pytest.raises(DataFormatError):
            D.load_jsonl_classification(write_lines(tmp_path / "a.jsonl", [obj]))


class TestPianoRoll:
    def test_single_sequence(self, tmp_path):
        (tmp_path / "p.json").write_text("[[[60], [60, 64]]]")
        rolls = D.load_pianoroll_json(tmp_path / "p.json")
        assert len(rolls) == 1 and len(rolls[0].steps) == 2

    def test_note_out_of_range(self, tmp_path):
        (tmp_path / "p.json").write_text("[[[60], [88]]]")
        with pytest.raises(DataFormatError, match="sequence 0 step 1"):
            D.load_pianoroll_json(tmp_path / "p.json")

    def test_too_short(self, tmp_path):
        (tmp_path / "p.json").write_text("[[[60]]]")
        with pytest.raises(DataFormatError):
            D.load_pianoroll_json(tmp_path / "p.json")

    def test_next_step_targets(self):
        roll = D.PianoRoll([[0], [1, 2], [3]])
        x, y = roll.next_step_pair()
        np.testing.assert_array_equal(x, roll.to_array()[:2])
        np.testing.assert_array_equal(y, roll.to_array()[1:])
        assert x.shape == (2, 88)

    def test_splits_round_trip(self, tmp_path):
        splits = {"train": [D.PianoRoll([[1], [2]])], "test": [D.PianoRoll([[3, 4], [], [5]])]}
        D.write_pianoroll_splits(tmp_path / "s.json", splits)
        again = D.load_pianoroll_splits(tmp_path / "s.json")
        assert {k: [r.steps for r in v] for k, v in again.items()} == {k: [r.steps for r in v] for k, v in splits.items()}

    def test_split_file_needs_split_loader(self, tmp_path):
        (tmp_path / "s.json").write_text('{"train": [[[1], [2]]]}')
        with pytest.raises(DataFormatError):
            D.load_pianoroll_json(tmp_path / "s.json")


class TestMnist:
    @pytest.mark.parametrize("gz", [False, True])
    def test_sequential_is_row_major(self, tmp_path, gz):
        images = np.arange(2 * 784).reshape(2, 28, 28) % 256
        img, lab = mnist_files(tmp_path, images, np.array([3, 7]), gz)
        ds = D.load_mnist_idx(img, lab, "smnist", permutation_seed=123)
        np.testing.assert_allclose(ds.images, images.reshape(2, 784) / 255.0)
        np.testing.assert_array_equal(ds.labels, [3, 7])
        assert ds.permutation is None

    def test_zero_image(self, tmp_path):
        img, lab = mnist_files(tmp_path, np.zeros((1, 28, 28)), np.array([0]))
        np.testing.assert_array_equal(D.load_mnist_idx(img, lab).images[0], np.zeros(784))

    def test_permuted_uses_one_fixed_order(self, tmp_path):
        images = np.random.default_rng(0).integers(0, 256, (3, 28, 28))
        img, lab = mnist_files(tmp_path, images, np.array([0, 1, 2]))
        a = D.load_mnist_idx(img, lab, "pmnist", 5)
        b = D.load_mnist_idx(img, lab, "pmnist", 5)
        np.testing.assert_array_equal(a.permutation, b.permutation)
        np.testing.assert_array_equal(a.images, images.reshape(3, 784)[:, a.permutation] / 255.0)
        assert not np.array_equal(a.permutation, D.load_mnist_idx(img, lab, "pmnist", 6).permutation)

    def test_bad_magic(self, tmp_path):
        img, lab = mnist_files(tmp_path, np.zeros((1, 28, 28)), np.array([0]))
        with pytest.raises(DataFormatError, match="magic"):
            D.load_mnist_idx(lab, img)

    def test_truncated_payload(self, tmp_path):
        img, lab = mnist_files(tmp_path, np.zeros((2, 28, 28)), np.array([0, 1]))
        img.write_bytes(img.read_bytes()[:-10])
        with pytest.raises(DataFormatError):
            D.load_mnist_idx(img, lab)

    def test_label_count_mismatch(self, tmp_path):
        img, lab = mnist_files(tmp_path, np.zeros((2, 28, 28)), np.array([0, 1, 1]))
        with pytest.raises(DataFormatError):
            D.load_mnist_idx(img, lab)

    def test_unknown_variant(self, tmp_path):
        img, lab = mnist_files(tmp_path, np.zeros((1, 28, 28)), np.array([0]))
        with pytest.raises(UsageError):
            D.load_mnist_idx(img, lab, "cmnist")

    def test_split_keeps_order(self):
        ds = D.PixelDataset(np.zeros((12, 784)), np.arange(12))
        train, valid = D.split_train_valid(ds)
        np.testing.assert_array_equal(train.labels, np.arange(10))
        np.testing.assert_array_equal(valid.labels, [10, 11])


class TestFeatureVectors:
    def test_round_trip(self, tmp_path, rng):
        table = rng.normal(size=(5, 3))
        D.write_feature_vectors(tmp_path / "f.txt", table)
        np.testing.assert_array_equal(D.load_feature_vectors(tmp_path / "f.txt"), table)

    def test_row_count_checked(self, tmp_path):
        (tmp_path / "f.txt").write_text("2 3\n1 2\n3 4\n")
        with pytest.raises(DataFormatError):
            D.load_feature_vectors(tmp_path / "f.txt")

    def test_row_width_checked(self, tmp_path):
        (tmp_path / "f.txt").write_text("2 1\n1 2 3\n")
        with pytest.raises(DataFormatError, match=":2:"):
            D.load_feature_vectors(tmp_path / "f.txt")


class TestBatching:
    def dataset(self, lengths):
        return D.ClassificationDataset([D.LabeledSequence(list(range(1, n + 1)), n % 2) for n in lengths], 10, 2)

    def test_padding_and_mask(self):
        (b,) = list(D.batch(self.dataset([3, 5]), 2))
        assert b.inputs.shape == (5, 2)
        np.testing.assert_array_equal(b.mask.sum(axis=0), [3, 5])
        np.testing.assert_array_equal(b.inputs[3:, 0], 0)
        np.testing.assert_array_equal(b.targets, [1, 1])

    def test_batch_size_one_has_no_padding(self):
        for b in D.batch(self.dataset([3, 5, 2]), 1):
            assert b.mask.all()

    def test_seeded_order_is_deterministic(self):
        ds = self.dataset(range(1, 30))
        a = [b.index.tolist() for b in D.batch(ds, 4, seed=3, epoch=2)]
        b = [b.index.tolist() for b in D.batch(ds, 4, seed=3, epoch=2)]
        c = [b.index.tolist() for b in D.batch(ds, 4, seed=3, epoch=3)]
        assert a == b and a != c
        assert sorted(sum(a, [])) == list(range(29))

    def test_unseeded_keeps_order(self):
        idx = [b.index.tolist() for b in D.batch(self.dataset([1, 2, 3]), 2)]
        assert idx == [[0, 1], [2]]

    def test_piano_roll_targets_padded(self):
        rolls = [D.PianoRoll([[0], [1], [2]]), D.PianoRoll([[3], [4]])]
        (b,) = list(D.batch(rolls, 2))
        assert b.inputs.shape == (2, 2, 88) and b.targets.shape == (2, 2, 88)
        np.testing.assert_array_equal(b.mask, [[1, 1], [1, 0]])
        assert b.targets[0, 1, 4] == 1 and b.targets[1, 1].sum() == 0

    def test_bad_batch_size(self):
        with pytest.raises(UsageError):
            next(D.batch(self.dataset([1]), 0))

    def test_unbatchable(self):
        with pytest.raises(UsageError):
            next(D.batch({"x": 1}, 2))

    def test_cap(self):
        ds = self.dataset([1, 2, 3, 4])
        assert len(D.cap(ds, 2)) == 2 and D.cap(ds, None) is ds


class TestSynthetic:
    def test_two_regime_targets_follow_rule(self):
        ds = D.two_regime_task(20, 15, seed=4)
        for x, y, r in zip(ds.inputs, ds.labels, ds.regimes):
            bits = x[:, 1].astype(int)
            assert r[0] == 1
            for t in range(15):
                want = bits[t] if r[t] == 1 else y[t - 1]
                assert y[t] == want
            np.testing.assert_array_equal(x.sum(axis=1), 2)

    def test_two_regime_deterministic(self):
        a, b = D.two_regime_task(3, 10, 7), D.two_regime_task(3, 10, 7)
        assert all(np.array_equal(x, y) for x, y in zip(a.inputs, b.inputs))

    def test_chorales_are_valid_rolls(self):
        rolls = D.synthetic_chorales(10, seed=1)
        assert len(rolls) == 10
        for r in rolls:
            assert len(r.steps) >= 8
            assert all(1 <= len(s) <= 4 and all(0 <= n < 88 for n in s) for s in r.steps)
