"""Loaders, file formats, synthetic tasks, splits."""

import importlib.resources
import struct

import numpy as np
import pytest

from bmru import data
from bmru.data import (
    FormatError,
    array_digest,
    balanced_kws_split,
    load_idx,
    load_idx_pair,
    make_kws_demo_task,
    make_permutation,
    make_synthetic_task,
    pixel_sequences,
    read_fseq,
    synthetic_templates,
    task_from_fseq,
    write_fseq,
)


def craft_idx_images(images: np.ndarray) -> bytes:
    n, r, c = images.shape
    return struct.pack(">IIII", 0x803, n, r, c) + images.astype(np.uint8).tobytes()


def craft_idx_labels(labels: np.ndarray) -> bytes:
    return struct.pack(">II", 0x801, len(labels)) + bytes(labels.tolist())


class TestIdx:
    def test_two_image_fixture_roundtrip(self, tmp_path):
        rng = np.random.default_rng(0)
        images = rng.integers(0, 256, size=(2, 4, 3), dtype=np.uint8)
        labels = np.array([7, 1], dtype=np.uint8)
        (tmp_path / "img").write_bytes(craft_idx_images(images))
        (tmp_path / "lab").write_bytes(craft_idx_labels(labels))
        got_images, got_labels = load_idx_pair(tmp_path / "img", tmp_path / "lab")
        assert np.array_equal(got_images, images)
        assert np.array_equal(got_labels, labels)

    def test_wrong_magic_names_expected_and_found(self, tmp_path):
        path = tmp_path / "bad"
        path.write_bytes(struct.pack(">I", 0xDEADBEEF) + b"\x00" * 16)
        with pytest.raises(FormatError) as err:
            load_idx(path)
        message = str(err.value)
        assert "0x00000803" in message and "0x00000801" in message
        assert "0xdeadbeef" in message
        assert "offset 0" in message

    def test_count_mismatch(self, tmp_path):
        images = np.zeros((2, 2, 2), dtype=np.uint8)
        labels = np.zeros(3, dtype=np.uint8)
        (tmp_path / "img").write_bytes(craft_idx_images(images))
        (tmp_path / "lab").write_bytes(craft_idx_labels(labels))
        with pytest.raises(FormatError, match="mismatch"):
            load_idx_pair(tmp_path / "img", tmp_path / "lab")

    def test_truncation_reports_offset(self, tmp_path):
        images = np.zeros((2, 2, 2), dtype=np.uint8)
        blob = craft_idx_images(images)
        (tmp_path / "img").write_bytes(blob[:-3])
        with pytest.raises(FormatError, match="offset 16"):
            load_idx(tmp_path / "img")

    def test_gzip_transparent(self, tmp_path):
        import gzip

        images = np.arange(8, dtype=np.uint8).reshape(2, 2, 2)
        with gzip.open(tmp_path / "img.gz", "wb") as f:
            f.write(craft_idx_images(images))
        assert np.array_equal(load_idx(tmp_path / "img.gz"), images)


class TestPermutation:
    def test_bijection(self):
        perm = make_permutation(3)
        assert np.array_equal(np.sort(perm), np.arange(784))

    def test_seeded_stability(self):
        assert np.array_equal(make_permutation(5), make_permutation(5))

    def test_different_seeds_differ(self):
        assert not np.array_equal(make_permutation(1), make_permutation(2))


class TestPixelSequences:
    def test_normalization_endpoints(self):
        images = np.array([[[0, 255], [128, 3]]], dtype=np.uint8)
        seq = pixel_sequences(images, "raster-784")
        assert seq.max() == 1.0
        assert seq.min() == 0.0
        assert seq[0, 1, 0] == 1.0

    def test_modes_shapes(self):
        images = np.zeros((5, 28, 28), dtype=np.uint8)
        assert pixel_sequences(images, "raster-784").shape == (5, 784, 1)
        assert pixel_sequences(images, "row-28").shape == (5, 28, 28)
        perm = make_permutation(0)
        assert pixel_sequences(images, "permuted", perm).shape == (5, 784, 1)

    def test_permutation_is_applied(self):
        images = np.arange(4, dtype=np.uint8).reshape(1, 2, 2)
        perm = np.array([2, 0, 3, 1])
        seq = pixel_sequences(images, "permuted", perm)
        assert np.array_equal(seq[0, :, 0] * 255, perm)


class TestFseq:
    def test_writer_reader_identity_on_payload_bits(self, tmp_path):
        rng = np.random.default_rng(1)
        feats = rng.standard_normal((3, 5, 2)).astype(np.float32)
        labels = np.array([0, 2, 1])
        path = tmp_path / "t.fseq"
        write_fseq(path, feats, labels, 3)
        got, got_labels, n_classes = read_fseq(path)
        assert got.tobytes() == feats.tobytes()
        assert np.array_equal(got_labels, labels)
        assert n_classes == 3

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.fseq"
        path.write_bytes(b"NOPE" + b"\x00" * 20)
        with pytest.raises(FormatError, match="magic"):
            read_fseq(path)

    def test_truncated_payload(self, tmp_path):
        rng = np.random.default_rng(2)
        path = tmp_path / "t.fseq"
        write_fseq(path, rng.standard_normal((2, 4, 3)).astype(np.float32), [0, 1], 2)
        blob = path.read_bytes()
        path.write_bytes(blob[:-5])
        with pytest.raises(FormatError, match="truncated"):
            read_fseq(path)

    def test_trailing_bytes_rejected(self, tmp_path):
        path = tmp_path / "t.fseq"
        write_fseq(path, np.zeros((1, 2, 2), dtype=np.float32), [0], 1)
        path.write_bytes(path.read_bytes() + b"x")
        with pytest.raises(FormatError, match="trailing"):
            read_fseq(path)

    def test_label_range_validated(self, tmp_path):
        with pytest.raises(ValueError):
            write_fseq(tmp_path / "t.fseq", np.zeros((1, 2, 2)), [5], 2)

    def test_bundled_fixture_bytes_pinned(self):
        # regenerating from the seed must reproduce the committed file
        ref = importlib.resources.files("bmru") / "fixtures" / "kws_demo.fseq"
        feats, labels, n_classes = read_fseq(str(ref))
        gen_feats, gen_labels = data.kws_demo_eval_arrays()
        assert n_classes == 2
        assert np.array_equal(feats, gen_feats.astype(np.float32))
        assert np.array_equal(labels, gen_labels)


class TestBalancedSplit:
    def setup_method(self):
        rng = np.random.default_rng(3)
        self.features = rng.standard_normal((50, 4, 2))
        self.labels = np.array([1] * 10 + [0] * 25 + [2] * 15)

    def test_counts_equal(self):
        x, y = balanced_kws_split(self.features, self.labels, 1, seed=0)
        assert (y == 1).sum() == (y == 0).sum() == 10
        assert x.shape[0] == 20

    def test_no_duplicate_negatives(self):
        rng = np.random.default_rng(4)
        feats = rng.standard_normal((30, 2, 2))
        labels = np.array([1] * 14 + [0] * 16)
        x, _ = balanced_kws_split(feats, labels, 1, seed=1)
        neg_rows = x[14:]
        assert len({row.tobytes() for row in neg_rows}) == 14

    def test_seeded_reproducibility(self):
        x1, y1 = balanced_kws_split(self.features, self.labels, 1, seed=9)
        x2, y2 = balanced_kws_split(self.features, self.labels, 1, seed=9)
        assert np.array_equal(x1, x2) and np.array_equal(y1, y2)

    def test_insufficient_negatives(self):
        labels = np.ones(5, dtype=int)
        with pytest.raises(ValueError, match="insufficient"):
            balanced_kws_split(self.features[:5], labels, 1, seed=0)

    def test_missing_class(self):
        with pytest.raises(ValueError, match="no samples"):
            balanced_kws_split(self.features, self.labels, 7, seed=0)


class TestSyntheticTasks:
    def test_templates_distinct(self):
        t = synthetic_templates()
        flat = t.reshape(t.shape[0], -1)
        for i in range(len(flat)):
            for j in range(i + 1, len(flat)):
                assert not np.array_equal(flat[i], flat[j])

    def test_bayes_optimal_at_zero_noise(self):
        task = make_synthetic_task(seed=5, n_train=64, n_val=64, n_test=256, noise=0.0)
        templates = synthetic_templates().reshape(4, -1)
        x = task.x_test.reshape(task.x_test.shape[0], -1)
        dists = ((x[:, None, :] - templates[None]) ** 2).sum(axis=2)
        pred = dists.argmin(axis=1)
        assert np.array_equal(pred, task.y_test)

    def test_nearest_template_strong_at_default_noise(self):
        task = make_synthetic_task(seed=6, n_train=64, n_val=64, n_test=512)
        templates = synthetic_templates().reshape(4, -1)
        x = task.x_test.reshape(task.x_test.shape[0], -1)
        pred = ((x[:, None, :] - templates[None]) ** 2).sum(axis=2).argmin(axis=1)
        assert (pred == task.y_test).mean() == 1.0

    def test_loader_purity_hash_stable(self):
        a = make_synthetic_task(seed=7, n_train=32, n_val=8, n_test=8)
        b = make_synthetic_task(seed=7, n_train=32, n_val=8, n_test=8)
        assert array_digest(a.x_train, a.y_train) == array_digest(b.x_train, b.y_train)

    def test_kws_demo_shapes_and_balance(self):
        task = make_kws_demo_task(seed=8, n_train=128, n_val=64, n_test=64)
        assert task.x_train.shape == (128, 101, 13)
        assert task.n_classes == 2
        frac = task.y_train.mean()
        assert 0.3 < frac < 0.7

    def test_task_from_fseq_splits(self, tmp_path):
        rng = np.random.default_rng(9)
        path = tmp_path / "t.fseq"
        write_fseq(path, rng.standard_normal((100, 4, 2)).astype(np.float32),
                   rng.integers(0, 3, 100), 3)
        task = task_from_fseq(path, seed=0)
        assert task.x_train.shape[0] == 80
        assert task.x_val.shape[0] == 10
        assert task.x_test.shape[0] == 10
        assert task.n_classes == 3

    def test_train_batches_deterministic(self):
        task = make_synthetic_task(seed=10, n_train=64, n_val=16, n_test=16)
        xa, ya = task.train_batch(8, np.random.default_rng(1))
        xb, yb = task.train_batch(8, np.random.default_rng(1))
        assert np.array_equal(xa, xb) and np.array_equal(ya, yb)


class TestDataDir:
    def test_flag_wins_over_env(self, monkeypatch):
        monkeypatch.setenv(data.DATA_DIR_ENV, "/from/env")
        assert data.resolve_data_dir("/from/flag") == "/from/flag"
        assert data.resolve_data_dir(None) == "/from/env"
        monkeypatch.delenv(data.DATA_DIR_ENV)
        assert data.resolve_data_dir(None) is None
