"""Dataset ingestion and task construction.

Supported sources: classic IDX image/label files (pixel-sequence tasks),
FSEQ feature-sequence containers (precomputed MFCC-style features), and
two built-in synthetic generators used as desk-scale stand-ins — a short
4-class temporal-pattern task and a 101-frame binary keyword-style task.
Loaders are pure functions of (bytes, seed).
"""

from __future__ import annotations

import gzip
import hashlib
import os
import struct
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "FormatError",
    "load_idx",
    "load_idx_pair",
    "make_permutation",
    "pixel_sequences",
    "write_fseq",
    "read_fseq",
    "balanced_kws_split",
    "TaskData",
    "make_synthetic_task",
    "make_kws_demo_task",
    "synthetic_templates",
    "kws_demo_eval_arrays",
    "task_from_fseq",
    "load_mnist_task",
    "resolve_data_dir",
    "array_digest",
]

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
FSEQ_MAGIC = b"FSEQ"
DATA_DIR_ENV = "BMRU_DATA_DIR"


class FormatError(ValueError):
    """Malformed input file; message carries the failing byte offset."""


def _open_binary(path):
    if str(path).endswith(".gz"):
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_exact(f, n: int, offset: int, what: str) -> bytes:
    buf = f.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated file at byte offset {offset}: expected {n} bytes of {what}")
    return buf


def load_idx(path) -> np.ndarray:
    """Decode one IDX file (images u8 NxRxC, or labels u8 N)."""
    with _open_binary(path) as f:
        magic = struct.unpack(">I", _read_exact(f, 4, 0, "magic"))[0]
        if magic == IDX_IMAGES_MAGIC:
            n, rows, cols = struct.unpack(">III", _read_exact(f, 12, 4, "image header"))
            payload = _read_exact(f, n * rows * cols, 16, "pixel data")
            return np.frombuffer(payload, dtype=np.uint8).reshape(n, rows, cols).copy()
        if magic == IDX_LABELS_MAGIC:
            n = struct.unpack(">I", _read_exact(f, 4, 4, "label header"))[0]
            payload = _read_exact(f, n, 8, "label data")
            return np.frombuffer(payload, dtype=np.uint8).copy()
        raise FormatError(
            f"bad magic at byte offset 0: expected 0x{IDX_IMAGES_MAGIC:08x} (images) "
            f"or 0x{IDX_LABELS_MAGIC:08x} (labels), found 0x{magic:08x}")


def load_idx_pair(image_path, label_path) -> tuple[np.ndarray, np.ndarray]:
    images = load_idx(image_path)
    labels = load_idx(label_path)
    if images.ndim != 3:
        raise FormatError(f"{image_path} does not contain image records")
    if labels.ndim != 1:
        raise FormatError(f"{label_path} does not contain label records")
    if images.shape[0] != labels.shape[0]:
        raise FormatError(
            f"image/label count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    return images, labels


def make_permutation(seed: int, size: int = 784) -> np.ndarray:
    """Fixed pixel permutation; identical across samples for a given seed."""
    return np.random.default_rng(seed).permutation(size)


def pixel_sequences(images: np.ndarray, mode: str = "row-28",
                    permutation: np.ndarray | None = None) -> np.ndarray:
    """u8 images -> float sequences in [0, 1]; 255 maps to exactly 1.0."""
    x = images.astype(np.float64) / 255.0
    n = x.shape[0]
    flat = x.reshape(n, -1)
    if mode == "raster-784":
        seq = flat[:, :, None]
    elif mode == "row-28":
        seq = x.reshape(n, images.shape[1], images.shape[2])
    elif mode == "permuted":
        if permutation is None:
            raise ValueError("permuted mode needs a permutation")
        seq = flat[:, permutation][:, :, None]
    else:
        raise ValueError(f"unknown pixel sequence mode {mode!r}")
    return seq


# ---------------------------------------------------------------------------
# FSEQ container: header + little-endian f32 payload per record
# ---------------------------------------------------------------------------

_FSEQ_HEADER = struct.Struct("<4sIIIII")  # magic, version, count, T, D, n_classes


def write_fseq(path, features, labels, n_classes: int) -> None:
    feats = np.asarray(features, dtype=np.float32)
    labs = np.asarray(labels, dtype=np.int64)
    if feats.ndim != 3:
        raise ValueError("features must have shape (records, T, D)")
    if not np.all(np.isfinite(feats)):
        raise ValueError("features must be finite")
    count, t_len, dim = feats.shape
    if labs.shape != (count,):
        raise ValueError("one label per record required")
    if labs.min(initial=0) < 0 or (count and labs.max() >= n_classes):
        raise ValueError("labels outside class range")
    with open(path, "wb") as f:
        f.write(_FSEQ_HEADER.pack(FSEQ_MAGIC, 1, count, t_len, dim, n_classes))
        for i in range(count):
            f.write(struct.pack("<I", int(labs[i])))
            f.write(feats[i].astype("<f4").tobytes())


def read_fseq(path) -> tuple[np.ndarray, np.ndarray, int]:
    with open(path, "rb") as f:
        raw = _read_exact(f, _FSEQ_HEADER.size, 0, "header")
        magic, version, count, t_len, dim, n_classes = _FSEQ_HEADER.unpack(raw)
        if magic != FSEQ_MAGIC:
            raise FormatError(f"bad magic at byte offset 0: expected {FSEQ_MAGIC!r}, found {magic!r}")
        if version != 1:
            raise FormatError(f"unsupported FSEQ version {version}")
        feats = np.empty((count, t_len, dim), dtype=np.float32)
        labels = np.empty(count, dtype=np.int64)
        offset = _FSEQ_HEADER.size
        rec_bytes = t_len * dim * 4
        for i in range(count):
            labels[i] = struct.unpack("<I", _read_exact(f, 4, offset, "label"))[0]
            offset += 4
            payload = _read_exact(f, rec_bytes, offset, "payload")
            offset += rec_bytes
            feats[i] = np.frombuffer(payload, dtype="<f4").reshape(t_len, dim)
        trailing = f.read(1)
        if trailing:
            raise FormatError(f"unexpected trailing bytes at offset {offset}")
    if not np.all(np.isfinite(feats)):
        raise FormatError("non-finite feature values in payload")
    if count and labels.max() >= n_classes:
        raise FormatError("label exceeds declared class count")
    return feats, labels, n_classes


def balanced_kws_split(features: np.ndarray, labels: np.ndarray, target_class: int,
                       seed: int) -> tuple[np.ndarray, np.ndarray]:
    """All target-class records paired with equally many sampled negatives.

    Returns (features, binary labels) with 1 = target class; negatives are
    drawn without replacement.
    """
    labels = np.asarray(labels)
    pos_idx = np.flatnonzero(labels == target_class)
    neg_idx = np.flatnonzero(labels != target_class)
    if pos_idx.size == 0:
        raise ValueError(f"dataset has no samples of class {target_class}")
    if neg_idx.size < pos_idx.size:
        raise ValueError(
            f"insufficient negatives: need {pos_idx.size}, have {neg_idx.size}")
    rng = np.random.default_rng(seed)
    chosen = rng.choice(neg_idx, size=pos_idx.size, replace=False)
    idx = np.concatenate([pos_idx, chosen])
    y = np.concatenate([np.ones(pos_idx.size, dtype=np.int64),
                        np.zeros(chosen.size, dtype=np.int64)])
    return np.asarray(features)[idx], y


# ---------------------------------------------------------------------------
# tasks
# ---------------------------------------------------------------------------


@dataclass
class TaskData:
    """Train/val/test arrays plus deterministic batch iteration."""

    x_train: np.ndarray
    y_train: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray
    n_classes: int
    name: str = "task"

    @property
    def t_len(self) -> int:
        return self.x_train.shape[1]

    @property
    def d_in(self) -> int:
        return self.x_train.shape[2]

    def train_batch(self, batch: int, rng: np.random.Generator):
        idx = rng.integers(0, self.x_train.shape[0], size=batch)
        return self.x_train[idx], self.y_train[idx]

    def val_batches(self, batch: int, count: int, seed: int):
        rng = np.random.default_rng(seed)
        out = []
        for _ in range(count):
            idx = rng.integers(0, self.x_val.shape[0], size=batch)
            out.append((self.x_val[idx], self.y_val[idx]))
        return out


SYNTH_T = 32
SYNTH_D = 3
SYNTH_CLASSES = 2


# each class fires a distinct channel subset during one early window, so
# a latch-style readout can separate classes after the pulses end
_SYNTH_CLASS_CHANNELS = ((0,), (1,), (2,), (0, 1))
_SYNTH_ONSET = 4
_SYNTH_WIDTH = 6


def synthetic_templates(t_len: int = SYNTH_T, d_in: int = SYNTH_D,
                        n_classes: int = SYNTH_CLASSES) -> np.ndarray:
    """Class-defining pulse templates; distinct by which channels fire."""
    templates = np.zeros((n_classes, t_len, d_in))
    for c in range(n_classes):
        for channel in _SYNTH_CLASS_CHANNELS[c]:
            templates[c, _SYNTH_ONSET : _SYNTH_ONSET + _SYNTH_WIDTH, channel] = 1.0
    return templates


def _synth_samples(n: int, rng: np.random.Generator, noise: float,
                   templates: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    n_classes = templates.shape[0]
    y = rng.integers(0, n_classes, size=n)
    x = templates[y] + noise * rng.standard_normal((n,) + templates.shape[1:])
    return x, y


def make_synthetic_task(seed: int = 0, n_train: int = 2048, n_val: int = 512,
                        n_test: int = 512, noise: float = 0.1) -> TaskData:
    """Fast 4-class temporal task; class identity must be latched early."""
    templates = synthetic_templates()
    rng = np.random.default_rng(seed)
    x_tr, y_tr = _synth_samples(n_train, rng, noise, templates)
    x_va, y_va = _synth_samples(n_val, rng, noise, templates)
    x_te, y_te = _synth_samples(n_test, rng, noise, templates)
    return TaskData(x_tr, y_tr, x_va, y_va, x_te, y_te, SYNTH_CLASSES, name="synth")


KWS_T = 101
KWS_D = 13
_KWS_TARGET_CHANNELS = (2, 5, 8)
_KWS_DISTRACTOR_CHANNELS = (3, 6, 9)


def _kws_samples(n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Binary keyword-style sequences: pulse pattern vs distractor/noise.

    Per-sample amplitude jitter produces a spread of decision margins, so
    eval sets contain both confident and boundary samples.
    """
    x = rng.standard_normal((n, KWS_T, KWS_D))
    y = rng.integers(0, 2, size=n)
    for i in range(n):
        if y[i] == 1:
            chans = _KWS_TARGET_CHANNELS
        elif rng.random() < 0.5:
            chans = _KWS_DISTRACTOR_CHANNELS
        else:
            continue  # pure background negative
        amp = rng.uniform(0.8, 2.2)
        onset = int(rng.integers(15, 46))
        x[i, onset : onset + 25, list(chans)] += amp
    return x, y


def make_kws_demo_task(seed: int = 0, n_train: int = 2048, n_val: int = 512,
                       n_test: int = 512) -> TaskData:
    rng = np.random.default_rng(seed)
    x_tr, y_tr = _kws_samples(n_train, rng)
    x_va, y_va = _kws_samples(n_val, rng)
    x_te, y_te = _kws_samples(n_test, rng)
    return TaskData(x_tr, y_tr, x_va, y_va, x_te, y_te, 2, name="kws-demo")


KWS_FIXTURE_SEED = 7777
KWS_FIXTURE_COUNT = 64


def kws_demo_eval_arrays(seed: int = KWS_FIXTURE_SEED,
                         count: int = KWS_FIXTURE_COUNT) -> tuple[np.ndarray, np.ndarray]:
    """The bundled evaluation fixture, regenerated from its seed."""
    rng = np.random.default_rng(seed)
    return _kws_samples(count, rng)


def task_from_fseq(path, seed: int = 0, splits=(0.8, 0.1, 0.1), name=None) -> TaskData:
    feats, labels, n_classes = read_fseq(path)
    n = feats.shape[0]
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_tr = int(round(splits[0] * n))
    n_va = int(round(splits[1] * n))
    tr, va, te = order[:n_tr], order[n_tr : n_tr + n_va], order[n_tr + n_va :]
    x = feats.astype(np.float64)
    return TaskData(x[tr], labels[tr], x[va], labels[va], x[te], labels[te],
                    n_classes, name=name or os.path.basename(str(path)))


def load_mnist_task(data_dir, mode: str = "row-28", seed: int = 0,
                    val_fraction: float = 0.1) -> TaskData:
    """sMNIST/pMNIST from IDX files under data_dir (classic file names)."""
    data_dir = str(data_dir)

    def find(stem):
        for suffix in ("", ".gz"):
            p = os.path.join(data_dir, stem + suffix)
            if os.path.exists(p):
                return p
        raise FileNotFoundError(f"missing {stem}[.gz] under {data_dir}")

    train_x, train_y = load_idx_pair(find("train-images-idx3-ubyte"),
                                     find("train-labels-idx1-ubyte"))
    test_x, test_y = load_idx_pair(find("t10k-images-idx3-ubyte"),
                                   find("t10k-labels-idx1-ubyte"))
    perm = make_permutation(seed) if mode == "permuted" else None
    xs_train = pixel_sequences(train_x, mode, perm)
    xs_test = pixel_sequences(test_x, mode, perm)
    rng = np.random.default_rng(seed)
    order = rng.permutation(xs_train.shape[0])
    n_val = int(round(val_fraction * xs_train.shape[0]))
    va, tr = order[:n_val], order[n_val:]
    return TaskData(xs_train[tr], train_y[tr].astype(np.int64),
                    xs_train[va], train_y[va].astype(np.int64),
                    xs_test, test_y.astype(np.int64), 10,
                    name={"row-28": "smnist-rows", "raster-784": "smnist",
                          "permuted": "pmnist"}.get(mode, mode))


def resolve_data_dir(flag_value: str | None) -> str | None:
    """--data-dir wins over the environment variable."""
    if flag_value:
        return flag_value
    return os.environ.get(DATA_DIR_ENV)


def array_digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
