"""IDX (MNIST-format) reading and writing."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .sphere import input_normalize

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801

SPLITS = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IdxFormatError(ValueError):
    pass


def _open(path: Path) -> bytes:
    raw = path.read_bytes()
    return gzip.decompress(raw) if raw[:2] == b"\x1f\x8b" else raw


def read_idx(path, expected_magic: int | None = None) -> np.ndarray:
    """Read an unsigned-byte IDX file (optionally gzipped) into an array."""
    path = Path(path)
    buf = _open(path)
    if len(buf) < 4:
        raise IdxFormatError(f"{path}: truncated header ({len(buf)} bytes)")
    magic = struct.unpack(">I", buf[:4])[0]
    if expected_magic is not None and magic != expected_magic:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    if magic >> 8 != 0x08:
        raise IdxFormatError(f"{path}: unsupported IDX element type in magic 0x{magic:08x}")
    ndim = magic & 0xFF
    hdr = 4 + 4 * ndim
    if len(buf) < hdr:
        raise IdxFormatError(f"{path}: truncated header at byte {len(buf)}, need {hdr}")
    dims = struct.unpack(f">{ndim}I", buf[4:hdr])
    need = hdr + int(np.prod(dims))
    if len(buf) < need:
        raise IdxFormatError(f"{path}: truncated data at byte offset {len(buf)}, expected {need} bytes")
    return np.frombuffer(buf, dtype=np.uint8, count=need - hdr, offset=hdr).reshape(dims)


def write_idx(path, array: np.ndarray, compress: bool = False) -> None:
    a = np.ascontiguousarray(array, dtype=np.uint8)
    body = struct.pack(">I", 0x0800 | a.ndim) + struct.pack(f">{a.ndim}I", *a.shape) + a.tobytes()
    if compress:
        body = gzip.compress(body, mtime=0)
    Path(path).write_bytes(body)


@dataclass
class Split:
    X: np.ndarray  # features x samples, unit-norm columns
    y: np.ndarray

    def __len__(self):
        return self.y.size


def _find(root: Path, stem: str) -> Path:
    for cand in (root / stem, root / f"{stem}.gz"):
        if cand.exists():
            return cand
    raise FileNotFoundError(f"{root}: missing {stem}[.gz]")


def load_split(images_path, labels_path, num_classes: int = 10) -> Split:
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images_path}: {images.shape[0]} images but {labels.shape[0]} labels")
    if labels.size and labels.max() >= num_classes:
        bad = int(np.flatnonzero(labels >= num_classes)[0])
        raise IdxFormatError(f"{labels_path}: label {labels[bad]} at index {bad} out of range [0, {num_classes})")
    X = images.reshape(images.shape[0], -1).T.astype(np.float64) / 255.0
    if X.shape[1]:
        X = input_normalize(X)
    return Split(X=X, y=labels.astype(np.int64))


def load_idx_dataset(path, num_classes: int = 10) -> tuple[Split, Split]:
    """Load ``(train, test)`` from a directory holding the four MNIST-named files."""
    root = Path(path)
    out = []
    for split in ("train", "test"):
        img, lab = SPLITS[split]
        out.append(load_split(_find(root, img), _find(root, lab), num_classes))
    return out[0], out[1]


def export_mnist_sample(path, n_test: int = 1000, seed: int = 0) -> Path:
    """Write the 5000-digit MNIST sample shipped with mlxtend as IDX files.

    The sample is shuffled with ``seed`` and split class-balanced into
    ``5000 - n_test`` training and ``n_test`` test images.
    """
    from mlxtend.data import mnist_data

    X, y = mnist_data()
    rng = np.random.default_rng(seed)
    test_idx, train_idx = [], []
    per_class = n_test // 10
    for c in range(10):
        idx = rng.permutation(np.flatnonzero(y == c))
        test_idx.append(idx[:per_class])
        train_idx.append(idx[per_class:])
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    for split, idx in (("train", np.concatenate(train_idx)), ("test", np.concatenate(test_idx))):
        idx = rng.permutation(idx)
        images = X[idx].reshape(-1, 28, 28).astype(np.uint8)
        img, lab = SPLITS[split]
        write_idx(root / img, images)
        write_idx(root / lab, y[idx].astype(np.uint8))
    return root
