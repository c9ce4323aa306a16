"""Dataset container, synthetic generators, and CSV/IDX file loaders."""
from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .seeding import substream


class ParseError(ValueError):
    """A dataset file is malformed; the message names the offending spot."""


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    n_classes: int
    split: str = "train"
    provenance: str = "synthetic-gaussians"

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise ValueError(f"features must be 2-D, got {self.features.shape}")
        if self.labels.shape != (self.features.shape[0],):
            raise ValueError("one label per sample required")
        if not np.isfinite(self.features).all():
            raise ValueError("features contain NaN or Inf")
        if self.labels.size and (self.labels.min() < 0
                                 or self.labels.max() >= self.n_classes):
            raise ValueError("label outside [0, n_classes)")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def make_gaussians(n: int, rng: np.random.Generator, noise: float = 0.5,
                   spread: float = 1.5, split: str = "train") -> Dataset:
    """Four gaussian blobs in an XOR layout over two classes.

    Class 0 sits on the main diagonal, class 1 on the anti-diagonal, so the
    task is not linearly separable but is centered at the origin.
    """
    centers = np.array([[spread, spread], [-spread, -spread],
                        [spread, -spread], [-spread, spread]])
    blob_cls = np.array([0, 0, 1, 1])
    which = rng.integers(0, 4, size=n)
    x = centers[which] + rng.normal(0.0, noise, size=(n, 2))
    return Dataset(x, blob_cls[which], 2, split, "synthetic-gaussians")


def make_moons(n: int, rng: np.random.Generator, noise: float = 0.15,
               split: str = "train") -> Dataset:
    """Two interleaved half-circles, centered at the origin."""
    n0 = n // 2
    n1 = n - n0
    t0 = rng.uniform(0.0, np.pi, n0)
    t1 = rng.uniform(0.0, np.pi, n1)
    upper = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    lower = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    x = np.concatenate([upper, lower]) + rng.normal(0.0, noise, size=(n, 2))
    y = np.concatenate([np.zeros(n0, dtype=np.int64),
                        np.ones(n1, dtype=np.int64)])
    x -= np.array([0.5, 0.25])
    perm = rng.permutation(n)
    return Dataset(x[perm], y[perm], 2, split, "synthetic-moons")


def load_csv(path: str) -> tuple[np.ndarray, np.ndarray]:
    """Header plus numeric rows; the last column is the integer label."""
    with open(path) as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(f"{path}: empty file")
    header = lines[0].split(",")
    width = len(header)
    if width < 2:
        raise ParseError(f"{path}: header needs at least one feature and a label")
    feats, labels = [], []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != width:
            raise ParseError(
                f"{path}: line {lineno}: expected {width} columns, got {len(parts)}")
        try:
            row = [float(p) for p in parts[:-1]]
            lab = int(parts[-1])
        except ValueError as exc:
            raise ParseError(f"{path}: line {lineno}: {exc}") from exc
        feats.append(row)
        labels.append(lab)
    if not feats:
        raise ParseError(f"{path}: no data rows")
    return np.asarray(feats), np.asarray(labels, dtype=np.int64)


_IDX_DTYPES = {0x08: ("u1", 1), 0x09: ("i1", 1), 0x0B: (">i2", 2),
               0x0C: (">i4", 4), 0x0D: (">f4", 4), 0x0E: (">f8", 8)}


def load_idx(path: str) -> np.ndarray:
    """Read one array in the big-endian IDX container format."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise ParseError(f"{path}: truncated IDX header at offset 0")
    zero, dtype_code, ndim = raw[0] << 8 | raw[1], raw[2], raw[3]
    if zero != 0:
        raise ParseError(f"{path}: bad IDX magic at offset 0")
    if dtype_code not in _IDX_DTYPES:
        raise ParseError(f"{path}: unknown IDX dtype 0x{dtype_code:02x} at offset 2")
    dtype, itemsize = _IDX_DTYPES[dtype_code]
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise ParseError(f"{path}: truncated IDX dims at offset 4")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    count = int(np.prod(dims)) if ndim else 0
    if len(raw) != header_len + count * itemsize:
        raise ParseError(
            f"{path}: payload length {len(raw) - header_len} does not match "
            f"dims {dims} at offset {header_len}")
    return np.frombuffer(raw, dtype=dtype, offset=header_len).reshape(dims)


def load_idx_pair(images_path: str, labels_path: str) -> tuple[np.ndarray, np.ndarray]:
    """Images flattened to rows and scaled to [0, 1]; integer labels."""
    images = load_idx(images_path)
    labels = load_idx(labels_path)
    if labels.ndim != 1:
        raise ParseError(f"{labels_path}: labels must be 1-D")
    if images.shape[0] != labels.shape[0]:
        raise ParseError(
            f"{images_path}: {images.shape[0]} images vs {labels.shape[0]} labels")
    feats = images.reshape(images.shape[0], -1).astype(np.float64)
    if images.dtype == np.uint8:
        feats /= 255.0
    return feats, labels.astype(np.int64)


def _split(features: np.ndarray, labels: np.ndarray, test_fraction: float,
           rng: np.random.Generator, provenance: str) -> tuple[Dataset, Dataset]:
    n = features.shape[0]
    n_test = max(1, int(round(n * test_fraction)))
    perm = rng.permutation(n)
    test_idx, train_idx = perm[:n_test], perm[n_test:]
    classes = int(labels.max()) + 1
    return (Dataset(features[train_idx], labels[train_idx], classes, "train", provenance),
            Dataset(features[test_idx], labels[test_idx], classes, "test", provenance))


def load_dataset(spec: str, *, seed: int, n_train: int = 1024,
                 n_test: int = 512, noise: float | None = None,
                 test_fraction: float = 0.25) -> tuple[Dataset, Dataset]:
    """Resolve a dataset spec to (train, test).

    ``spec`` is "gaussians", "moons", a CSV path, or "idx:IMAGES,LABELS".
    Synthetic data is drawn from substreams of the seed, so identical
    (spec, seed) pairs yield identical datasets.
    """
    if spec == "gaussians":
        kw = {} if noise is None else {"noise": noise}
        return (make_gaussians(n_train, substream(seed, "dataset-train"), **kw),
                make_gaussians(n_test, substream(seed, "dataset-test"),
                               split="test", **kw))
    if spec == "moons":
        kw = {} if noise is None else {"noise": noise}
        return (make_moons(n_train, substream(seed, "dataset-train"), **kw),
                make_moons(n_test, substream(seed, "dataset-test"),
                           split="test", **kw))
    if spec.startswith("idx:"):
        parts = spec[4:].split(",")
        if len(parts) != 2:
            raise ParseError("idx spec must be idx:IMAGES_PATH,LABELS_PATH")
        feats, labels = load_idx_pair(parts[0], parts[1])
        return _split(feats, labels, test_fraction,
                      substream(seed, "dataset-split"), "idx")
    if spec.endswith(".csv"):
        feats, labels = load_csv(spec)
        return _split(feats, labels, test_fraction,
                      substream(seed, "dataset-split"), "csv")
    raise ParseError(f"unknown dataset spec {spec!r}")
