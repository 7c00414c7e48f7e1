"""Datasets: MNIST IDX parsing, synthetic generators and deterministic preprocessing."""
from __future__ import annotations

import gzip
import math
import os
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import FormatError

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class BadMagicError(FormatError):
    pass


class TruncatedFileError(FormatError):
    pass


class CountMismatchError(FormatError):
    pass


@dataclass(frozen=True)
class LabeledDataset:
    """``inputs`` is ``(n, d)`` float64.  ``num_classes`` is None for regression targets."""

    inputs: np.ndarray
    targets: np.ndarray
    num_classes: int | None = None

    def __post_init__(self):
        if self.inputs.ndim != 2 or len(self.inputs) != len(self.targets):
            raise ValueError(f"inputs {self.inputs.shape} and targets {self.targets.shape} do not line up")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("inputs contain non-finite values")
        if self.num_classes is not None and len(self.targets):
            if self.targets.min() < 0 or self.targets.max() >= self.num_classes:
                raise ValueError(f"class ids outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.targets)

    @property
    def dim(self) -> int:
        return self.inputs.shape[1]

    def take(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.inputs[idx], self.targets[idx], self.num_classes)

    def where_class(self, classes) -> np.ndarray:
        return np.flatnonzero(np.isin(self.targets, list(classes)))


# -- IDX -----------------------------------------------------------------------

def _read(path) -> bytes:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def _parse_idx(raw: bytes, magic: int, path) -> tuple[tuple[int, ...], bytes]:
    if len(raw) < 8:
        raise TruncatedFileError(f"{path}: shorter than an IDX header")
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise BadMagicError(f"{path}: magic {found:#010x}, expected {magic:#010x}")
    ndim = raw[3]
    head = 4 + 4 * ndim
    if len(raw) < head:
        raise TruncatedFileError(f"{path}: truncated dimension header")
    dims = struct.unpack(f">{ndim}I", raw[4:head])
    body = raw[head:]
    need = math.prod(dims)
    if len(body) < need:
        raise TruncatedFileError(f"{path}: expected {need} data bytes, found {len(body)}")
    return dims, body[:need]


def load_idx(images_path, labels_path, num_classes: int = 10) -> LabeledDataset:
    """Read an MNIST-style image/label pair; pixels are scaled to [0, 1]."""
    idims, ibody = _parse_idx(_read(images_path), IDX_IMAGES_MAGIC, images_path)
    ldims, lbody = _parse_idx(_read(labels_path), IDX_LABELS_MAGIC, labels_path)
    if idims[0] != ldims[0]:
        raise CountMismatchError(f"{idims[0]} images but {ldims[0]} labels")
    n = idims[0]
    d = math.prod(idims[1:])
    x = np.frombuffer(ibody, dtype=np.uint8).reshape(n, d).astype(np.float64) / 255.0
    y = np.frombuffer(lbody, dtype=np.uint8).astype(np.int64)
    return LabeledDataset(x, y, num_classes)


MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


def find_mnist(split: str, root=None) -> tuple[Path, Path]:
    """Locate MNIST files under ``root`` or ``$MBPA_DATA_DIR`` (plain or ``.gz``)."""
    root = root or os.environ.get("MBPA_DATA_DIR")
    if not root:
        raise FileNotFoundError("no MNIST directory: set MBPA_DATA_DIR or data.mnist_dir")
    found = []
    for stem in MNIST_FILES[split]:
        for name in (stem, stem + ".gz", stem.replace("-idx", ".idx")):
            p = Path(root) / name
            if p.exists():
                found.append(p)
                break
        else:
            raise FileNotFoundError(f"{stem} not found under {root}")
    return found[0], found[1]


# -- synthetic -----------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    kind: str = "gaussian-clusters"   # or "regression-1d"
    dims: int = 64
    classes: int = 10
    samples_per_class: int = 300
    spread: float = 0.1               # cluster std, or label-noise std for regression-1d
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("gaussian-clusters", "regression-1d"):
            raise ValueError(f"unknown synthetic kind {self.kind!r}")
        if self.spread <= 0:
            raise ValueError("spread must be positive")
        if self.dims < 1 or self.classes < 1 or self.samples_per_class < 1:
            raise ValueError("dims, classes and samples_per_class must be positive")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def cluster_means(dims: int, classes: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0])
    m = rng.normal(size=(classes, dims))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def gen_synthetic(spec: SyntheticSpec, sample_seed: int | None = None) -> LabeledDataset:
    """Generate a dataset; ``sample_seed`` redraws points while keeping cluster means fixed."""
    rng = np.random.default_rng([spec.seed, 1 if sample_seed is None else 2 + sample_seed])
    if spec.kind == "regression-1d":
        n = spec.samples_per_class
        x = rng.uniform(-2.0, 2.0, size=n)
        y = np.sin(3.0 * x) + spec.spread * rng.normal(size=n)
        return LabeledDataset(x[:, None], y, None)
    means = cluster_means(spec.dims, spec.classes, spec.seed)
    y = np.repeat(np.arange(spec.classes), spec.samples_per_class)
    x = means[y] + spec.spread * rng.normal(size=(len(y), spec.dims))
    order = rng.permutation(len(y))
    return LabeledDataset(x[order], y[order], spec.classes)


def regression_curve(x):
    return np.sin(3.0 * np.asarray(x, dtype=np.float64))


# -- preprocessing -------------------------------------------------------------

def pixel_permutation(dims: int, seed: int) -> np.ndarray:
    return np.random.default_rng([seed, 3]).permutation(dims)


def apply_permutation(ds: LabeledDataset, perm) -> LabeledDataset:
    perm = np.asarray(perm)
    if sorted(perm.tolist()) != list(range(ds.dim)):
        raise ValueError("not a permutation of the input columns")
    return LabeledDataset(ds.inputs[:, perm], ds.targets, ds.num_classes)


def permute_pixels(ds: LabeledDataset, perm_seed: int) -> LabeledDataset:
    if ds.num_classes is None:
        raise ValueError("permute_pixels expects a classification dataset")
    return apply_permutation(ds, pixel_permutation(ds.dim, perm_seed))


def subsample_classes(ds: LabeledDataset, fractions, seed: int = 0) -> LabeledDataset:
    """Keep ``ceil(fraction_c * n_c)`` seeded examples of each class, original order preserved.

    ``fractions`` maps class id to fraction (missing classes keep everything)
    or is a sequence indexed by class id.
    """
    if ds.num_classes is None:
        raise ValueError("subsample_classes expects a classification dataset")
    if not isinstance(fractions, dict):
        fractions = dict(enumerate(fractions))
    for c, f in fractions.items():
        if not 0.0 < f <= 1.0:
            raise ValueError(f"fraction for class {c} must lie in (0, 1], got {f}")
    rng = np.random.default_rng([seed, 4])
    keep = []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.targets == c)
        f = fractions.get(c, 1.0)
        n = math.ceil(f * len(idx))
        keep.append(idx if n == len(idx) else rng.choice(idx, size=n, replace=False))
    return ds.take(np.sort(np.concatenate(keep)))


def split_per_class(ds: LabeledDataset, n_test_per_class: int, seed: int = 0):
    """Disjoint ``(train, test)`` with ``n_test_per_class`` test examples of every class."""
    rng = np.random.default_rng([seed, 5])
    test = []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.targets == c)
        if len(idx) <= n_test_per_class:
            raise ValueError(f"class {c} has {len(idx)} examples, cannot hold out {n_test_per_class}")
        test.append(rng.choice(idx, size=n_test_per_class, replace=False))
    test_idx = np.sort(np.concatenate(test))
    train_idx = np.setdiff1d(np.arange(len(ds)), test_idx)
    return ds.take(train_idx), ds.take(test_idx)
