"""Labelled volume collections, train/test splitting and the CETV file format.

CETV layout (all integers little-endian)::

    b"CETV" | u32 version=1 | u32 n_samples | u32 dim | u32 n_classes
    then per sample: u8 label | dim**3 float32 voxels (C order)
"""

import struct
from dataclasses import dataclass

import numpy as np

from .errors import BadMagicError, TruncatedError, VersionMismatchError

MAGIC = b"CETV"
VERSION = 1
_HEADER = struct.Struct("<4sIIII")


@dataclass
class LabeledDataset:
    volumes: np.ndarray  # (n, ...) one sample per leading index
    labels: np.ndarray  # (n,) integer class ids
    n_classes: int

    def __post_init__(self):
        self.volumes = np.asarray(self.volumes)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.labels.shape != (len(self.volumes),):
            raise ValueError(f"{len(self.volumes)} volumes but labels of shape {self.labels.shape}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("label outside [0, n_classes)")

    def __len__(self):
        return len(self.labels)

    @property
    def dim(self):
        return self.volumes.shape[1]

    def class_counts(self):
        return np.bincount(self.labels, minlength=self.n_classes)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return LabeledDataset(self.volumes[idx], self.labels[idx], self.n_classes)

    def concat(self, other):
        if other.n_classes != self.n_classes:
            raise ValueError("cannot concatenate datasets with different class counts")
        return LabeledDataset(
            np.concatenate([self.volumes, other.volumes]),
            np.concatenate([self.labels, other.labels]),
            self.n_classes,
        )

    def equals(self, other):
        return (
            self.n_classes == other.n_classes
            and np.array_equal(self.labels, other.labels)
            and self.volumes.shape == other.volumes.shape
            and self.volumes.tobytes() == other.volumes.tobytes()
        )


def _stratified_quota(counts, n_train):
    # largest remainder: floors first, leftovers to the biggest fractions
    total = counts.sum()
    exact = counts * (n_train / total) if total else counts * 0.0
    quota = np.floor(exact).astype(np.int64)
    order = np.argsort(-(exact - quota), kind="stable")
    for c in order[: n_train - quota.sum()]:
        quota[c] += 1
    return quota


def split(dataset, train_fraction=0.8, stratified=True, seed=0):
    """Disjoint train/test partition with ``floor(n * train_fraction)`` training samples.

    Both parts keep the original sample order.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must lie in (0, 1), got {train_fraction}")
    n = len(dataset)
    n_train = int(np.floor(n * train_fraction))
    rng = np.random.default_rng(seed)
    if stratified:
        counts = dataset.class_counts()
        quota = _stratified_quota(counts, n_train)
        train_idx = []
        for c in range(dataset.n_classes):
            members = np.flatnonzero(dataset.labels == c)
            train_idx.append(rng.permutation(members)[: quota[c]])
        train_idx = np.concatenate(train_idx) if train_idx else np.array([], dtype=np.int64)
    else:
        train_idx = rng.permutation(n)[:n_train]
    mask = np.zeros(n, dtype=bool)
    mask[train_idx] = True
    return dataset.subset(np.flatnonzero(mask)), dataset.subset(np.flatnonzero(~mask))


# ---------------------------------------------------------------------------
# persistence


def _record_dtype(dim):
    return np.dtype([("label", "u1"), ("voxels", "<f4", (dim**3,))])


def save_dataset(dataset, path):
    vols = np.asarray(dataset.volumes)
    n = len(dataset)
    dim = vols.shape[1] if n else 0
    if n and vols.shape[1:] != (dim, dim, dim):
        raise ValueError(f"CETV stores cubic volumes, got sample shape {vols.shape[1:]}")
    if dataset.n_classes > 256:
        raise ValueError("CETV labels are 8-bit")
    records = np.empty(n, dtype=_record_dtype(dim))
    records["label"] = dataset.labels
    records["voxels"] = vols.reshape(n, -1)
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, VERSION, n, dim, dataset.n_classes))
        fh.write(records.tobytes())


def load_dataset(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[:4] != MAGIC:
        raise BadMagicError(f"{path}: not a CETV file")
    if len(raw) < _HEADER.size:
        raise TruncatedError(f"{path}: header cut short")
    _, version, n, dim, n_classes = _HEADER.unpack_from(raw)
    if version != VERSION:
        raise VersionMismatchError(f"{path}: CETV version {version}, expected {VERSION}")
    rec = _record_dtype(dim)
    expected = _HEADER.size + n * rec.itemsize
    if len(raw) < expected:
        raise TruncatedError(f"{path}: {len(raw)} bytes, expected {expected}")
    records = np.frombuffer(raw, dtype=rec, count=n, offset=_HEADER.size)
    volumes = records["voxels"].astype(np.float32).reshape(n, dim, dim, dim)
    return LabeledDataset(volumes, records["label"].astype(np.int64), n_classes)


def file_size(n_samples, dim):
    return _HEADER.size + n_samples * (1 + 4 * dim**3)
