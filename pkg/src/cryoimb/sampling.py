"""Dataset rebalancing: SMOTE plus random over- and under-sampling."""

import warnings

import numpy as np

from .dataset import LabeledDataset
from .errors import PopulationError


def knn_indices(samples, i, k):
    """Indices of the ``k`` rows nearest to row ``i`` (Euclidean), excluding ``i``.

    Equal distances are ordered by ascending row index.
    """
    samples = np.asarray(samples, dtype=np.float64)
    T = len(samples)
    if k > T - 1:
        raise PopulationError(f"asked for {k} neighbours among {T} samples")
    d = np.sum((samples - samples[i]) ** 2, axis=1)
    d[i] = np.inf
    return np.argsort(d, kind="stable")[:k]


def smote(samples, N, k=5, rng=None, per_attribute_gap=False):
    """Synthetic minority rows by interpolating towards nearest neighbours.

    ``N`` is the oversampling amount in percent.  For ``N >= 100`` it must be
    a multiple of 100 and every row spawns ``N // 100`` synthetic rows.  For
    ``N < 100`` a random ``floor(N/100 * T)`` of the rows spawn one each.
    Neighbours are always searched among all ``T`` input rows.

    Each synthetic row is ``base + gap * (neighbour - base)`` with one
    ``gap ~ U[0, 1)`` per row, so it lies on the segment between them.
    ``per_attribute_gap=True`` draws a gap per attribute instead (the result
    then lies in the bounding box of the pair, not on the segment).
    """
    rng = rng if rng is not None else np.random.default_rng()
    samples = np.asarray(samples)
    flat = samples.reshape(len(samples), -1)
    T = len(flat)
    if T < 2:
        raise PopulationError(f"SMOTE needs at least 2 samples, got {T}")
    if N < 0:
        raise ValueError("SMOTE amount must be non-negative")
    if N < 100:
        bases = rng.permutation(T)[: int(np.floor(N / 100 * T))]
        per_base = 1
    else:
        if N % 100:
            raise ValueError(f"SMOTE amount {N} is not a multiple of 100")
        bases = np.arange(T)
        per_base = N // 100
    if k > T - 1:
        warnings.warn(f"SMOTE k={k} capped at {T - 1} for {T} samples", stacklevel=2)
        k = T - 1
    if k < 1:
        raise ValueError("SMOTE needs k >= 1")

    out = np.empty((len(bases) * per_base, flat.shape[1]), dtype=flat.dtype)
    row = 0
    for i in bases:
        nnarray = knn_indices(flat, i, k)
        base = flat[i]
        for _ in range(per_base):
            nn = nnarray[rng.integers(k)]
            dif = flat[nn] - base
            gap = rng.random(flat.shape[1]) if per_attribute_gap else rng.random()
            out[row] = base + gap * dif
            row += 1
    return out.reshape((len(out),) + samples.shape[1:])


def smote_dataset(dataset, rng, N=None, k=5):
    """Apply SMOTE to every class smaller than the largest one.

    With ``N=None`` each class gets the largest multiple of 100 that does not
    overshoot the majority count.  Synthetic samples are appended.
    """
    counts = dataset.class_counts()
    target = counts.max()
    vols, labels = [], []
    for c in range(dataset.n_classes):
        n_c = counts[c]
        if n_c == target or n_c == 0:
            continue
        amount = N if N is not None else 100 * ((target - n_c) // n_c)
        if amount == 0:
            continue
        if n_c < 2:
            warnings.warn(f"class {c} has {n_c} sample; skipped by SMOTE", stacklevel=2)
            continue
        synth = smote(dataset.volumes[dataset.labels == c], amount, k, rng)
        vols.append(synth.astype(dataset.volumes.dtype))
        labels.append(np.full(len(synth), c, dtype=np.int64))
    if not vols:
        return dataset
    extra = LabeledDataset(np.concatenate(vols), np.concatenate(labels), dataset.n_classes)
    return dataset.concat(extra)


def _check_populated(dataset):
    if len(dataset) == 0:
        raise PopulationError("cannot resample an empty dataset")
    counts = dataset.class_counts()
    if np.any(counts == 0):
        raise PopulationError(f"every class needs at least one sample, counts {counts.tolist()}")
    return counts


def random_undersample(dataset, rng):
    """Drop random samples until every class has the minority count."""
    counts = _check_populated(dataset)
    m = counts.min()
    keep = [
        rng.choice(np.flatnonzero(dataset.labels == c), size=m, replace=False)
        for c in range(dataset.n_classes)
    ]
    return dataset.subset(np.sort(np.concatenate(keep)))


def random_oversample(dataset, rng):
    """Append random copies until every class has the majority count."""
    counts = _check_populated(dataset)
    M = counts.max()
    extra = [
        rng.choice(np.flatnonzero(dataset.labels == c), size=M - counts[c], replace=True)
        for c in range(dataset.n_classes)
    ]
    idx = np.concatenate([np.arange(len(dataset))] + extra)
    return dataset.subset(idx)
