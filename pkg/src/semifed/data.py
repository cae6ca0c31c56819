"""Synthetic data, server/client splits and IID / non-IID partitioning."""

from __future__ import annotations

import gzip
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionError, ParameterError, PartitionInfeasibleError


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise DimensionError(f"features {self.features.shape} vs labels {self.labels.shape}")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ParameterError(f"labels must lie in [0, {self.num_classes})")

    @property
    def size(self):
        return self.labels.shape[0]

    def __len__(self):
        return self.size

    def subset(self, idx):
        return LabeledDataset(self.features[idx], self.labels[idx], self.num_classes)


class UnlabeledSet:
    """Feature-only view handed to clients.

    The true labels ride along under a private attribute so the simulator
    can build non-IID partitions and client-conditional evaluation; no
    public accessor exposes them.
    """

    __slots__ = ("features", "_hidden_labels")

    def __init__(self, features, hidden_labels):
        self.features = np.asarray(features, dtype=np.float64)
        self._hidden_labels = np.asarray(hidden_labels, dtype=np.int64)

    def __len__(self):
        return self.features.shape[0]

    def subset(self, idx):
        return UnlabeledSet(self.features[idx], self._hidden_labels[idx])


def hidden_label_counts(unlabeled, num_classes):
    """Per-class counts of an unlabeled set. Evaluation and partitioning only."""
    return np.bincount(unlabeled._hidden_labels, minlength=num_classes)


def standardize(x):
    std = x.std(axis=0)
    return (x - x.mean(axis=0)) / np.where(std > 0, std, 1.0)


def make_blobs(num_classes, dim, n_per_class, spread, seed, clusters_per_class=1):
    """Gaussian clusters around seeded unit-normal centres, standardised per dimension.

    With ``clusters_per_class > 1`` every class is a mixture of several
    clusters, which makes the problem non-linear.
    """
    if num_classes < 2 or dim < 2:
        raise ParameterError("need num_classes >= 2 and dim >= 2")
    if not spread > 0:
        raise ParameterError("spread must be positive")
    rng = np.random.default_rng(seed)
    centers = rng.normal(size=(num_classes, clusters_per_class, dim))
    n = num_classes * n_per_class
    labels = np.repeat(np.arange(num_classes), n_per_class)
    which = rng.integers(0, clusters_per_class, n)
    x = centers[labels, which] + spread * rng.normal(size=(n, dim))
    order = rng.permutation(n)
    if n == 0:
        return LabeledDataset(np.zeros((0, dim)), labels, num_classes)
    return LabeledDataset(standardize(x[order]), labels[order], num_classes)


def _largest_remainder(total, weights):
    weights = np.asarray(weights, dtype=np.float64)
    raw = total * weights / weights.sum()
    counts = np.floor(raw).astype(np.int64)
    short = total - counts.sum()
    counts[np.argsort(-(raw - counts), kind="stable")[:short]] += 1
    return counts


def split_server_client(ds, n_server, test_fraction, seed):
    """Stratified disjoint split into (server labeled set, unlabeled pool, test set)."""
    if not 0.0 <= test_fraction < 1.0:
        raise ParameterError("test_fraction must lie in [0, 1)")
    n_test = int(round(test_fraction * ds.size))
    if n_server < 0 or n_server + n_test >= ds.size:
        raise ParameterError(
            f"N_s={n_server} plus {n_test} test samples leaves no client data out of {ds.size}")
    rng = np.random.default_rng(seed)
    class_counts = np.bincount(ds.labels, minlength=ds.num_classes)
    server_counts = _largest_remainder(n_server, class_counts)
    test_counts = _largest_remainder(n_test, class_counts)
    server_idx, test_idx, pool_idx = [], [], []
    for c in range(ds.num_classes):
        idx = rng.permutation(np.flatnonzero(ds.labels == c))
        s, t = server_counts[c], test_counts[c]
        server_idx.append(idx[:s])
        test_idx.append(idx[s:s + t])
        pool_idx.append(idx[s + t:])
    server_idx, test_idx, pool_idx = (np.sort(np.concatenate(p)) for p in (server_idx, test_idx, pool_idx))
    pool = UnlabeledSet(ds.features[pool_idx], ds.labels[pool_idx])
    return ds.subset(server_idx), pool, ds.subset(test_idx)


@dataclass
class PartitionSpec:
    kind: str = "dirichlet"
    num_clients: int = 10
    seed: int = 0
    alpha: float = 0.3
    shards_per_client: int = 2
    max_retries: int = 100

    def __post_init__(self):
        if self.kind not in ("iid", "dirichlet", "shards"):
            raise ParameterError(f"unknown partition kind {self.kind!r}")
        if self.kind == "dirichlet" and not self.alpha > 0:
            raise ParameterError("dirichlet alpha must be positive")
        if self.shards_per_client < 1:
            raise ParameterError("shards_per_client must be >= 1")
        if self.num_clients < 1:
            raise ParameterError("num_clients must be >= 1")


def partition_indices(labels, num_classes, spec):
    """Index lists, one per client, forming an exact partition of ``range(len(labels))``."""
    labels = np.asarray(labels)
    n, k = labels.shape[0], spec.num_clients
    if n < k:
        raise PartitionInfeasibleError(f"{n} samples cannot cover {k} clients")
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "iid":
        return [np.sort(p) for p in np.array_split(rng.permutation(n), k)]
    if spec.kind == "shards":
        # shuffle first so ties within a class are dealt randomly
        order = rng.permutation(n)
        order = order[np.argsort(labels[order], kind="stable")]
        shards = np.array_split(order, k * spec.shards_per_client)
        deal = rng.permutation(len(shards)).reshape(k, spec.shards_per_client)
        return [np.sort(np.concatenate([shards[s] for s in row])) for row in deal]

    by_class = [np.flatnonzero(labels == c) for c in range(num_classes)]
    for _ in range(spec.max_retries):
        props = rng.dirichlet(np.full(num_classes, spec.alpha), size=k)
        parts = [[] for _ in range(k)]
        for c, idx in enumerate(by_class):
            idx = rng.permutation(idx)
            share = props[:, c] / props[:, c].sum()
            cuts = (np.cumsum(share)[:-1] * idx.size).astype(np.int64)
            for client, piece in enumerate(np.split(idx, cuts)):
                parts[client].append(piece)
        parts = [np.sort(np.concatenate(p)) for p in parts]
        if all(p.size for p in parts):
            return parts
    raise PartitionInfeasibleError(
        f"dirichlet({spec.alpha}) left a client empty after {spec.max_retries} draws")


def partition(pool, spec, num_classes):
    """Split an unlabeled pool into ``spec.num_clients`` client datasets."""
    return [pool.subset(idx) for idx in partition_indices(pool._hidden_labels, num_classes, spec)]


def label_distribution(unlabeled, num_classes):
    counts = hidden_label_counts(unlabeled, num_classes).astype(np.float64)
    return counts / max(counts.sum(), 1.0)


# --------------------------------------------------------------- IDX files

_IDX_TYPES = {0x08: ">u1", 0x09: ">i1", 0x0B: ">i2", 0x0C: ">i4", 0x0D: ">f4", 0x0E: ">f8"}


def read_idx(path):
    """Read an IDX array (optionally gzipped): zero bytes, type code, ndim, big-endian dims, data."""
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4 or raw[0] != 0 or raw[1] != 0 or raw[2] not in _IDX_TYPES:
        raise ValueError(f"{path}: not an IDX file")
    ndim = raw[3]
    dims = np.frombuffer(raw, dtype=">u4", count=ndim, offset=4).astype(np.int64)
    dtype = np.dtype(_IDX_TYPES[raw[2]])
    data = np.frombuffer(raw, dtype=dtype, offset=4 + 4 * ndim)
    if data.size != int(np.prod(dims)):
        raise ValueError(f"{path}: expected {int(np.prod(dims))} values, found {data.size}")
    return data.reshape(tuple(dims))


def load_idx_dataset(images_path, labels_path, num_classes=None):
    images = read_idx(images_path)
    labels = read_idx(labels_path).astype(np.int64)
    x = standardize(images.reshape(images.shape[0], -1).astype(np.float64))
    c = int(labels.max()) + 1 if num_classes is None else num_classes
    return LabeledDataset(x, labels, c)
