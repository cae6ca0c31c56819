import gzip

import numpy as np
import pytest

from semifed.data import (LabeledDataset, PartitionSpec, UnlabeledSet, hidden_label_counts,
                          label_distribution, load_idx_dataset, make_blobs, partition,
                          partition_indices, read_idx, split_server_client)
from semifed.distill import supervised_train
from semifed.errors import ParameterError, PartitionInfeasibleError
from semifed.nn import Network, Dense, accuracy


def test_make_blobs_empty_and_deterministic():
    assert make_blobs(4, 16, 0, 1.0, 0).size == 0
    a, b = make_blobs(4, 16, 50, 1.0, 7), make_blobs(4, 16, 50, 1.0, 7)
    assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)


def test_make_blobs_standardised():
    ds = make_blobs(3, 5, 200, 1.0, 1)
    assert np.allclose(ds.features.mean(axis=0), 0, atol=1e-12)
    assert np.allclose(ds.features.std(axis=0), 1, atol=1e-12)


def test_well_separated_blobs_are_linearly_separable():
    ds = make_blobs(4, 16, 250, 0.1, 3)
    rng = np.random.default_rng(0)
    linear = Network([Dense(np.zeros((16, 4)), np.zeros(4))])
    trained = supervised_train(linear, ds, 30, 0.1, 32, rng)
    assert accuracy(trained, ds.features, ds.labels) >= 0.95


def test_make_blobs_rejects_bad_parameters():
    with pytest.raises(ParameterError):
        make_blobs(1, 4, 10, 1.0, 0)
    with pytest.raises(ParameterError):
        make_blobs(3, 4, 10, 0.0, 0)


def test_split_sizes_stratification_and_label_guard():
    ds = make_blobs(4, 6, 250, 1.0, 0)
    server, pool, test = split_server_client(ds, 100, 0.2, 1)
    assert server.size + len(pool) + test.size == ds.size
    source = np.bincount(ds.labels, minlength=4) / ds.size
    assert np.all(np.abs(np.bincount(server.labels, minlength=4) - 100 * source) <= 1)
    assert not any(hasattr(pool, name) for name in ("labels", "y", "targets"))
    assert isinstance(pool, UnlabeledSet)


def test_split_disjoint():
    ds = make_blobs(3, 4, 30, 1.0, 0)
    ds = LabeledDataset(np.column_stack([np.arange(ds.size), ds.features]), ds.labels, 3)
    server, pool, test = split_server_client(ds, 10, 0.3, 0)
    ids = np.concatenate([server.features[:, 0], pool.features[:, 0], test.features[:, 0]])
    assert sorted(ids.tolist()) == list(range(ds.size))


def test_split_too_large():
    with pytest.raises(ParameterError):
        split_server_client(make_blobs(2, 4, 10, 1.0, 0), 15, 0.5, 0)


@pytest.mark.parametrize("kind", ["iid", "dirichlet", "shards"])
def test_partition_is_exact_and_seeded(kind):
    labels = np.random.default_rng(0).integers(0, 4, 1000)
    spec = PartitionSpec(kind, 10, 3)
    parts = partition_indices(labels, 4, spec)
    assert sorted(np.concatenate(parts).tolist()) == list(range(1000))
    assert all(p.size for p in parts)
    again = partition_indices(labels, 4, spec)
    assert all(np.array_equal(a, b) for a, b in zip(parts, again))


def test_iid_equal_sizes():
    parts = partition_indices(np.zeros(100, int), 2, PartitionSpec("iid", 10, 0))
    assert {p.size for p in parts} == {10}


def test_shards_one_per_client_limits_classes():
    labels = np.repeat(np.arange(5), 100)
    for seed in range(5):
        for p in partition_indices(labels, 5, PartitionSpec("shards", 5, seed, shards_per_client=1)):
            assert np.unique(labels[p]).size <= 2


def test_dirichlet_large_alpha_approaches_global():
    # A Dir(100) class share has a relative sd near 8.7%, so single entries stray past
    # 10%; the check is on the mean relative deviation over clients, classes and seeds.
    labels = np.repeat(np.arange(4), 1250)
    rel = []
    for seed in range(20):
        for p in partition_indices(labels, 4, PartitionSpec("dirichlet", 10, seed, alpha=100.0)):
            assert p.size >= 300
            share = np.bincount(labels[p], minlength=4) / p.size
            rel.extend(np.abs(share - 0.25) / 0.25)
    assert np.mean(rel) <= 0.10


def test_dirichlet_heterogeneity_monotone_in_alpha():
    labels = np.repeat(np.arange(4), 500)

    def mean_tv(alpha):
        tv = []
        for seed in range(20):
            for p in partition_indices(labels, 4, PartitionSpec("dirichlet", 10, seed, alpha=alpha)):
                tv.append(0.5 * np.abs(np.bincount(labels[p], minlength=4) / p.size - 0.25).sum())
        return np.mean(tv)

    assert mean_tv(0.3) > mean_tv(10.0)


def test_partition_infeasible():
    with pytest.raises(PartitionInfeasibleError):
        partition_indices(np.zeros(3, int), 1, PartitionSpec("iid", 5, 0))
    with pytest.raises(PartitionInfeasibleError):
        partition_indices(np.zeros(12, int), 1, PartitionSpec("dirichlet", 12, 0, alpha=0.01, max_retries=3))


def test_partition_of_pool_and_label_distribution():
    ds = make_blobs(3, 4, 100, 1.0, 0)
    _, pool, _ = split_server_client(ds, 30, 0.1, 0)
    clients = partition(pool, PartitionSpec("dirichlet", 4, 0), 3)
    assert sum(len(c) for c in clients) == len(pool)
    for c in clients:
        dist = label_distribution(c, 3)
        assert dist.sum() == pytest.approx(1.0)
        assert np.array_equal(hidden_label_counts(c, 3) / len(c), dist)


def _write_idx(path, array, code):
    header = bytes([0, 0, code, array.ndim]) + np.array(array.shape, dtype=">u4").tobytes()
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(header + array.tobytes())


def test_idx_round_trip(tmp_path):
    images = np.arange(2 * 3 * 3, dtype=np.uint8).reshape(2, 3, 3)
    labels = np.array([1, 0], dtype=np.uint8)
    _write_idx(tmp_path / "img.gz", images, 0x08)
    _write_idx(tmp_path / "lab", labels, 0x08)
    assert np.array_equal(read_idx(tmp_path / "img.gz"), images)
    ds = load_idx_dataset(tmp_path / "img.gz", tmp_path / "lab")
    assert ds.features.shape == (2, 9) and ds.labels.tolist() == [1, 0]


def test_idx_rejects_garbage(tmp_path):
    (tmp_path / "bad").write_bytes(b"\x01\x02\x03\x04")
    with pytest.raises(ValueError):
        read_idx(tmp_path / "bad")
