import json

import numpy as np
import pytest

from fedlt import data
from fedlt.rng import stream


def test_longtail_boundary():
    assert data.longtail_counts(1000, 10, 10)[9] == 100


def test_longtail_balanced():
    assert data.longtail_counts(1000, 1, 10) == [1000] * 10


def test_longtail_intermediate_class():
    # direct evaluation of n0 * IR^(-c/(C-1)) for c=3
    oracle = round(5000 * 100 ** (-3 / 9))
    assert oracle == 1077
    assert data.longtail_counts(5000, 100, 10)[3] == 1077


def test_longtail_rejects_ir_below_one():
    with pytest.raises(ValueError):
        data.longtail_counts(1000, 0.5, 10)


@pytest.mark.parametrize("ir", [1, 2.5, 10, 50, 100, 1000])
def test_longtail_monotone_and_ir(ir):
    counts = data.longtail_counts(1000, ir, 10)
    assert counts[0] == 1000
    assert all(a >= b for a, b in zip(counts, counts[1:]))
    assert min(counts) >= 1
    realized = counts[0] / counts[-1]
    # rounding moves the tail count by at most 0.5
    assert 1000 / (1000 / ir + 0.5) <= realized + 1e-9
    assert realized <= 1000 / max(1000 / ir - 0.5, 1) + 1e-9


def test_synth_zero_sigma_gives_means():
    ds = data.synth_gaussian_mixture(4, 5, [3, 3, 3, 3], seed=7, sigma=0.0)
    means = data.class_means(4, 5, 7)
    np.testing.assert_array_equal(ds.x, means[ds.y])
    np.testing.assert_allclose(np.linalg.norm(means, axis=1), 1.0, rtol=1e-15)
    assert len({tuple(m) for m in means}) == 4


def test_synth_deterministic():
    a = data.synth_gaussian_mixture(5, 8, [10, 8, 6, 4, 2], seed=3)
    b = data.synth_gaussian_mixture(5, 8, [10, 8, 6, 4, 2], seed=3)
    assert a.x.tobytes() == b.x.tobytes() and a.y.tobytes() == b.y.tobytes()


def test_synth_realized_ir():
    counts = data.longtail_counts(1000, 10, 10)
    ds = data.synth_gaussian_mixture(10, 8, counts, seed=0)
    assert ds.class_counts.tolist() == counts
    assert ds.ir == pytest.approx(10, abs=0.05)


def test_synth_test_split_shares_means():
    train = data.synth_gaussian_mixture(3, 4, [5, 5, 5], seed=1, sigma=0.0, split=0)
    test = data.synth_gaussian_mixture(3, 4, [5, 5, 5], seed=1, sigma=0.0, split=1)
    assert set(map(tuple, train.x)) == set(map(tuple, test.x))


def test_synth_rejects_small_dim():
    with pytest.raises(ValueError):
        data.synth_gaussian_mixture(3, 1, [1, 1, 1], seed=0)


def test_binary_imbalance():
    counts = data.binary_imbalance_counts(5000, 100, 10, {0, 7, 8})
    assert [counts[c] for c in (0, 7, 8)] == [50, 50, 50]
    assert all(counts[c] == 5000 for c in range(10) if c not in (0, 7, 8))
    assert data.binary_imbalance_counts(100, 1, 4, {1}) == [100] * 4
    with pytest.raises(ValueError):
        data.binary_imbalance_counts(5000, 100, 10, set())
    with pytest.raises(ValueError):
        data.binary_imbalance_counts(5000, 100, 3, {0, 1, 2})


@pytest.fixture
def longtail_ds():
    return data.synth_gaussian_mixture(10, 4, data.longtail_counts(300, 50, 10), seed=2)


def test_partition_single_client(longtail_ds):
    (shard,) = data.dirichlet_partition(longtail_ds, 1, 0.5, seed=0)
    assert len(shard) == len(longtail_ds)
    np.testing.assert_array_equal(shard.indices, np.arange(len(longtail_ds)))


def test_partition_conserves_and_is_disjoint(longtail_ds):
    for seed in range(20):
        shards = data.dirichlet_partition(longtail_ds, 7, 0.3, seed)
        total = sum(s.per_class_counts for s in shards)
        np.testing.assert_array_equal(total, longtail_ds.class_counts)
        idx = np.concatenate([s.indices for s in shards])
        assert np.array_equal(np.sort(idx), np.arange(len(longtail_ds)))
        for s in shards:
            np.testing.assert_array_equal(s.x, longtail_ds.x[s.indices])
            assert s.label_set == {c for c in range(10) if s.per_class_counts[c] > 0}


def test_partition_concentrates_for_large_alpha():
    ds = data.synth_gaussian_mixture(3, 4, [1000] * 3, seed=0)
    for seed in range(3):
        for s in data.dirichlet_partition(ds, 10, 10000.0, seed):
            assert np.all(np.abs(s.per_class_counts - 100) <= 15)


def test_partition_rejects_bad_alpha(longtail_ds):
    with pytest.raises(ValueError):
        data.dirichlet_partition(longtail_ds, 3, 0.0, 0)


def test_largest_remainder_exact():
    sizes = data.largest_remainder(10, np.array([0.33, 0.33, 0.34]))
    assert sizes.tolist() == [3, 3, 4]
    assert data.largest_remainder(7, np.full(3, 1 / 3)).sum() == 7


def _shard(counts):
    y = np.repeat(np.arange(len(counts)), counts)
    x = np.arange(y.size, dtype=float)[:, None] * np.ones((1, 2))
    return data.ClientShard(0, x, y, len(counts), np.arange(y.size))


def test_balanced_subset_threshold():
    _, l_bal = data.sample_balanced_subset(_shard([10, 5, 0]), 8, stream(0, 5))
    assert l_bal == {0}


def test_balanced_subset_t1_is_label_set():
    shard = _shard([10, 5, 0, 1])
    _, l_bal = data.sample_balanced_subset(shard, 1, stream(0, 5))
    assert l_bal == shard.label_set == {0, 1, 3}


def test_balanced_subset_reseeded_per_round():
    shard = _shard([40, 30, 2])
    a, la = data.sample_balanced_subset(shard, 4, stream(0, 5, 1))
    b, lb = data.sample_balanced_subset(shard, 4, stream(0, 5, 2))
    assert la == lb == {0, 1}
    assert any(not np.array_equal(a.per_class[c], b.per_class[c]) for c in la)


def test_balanced_subset_legal_members():
    shard = _shard([12, 9, 3])
    for r in range(10):
        sub, l_bal = data.sample_balanced_subset(shard, 3, stream(1, 5, r))
        for c, rows in sub.per_class.items():
            assert rows.size == 3 and np.unique(rows).size == 3
            assert (shard.y[rows] == c).all()


def test_infinite_threshold():
    sub, l_bal = data.sample_balanced_subset(_shard([50, 50]), None, stream(0, 5))
    assert l_bal == set() and sub.per_class == {}


def test_csv_roundtrip(tmp_path):
    p = tmp_path / "d.csv"
    p.write_text("label,f0,f1\n0,1.5,2\n2,-1,0.25\n")
    ds = data.load_csv_dataset(p)
    assert ds.n_classes == 3 and ds.dim == 2
    np.testing.assert_array_equal(ds.x, [[1.5, 2.0], [-1.0, 0.25]])
    bad = tmp_path / "bad.csv"
    bad.write_text("label,f0,f1\n0,1\n")
    with pytest.raises(ValueError, match=":2:"):
        data.load_csv_dataset(bad)
    with pytest.raises(ValueError, match=":1:"):
        (tmp_path / "h.csv").write_text("y,a,b\n")
        data.load_csv_dataset(tmp_path / "h.csv")


def test_shard_manifest(longtail_ds):
    shards = data.dirichlet_partition(longtail_ds, 3, 1.0, 0)
    rows = [json.loads(line) for line in data.shard_manifest(shards).splitlines()]
    assert [r["client_id"] for r in rows] == [0, 1, 2]
    assert np.sum([r["per_class_counts"] for r in rows], axis=0).tolist() == longtail_ds.class_counts.tolist()
