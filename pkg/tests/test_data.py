import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from livar.data import (
    Dataset,
    class_skew,
    dirichlet_partition,
    load_csv,
    make_blobs,
    save_csv,
    train_test_split,
)
from livar.errors import PartitionError


class TestMakeBlobs:
    def test_counts(self):
        ds = make_blobs(5, 3, 10, 1.0, seed=0)
        assert len(ds) == 50
        assert np.bincount(ds.labels).tolist() == [10] * 5

    def test_deterministic(self):
        a, b = make_blobs(4, 3, 6, 0.7, seed=12), make_blobs(4, 3, 6, 0.7, seed=12)
        assert a.features.tobytes() == b.features.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()

    def test_zero_spread_collapses_to_mean(self):
        ds = make_blobs(3, 4, 5, 0.0, seed=1)
        for c in range(3):
            rows = ds.features[ds.labels == c]
            assert np.all(rows == rows[0])

    @pytest.mark.parametrize("args", [(1, 3, 5), (3, 3, 1), (3, 0, 5)])
    def test_invalid_sizes(self, args):
        with pytest.raises(ValueError):
            make_blobs(*args, spread=1.0, seed=0)

    def test_split_is_stratified(self):
        train, test = train_test_split(make_blobs(4, 2, 10, 1.0, seed=0), 3)
        assert np.bincount(test.labels).tolist() == [3] * 4
        assert np.bincount(train.labels).tolist() == [7] * 4


def check_partition(part, n):
    allidx = np.concatenate(part.client_indices)
    assert sorted(allidx.tolist()) == list(range(n))
    assert all(len(c) > 0 for c in part.client_indices)


class TestDirichletPartition:
    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 2**31), st.sampled_from([0.05, 0.2, 0.5, 1.0, 10.0]), st.integers(2, 8))
    def test_disjoint_cover(self, seed, beta, m):
        labels = make_blobs(6, 2, 20, 1.0, seed=1).labels
        check_partition(dirichlet_partition(labels, m, beta, seed), labels.size)

    def test_deterministic(self):
        labels = make_blobs(6, 2, 20, 1.0, seed=1).labels
        p1 = dirichlet_partition(labels, 5, 0.3, seed=9)
        p2 = dirichlet_partition(labels, 5, 0.3, seed=9)
        assert all(np.array_equal(a, b) for a, b in zip(p1.client_indices, p2.client_indices))

    def test_huge_beta_matches_global_mix(self):
        labels = make_blobs(5, 1, 2000, 1.0, seed=0).labels
        glob = np.bincount(labels) / labels.size
        for seed in range(20):
            part = dirichlet_partition(labels, 2, 1e6, seed)
            for idx in part.client_indices:
                local = np.bincount(labels[idx], minlength=5) / idx.size
                assert np.all(np.abs(local - glob) <= 0.10 * glob)

    def test_small_beta_concentrates_clients(self):
        labels = make_blobs(10, 1, 60, 1.0, seed=0).labels
        hits = 0
        for seed in range(20):
            part = dirichlet_partition(labels, 10, 0.05, seed)
            for idx in part.client_indices:
                top2 = np.sort(np.bincount(labels[idx], minlength=10))[-2:].sum()
                if top2 > 0.8 * idx.size:
                    hits += 1
                    break
        assert hits > 10

    def test_heterogeneity_decreases_with_beta(self):
        labels = make_blobs(10, 1, 60, 1.0, seed=0).labels
        skew = {b: np.mean([class_skew(dirichlet_partition(labels, 10, b, s), labels, 10)
                            for s in range(20)]) for b in (0.2, 1.0)}
        assert skew[0.2] > skew[1.0]

    def test_impossible_partition(self):
        with pytest.raises(PartitionError, match="larger"):
            dirichlet_partition(np.array([0, 0, 1, 1]), 4, 1e-3, seed=0)

    def test_too_few_samples(self):
        with pytest.raises(PartitionError):
            dirichlet_partition(np.array([0, 1]), 3, 1.0, seed=0)

    @pytest.mark.parametrize("m,beta", [(1, 1.0), (3, 0.0), (3, -1.0)])
    def test_invalid_args(self, m, beta):
        with pytest.raises(ValueError):
            dirichlet_partition(np.arange(10) % 2, m, beta, seed=0)


class TestCsv:
    def test_round_trip(self, tmp_path):
        ds = make_blobs(3, 4, 5, 1.3, seed=2)
        path = tmp_path / "d.csv"
        save_csv(path, ds)
        header = path.read_text().splitlines()[0]
        assert header == "f0,f1,f2,f3,label"
        back = load_csv(path)
        assert back.features.tobytes() == ds.features.tobytes()
        assert back.labels.tolist() == ds.labels.tolist()

    def test_bad_header(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("a,b\n1,2\n")
        with pytest.raises(ValueError):
            load_csv(path)

    def test_dataset_checks_lengths(self):
        with pytest.raises(ValueError):
            Dataset(np.zeros((3, 2)), np.zeros(2))
