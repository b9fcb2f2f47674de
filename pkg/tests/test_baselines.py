import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairload.baselines import KnnModel, knn_fit, knn_predict
from fairload.errors import DataError, ParameterError
from fairload.pipeline import Dataset, normalize


def make_dataset(data, weights):
    n = len(weights)
    ids = [f"S{i}" for i in range(n)]
    return Dataset(np.asarray(data, float), ids, ["male"] * n, np.asarray(weights, float),
                   [f"t{i}" for i in range(n)], [0] * n, [(s, "male") for s in ids],
                   [f"c{j}" for j in range(np.shape(data)[2])])


def random_dataset(n=20, seed=0, L=4, C=2):
    rng = np.random.default_rng(seed)
    return make_dataset(rng.standard_normal((n, L, C)), rng.uniform(0, 30, n))


def test_fit_stores_every_row():
    ds = random_dataset(3)
    m = knn_fit(ds, k=3)
    assert m.features.shape == (3, 8)


def test_stored_rows_are_flattened_normalised_cycles():
    ds = normalize(random_dataset(10))
    m = knn_fit(ds)
    mean, std = ds.channel_stats
    raw = random_dataset(10).data
    for i in range(10):
        assert np.allclose(m.features[i], ((raw[i] - mean) / std).ravel(), atol=1e-9)


@pytest.mark.parametrize("k", [0, 4])
def test_k_must_lie_in_range(k):
    with pytest.raises(ParameterError):
        knn_fit(random_dataset(3), k=k)


def test_empty_dataset_rejected():
    with pytest.raises(ParameterError):
        knn_fit(random_dataset(3).select_subjects([]), k=1)


def test_query_equal_to_training_row_returns_its_target():
    ds = random_dataset(20)
    m = knn_fit(ds, k=1)
    for i in range(20):
        assert knn_predict(m, ds.data[i]) == ds.weights[i]


def test_k_equal_n_gives_global_mean():
    ds = random_dataset(7)
    m = knn_fit(ds, k=7)
    assert knn_predict(m, np.zeros((4, 2))) == pytest.approx(ds.weights.mean())


def brute_force(features, targets, q, k):
    d = [(float(np.sum((f - q) ** 2)), i) for i, f in enumerate(features)]
    d.sort()
    return float(np.mean([targets[i] for _, i in d[:k]]))


def test_matches_brute_force_search():
    ds = random_dataset(20, seed=3)
    m = knn_fit(ds, k=3)
    queries = np.random.default_rng(9).standard_normal((15, 4, 2))
    got = knn_predict(m, queries)
    for q, g in zip(queries, got):
        assert g == pytest.approx(brute_force(m.features, m.targets, q.ravel(), 3), abs=1e-12)


def test_ties_go_to_lower_training_index():
    data = np.array([[[1.0]], [[-1.0]], [[1.0]]])
    m = knn_fit(make_dataset(data, [10.0, 20.0, 30.0]), k=1)
    assert knn_predict(m, np.zeros((1, 1))) == 10.0


def test_query_shape_is_checked():
    m = knn_fit(random_dataset(5), k=2)
    with pytest.raises(DataError):
        knn_predict(m, np.zeros((3, 2)))


def test_non_finite_rows_rejected():
    with pytest.raises(DataError):
        KnnModel(np.array([[np.nan]]), np.array([1.0]), 1)


def test_save_and_load(tmp_path):
    ds = normalize(random_dataset(6))
    m = knn_fit(ds, k=2)
    m.save(tmp_path / "knn")
    assert {p.name for p in (tmp_path / "knn").iterdir()} == {"knn.json", "knn.f32"}
    back = KnnModel.load(tmp_path / "knn")
    assert back.k == 2 and np.array_equal(back.targets, m.targets)
    assert np.allclose(back.features, m.features, atol=1e-6)
    assert np.allclose(back.channel_stats[0], ds.channel_stats[0])


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 12))
def test_prediction_lies_within_target_range(seed, k):
    ds = random_dataset(12, seed=seed)
    m = knn_fit(ds, k=k)
    q = np.random.default_rng(seed + 1).standard_normal((5, 4, 2))
    p = knn_predict(m, q)
    assert np.all(p >= ds.weights.min() - 1e-12) and np.all(p <= ds.weights.max() + 1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_training_order_does_not_matter_with_distinct_distances(seed):
    ds = random_dataset(15, seed=seed)
    perm = np.random.default_rng(seed).permutation(15)
    a = knn_fit(ds, k=4)
    b = KnnModel(a.features[perm], a.targets[perm], 4)
    q = np.random.default_rng(seed + 7).standard_normal((3, 4, 2))
    assert np.allclose(knn_predict(a, q), knn_predict(b, q), atol=1e-12)
