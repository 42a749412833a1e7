import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

import oracles
from malpipe import gbdt
from malpipe.gbdt import (
    BINARY,
    MULTICLASS,
    DegenerateLabels,
    ModelFormatError,
    TrainParams,
    best_split,
    feature_importance,
    grad_hess,
    log_loss,
    quantize,
    train,
    train_tree,
)
from malpipe.vectorizer import LayoutMismatch


def blobs(n, k, d, seed, spread=2.0):
    rng = np.random.default_rng(seed)
    centers = rng.normal(0.0, spread, (k, d))
    y = rng.integers(0, k, n)
    return centers[y] + rng.normal(size=(n, d)), y


# -- quantize ------------------------------------------------------------------

def test_constant_feature_gets_one_bin():
    b = quantize(np.full((10, 1), 3.0))
    assert b.n_bins[0] == 1 and not b.data.any()


def test_few_distinct_values_keep_order():
    x = np.array([5.0, 1.0, 3.0, 1.0, 9.0, 3.0])[:, None]
    b = quantize(x)
    assert b.n_bins[0] == 4
    assert list(b.data[0]) == [2, 0, 1, 0, 3, 1]


def test_binning_is_capped():
    x = np.random.default_rng(0).normal(size=(5000, 1))
    b = quantize(x, 16)
    assert b.n_bins[0] <= 16
    assert np.all(np.diff(b.edges[0]) > 0)


@settings(max_examples=60)
@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 300), st.integers(1, 3)),
                  elements=st.floats(-1e6, 1e6, allow_nan=False)),
       st.integers(2, 255))
def test_binning_is_monotone(X, max_bins):
    b = quantize(X, max_bins)
    for j in range(X.shape[1]):
        order = np.argsort(X[:, j], kind="stable")
        assert np.all(np.diff(b.data[j][order].astype(int)) >= 0)
        assert b.data[j].max() < b.n_bins[j]
        assert np.all(np.diff(b.edges[j]) > 0)


# -- objectives ----------------------------------------------------------------

def test_grad_hess_examples():
    g, h = grad_hess(BINARY, np.array([0.0]), np.array([1]))
    assert (g[0], h[0]) == (-0.5, 0.25)
    g, h = grad_hess(MULTICLASS, np.zeros((1, 2)), np.array([0]))
    assert list(g[0]) == [-0.5, 0.5] and list(h[0]) == [0.25, 0.25]


def _rel(a, b):
    return np.abs(a - b) / np.maximum(np.abs(b), 1e-3)


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(0)
    eps = 1e-5
    worst = 0.0
    for _ in range(1000):
        s = rng.uniform(-5, 5, 1)
        y = rng.integers(0, 2, 1)
        g, h = grad_hess(BINARY, s, y)
        fd_g = (log_loss(BINARY, s + eps, y, False) - log_loss(BINARY, s - eps, y, False)) / (2 * eps)
        fd_h = (grad_hess(BINARY, s + eps, y)[0] - grad_hess(BINARY, s - eps, y)[0]) / (2 * eps)
        worst = max(worst, _rel(fd_g, g).max(), _rel(fd_h, h).max())

        k = int(rng.integers(2, 6))
        S = rng.uniform(-3, 3, (1, k))
        Y = rng.integers(0, k, 1)
        G, H = grad_hess(MULTICLASS, S, Y)
        for c in range(k):
            e = np.zeros((1, k))
            e[0, c] = eps
            fd_g = (log_loss(MULTICLASS, S + e, Y, False) - log_loss(MULTICLASS, S - e, Y, False)) / (2 * eps)
            fd_h = (grad_hess(MULTICLASS, S + e, Y)[0][0, c] - grad_hess(MULTICLASS, S - e, Y)[0][0, c]) / (2 * eps)
            worst = max(worst, _rel(fd_g, G[:, c]).max(), _rel(np.atleast_1d(fd_h), H[:, c]).max())
    assert worst < 1e-6


# -- split finding ---------------------------------------------------------------

def test_equal_gradients_do_not_split():
    hist = np.array([[1.0, 1.0, 10], [1.0, 1.0, 10], [1.0, 1.0, 10]])
    hist[:, 0] = 0.0
    assert best_split(hist, 1.0, 1) is None


def test_opposite_gradients_split_between():
    hist = np.array([[-5.0, 2.0, 30], [5.0, 2.0, 30]])
    s = best_split(hist, 1.0, 5)
    assert s is not None and s.threshold == 0 and s.gain > 0
    assert s.left == (-5.0, 2.0, 30.0) and s.right == (5.0, 2.0, 30.0)


def test_min_samples_leaf_blocks_split():
    hist = np.array([[-5.0, 2.0, 3], [5.0, 2.0, 30]])
    assert best_split(hist, 1.0, 5) is None


def _random_hist(rng, width):
    hist = np.zeros((width, 3))
    hist[:, 2] = rng.integers(0, 12, width)
    hist[:, 0] = rng.integers(-64, 64, width) / 16.0 * (hist[:, 2] > 0)
    hist[:, 1] = rng.integers(0, 64, width) / 32.0 * (hist[:, 2] > 0)
    return hist


def test_best_split_equals_exhaustive_scan():
    rng = np.random.default_rng(1)
    for _ in range(3000):
        width = int(rng.integers(1, 32))
        hist = _random_hist(rng, width)
        l2, msl = float(rng.choice([0.5, 1.0, 2.0])), int(rng.integers(1, 6))
        got = best_split(hist, l2, msl)
        f, t, gain = oracles.split_scan([hist.tolist()], [width], l2, msl)
        if gain > 0:
            assert got is not None and (got.threshold, got.gain) == (t, gain)
        else:
            assert got is None


def test_multi_feature_ties_go_to_lowest_feature():
    h = np.array([[-3.0, 1.0, 10], [3.0, 1.0, 10]])
    found = gbdt._best_of(np.stack([h, h, h]), np.array([2, 2, 2]), 1.0, 1)
    assert found[:2] == (0, 0)


# -- trees ---------------------------------------------------------------------

def test_unsplittable_data_gives_single_leaf():
    b = quantize(np.zeros((50, 2)))
    g, h = np.full(50, 0.3), np.full(50, 0.2)
    tree, values = train_tree(b, g, h, TrainParams(min_samples_leaf=1))
    assert tree.n_leaves == 1
    assert tree.value[0] == pytest.approx(-15.0 / (10.0 + 1.0))
    assert np.all(values == tree.value[0])


def test_step_data_splits_at_step():
    x = np.arange(100, dtype=float)[:, None]
    y = (x[:, 0] > 61.5).astype(float)
    b = quantize(x)
    g, h = grad_hess(BINARY, np.zeros(100), y)
    tree, _ = train_tree(b, g, h, TrainParams(max_leaves=2, min_samples_leaf=1))
    assert tree.n_leaves == 2 and tree.feature[0] == 0
    assert tree.threshold_bin[0] == 61  # bins 0..61 hold x <= 61
    assert 61 < tree.threshold_value[0] < 62


def test_leaf_count_bound():
    X, y = blobs(2000, 2, 5, 3, spread=0.3)
    b = quantize(X)
    g, h = grad_hess(BINARY, np.zeros(len(y)), y)
    for leaves in (2, 7, 31):
        tree, _ = train_tree(b, g, h, TrainParams(max_leaves=leaves, min_samples_leaf=1))
        assert tree.n_leaves <= leaves
        internal = tree.feature >= 0
        assert np.all(tree.left[internal] >= 0) and np.all(tree.right[internal] >= 0)
        assert np.isfinite(tree.value).all()


# -- training ------------------------------------------------------------------

def test_separable_set_reaches_full_training_accuracy():
    rng = np.random.default_rng(5)
    X = rng.uniform(-1, 1, (200, 2))
    y = (X[:, 0] + X[:, 1] > 0).astype(int)
    m = train(X, y, BINARY, TrainParams(iterations=50, min_samples_leaf=1))
    assert (m.predict_proba(X).argmax(1) == y).mean() == 1.0
    base = np.full(len(y), m.base_scores[0])
    assert log_loss(BINARY, m.raw_scores(X), y) < log_loss(BINARY, base, y)


def test_three_blob_benchmark():
    X, y = blobs(5000, 3, 20, 11)
    m = train(X[:4000], y[:4000], MULTICLASS, TrainParams(iterations=60), n_classes=3)
    assert (m.predict_proba(X[4000:]).argmax(1) == y[4000:]).mean() >= 0.95
    assert len(m.trees) == 60 * 3


def test_single_class_is_degenerate():
    with pytest.raises(DegenerateLabels):
        train(np.zeros((10, 2)), np.zeros(10, dtype=int))


def test_zero_tree_balanced_prior_is_half():
    X = np.zeros((4, 3))
    m = train(X, np.array([0, 1, 0, 1]), BINARY, TrainParams(iterations=1, min_samples_leaf=10))
    m.trees.clear()
    assert np.allclose(m.predict_proba(X), 0.5)


def test_probabilities_are_normalized():
    X, y = blobs(600, 4, 6, 2)
    m = train(X, y, MULTICLASS, TrainParams(iterations=10, min_samples_leaf=5))
    P = m.predict_proba(np.random.default_rng(0).normal(0, 5, (300, 6)))
    assert ((P >= 0) & (P <= 1)).all()
    assert np.abs(P.sum(1) - 1).max() < 1e-9


def test_early_stopping_keeps_best_iteration():
    X, y = blobs(800, 2, 5, 8, spread=0.4)
    params = TrainParams(iterations=200, min_samples_leaf=2, early_stopping_rounds=5, learning_rate=0.3)
    m = train(X[:400], y[:400], BINARY, params, validation=(X[400:], y[400:]))
    assert 0 < m.iterations < 200


def test_monotone_transform_preserves_predictions():
    X, y = blobs(1500, 3, 4, 9)
    T = np.sign(X) * X ** 2 + 3 * X  # strictly increasing per feature
    params = TrainParams(iterations=15, min_samples_leaf=5)
    a = train(X[:1000], y[:1000], MULTICLASS, params, n_classes=3)
    b = train(T[:1000], y[:1000], MULTICLASS, params, n_classes=3)
    for ta, tb in zip(a.trees, b.trees):
        assert np.array_equal(ta.feature, tb.feature) and np.array_equal(ta.threshold_bin, tb.threshold_bin)
    assert np.array_equal(a.predict_proba(X[1000:]).argmax(1), b.predict_proba(T[1000:]).argmax(1))


def test_retraining_is_bit_identical():
    X, y = blobs(500, 3, 5, 4)
    params = TrainParams(iterations=8, min_samples_leaf=3)
    a = gbdt.model_to_bytes(train(X, y, MULTICLASS, params, n_classes=3))
    b = gbdt.model_to_bytes(train(X, y, MULTICLASS, params, n_classes=3))
    assert a == b


def test_grid_search_picks_lowest_validation_loss():
    X, y = blobs(600, 2, 4, 6, spread=0.5)
    grid = {"learning_rate": [0.01, 0.3]}
    params, model = gbdt.grid_search(X[:300], y[:300], BINARY, TrainParams(iterations=10, min_samples_leaf=5),
                                     grid, (X[300:], y[300:]))
    assert params.learning_rate == 0.3 and model.params == params


def test_params_validation():
    with pytest.raises(ValueError):
        TrainParams(iterations=0)
    with pytest.raises(ValueError):
        TrainParams(max_bins=300)


# -- serialization -------------------------------------------------------------

def test_model_round_trip(tmp_path):
    X, y = blobs(400, 3, 5, 1)
    m = train(X, y, MULTICLASS, TrainParams(iterations=5, min_samples_leaf=5), n_classes=3)
    path = tmp_path / "m.gbdt"
    gbdt.save_model(m, path)
    raw = path.read_bytes()
    assert raw[:4] == b"GBDT"
    back = gbdt.load_model(path)
    assert np.array_equal(back.predict_proba(X), m.predict_proba(X))
    assert gbdt.model_to_bytes(back) == raw
    for cut in (3, 10, len(raw) // 2, len(raw) - 1):
        with pytest.raises(ModelFormatError):
            gbdt.model_from_bytes(raw[:cut])
    with pytest.raises(LayoutMismatch):
        gbdt.model_from_bytes(raw, expected_layout_version=2)


def test_predict_rejects_wrong_width():
    X, y = blobs(100, 2, 3, 0)
    m = train(X, y, BINARY, TrainParams(iterations=2, min_samples_leaf=5))
    with pytest.raises(LayoutMismatch):
        m.predict_proba(np.zeros((2, 4)))


# -- importance ----------------------------------------------------------------

def test_importance_of_zero_tree_model_is_zero():
    X, y = blobs(100, 2, 3, 0)
    m = train(X, y, BINARY, TrainParams(iterations=1, min_samples_leaf=5))
    m.trees.clear()
    splits, gain = m.importance()
    assert not splits.any() and not gain.any()


def test_single_split_gain_goes_to_its_feature():
    x = np.zeros((100, 3))
    x[:, 2] = np.arange(100)
    y = (x[:, 2] >= 50).astype(int)
    m = train(x, y, BINARY, TrainParams(iterations=1, max_leaves=2, min_samples_leaf=1))
    manifest = [(0, "a[0]"), (1, "a[1]"), (2, "b")]
    ranked, rollup = feature_importance(m, manifest)
    assert ranked[0][0] == "b" and ranked[0][2] == 1
    assert ranked[1][1] == ranked[2][1] == 0.0
    assert rollup[0] == ("b", ranked[0][1], 1) and rollup[1] == ("a", 0.0, 0)


def test_informative_feature_ranks_first():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(1000, 8))
    y = (X[:, 5] > 0.2).astype(int)
    m = train(X, y, BINARY, TrainParams(iterations=20, min_samples_leaf=5))
    ranked, _ = feature_importance(m, [(i, f"f[{i}]") for i in range(8)])
    assert ranked[0][0] == "f[5]"
