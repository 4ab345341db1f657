import numpy as np
import pytest

from todqos import rforest
from todqos.errors import DataError, SchemaError
from todqos.featureset import Dataset, FeatureConfig
from todqos.rforest import TIE_RTOL, Forest, ForestHyperparams, RegressionTree, fit, fit_tree


# -- independent reference ----------------------------------------------------


def _mean(vals):
    s = 0.0
    for v in vals:
        s += v
    return s / len(vals)


def _sse(vals):
    m = float(np.mean(vals))
    return float(((np.asarray(vals) - m) ** 2).sum())


def oracle_tree(X, y, idx, max_depth, min_leaf, depth=0):
    """Exhaustive CART: every feature, every midpoint between distinct values."""
    ys = [float(y[i]) for i in idx]
    node = {"value": _mean(ys), "n": len(idx)}
    if depth >= max_depth or len(idx) < 2 * min_leaf or max(ys) == min(ys):
        return node
    parent = _sse(ys)
    tol = TIE_RTOL * parent
    best = None
    for f in range(X.shape[1]):
        vals = sorted(set(float(X[i, f]) for i in idx))
        for a, b in zip(vals, vals[1:]):
            thr = (a + b) / 2
            if not thr < b:
                thr = a
            left = [i for i in idx if X[i, f] <= thr]
            right = [i for i in idx if X[i, f] > thr]
            if len(left) < min_leaf or len(right) < min_leaf:
                continue
            gain = parent - _sse(y[left]) - _sse(y[right])
            if best is None or gain > best[0] + tol:
                best = (gain, f, thr, left, right)
    if best is None or best[0] <= tol:
        return node
    _, f, thr, left, right = best
    node.update(feature=f, threshold=thr,
                left=oracle_tree(X, y, left, max_depth, min_leaf, depth + 1),
                right=oracle_tree(X, y, right, max_depth, min_leaf, depth + 1))
    return node


def oracle_predict(node, x):
    while "feature" in node:
        node = node["left"] if x[node["feature"]] <= node["threshold"] else node["right"]
    return node["value"]


def same_structure(tree: RegressionTree, node, i=0) -> bool:
    if tree.left[i] < 0:
        return "feature" not in node and tree.value[i] == node["value"] and tree.n[i] == node["n"]
    if "feature" not in node:
        return False
    return (tree.feature[i] == node["feature"] and tree.threshold[i] == node["threshold"]
            and same_structure(tree, node["left"], tree.left[i])
            and same_structure(tree, node["right"], tree.right[i]))


def random_instance(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(10, 201))
    p = int(rng.integers(1, 4))
    kind = seed % 3
    if kind == 0:
        X = rng.normal(size=(n, p))
    elif kind == 1:  # heavy ties in both features and labels
        X = rng.integers(0, 6, size=(n, p)).astype(float)
    else:
        X = np.round(rng.uniform(0, 10, size=(n, p)), 1)
    y = X @ rng.normal(size=p) + rng.normal(scale=0.5, size=n)
    if kind == 1:
        y = np.round(y)
    return X, y, int(rng.integers(1, 6)), int(rng.integers(2, 12))


def _ds(X, y, cols=None):
    n = len(y)
    cols = cols or tuple(f"v_c{i}" for i in range(X.shape[1]))
    return Dataset(np.asarray(X, float), np.asarray(y, float), np.arange(n, dtype=float),
                   np.zeros(n, dtype=int), np.array(["s"] * n, dtype=object), cols)


# -- tests --------------------------------------------------------------------


class TestOracle:
    @pytest.mark.parametrize("seed", range(25))
    def test_matches_exhaustive_cart(self, seed):
        X, y, min_leaf, depth = random_instance(seed)
        tree = fit_tree(X, y, mtry=X.shape[1], max_depth=depth, min_samples_leaf=min_leaf, seed=seed)
        ref = oracle_tree(X, y, list(range(len(y))), depth, min_leaf)
        assert same_structure(tree, ref)
        pred = tree.predict(X)
        assert all(pred[i] == oracle_predict(ref, X[i]) for i in range(len(y)))


class TestTree:
    def test_perfect_fit(self):
        x = np.arange(100, dtype=float)[:, None]
        t = fit_tree(x, x[:, 0], max_depth=50, min_samples_leaf=1)
        assert np.mean((t.predict(x) - x[:, 0]) ** 2) < 1e-20

    def test_leaf_means_within_range(self):
        rng = np.random.default_rng(1)
        X, y = rng.normal(size=(300, 3)), rng.normal(size=300)
        t = fit_tree(X, y, min_samples_leaf=3)
        leaves = np.flatnonzero(t.left < 0)
        assert np.all((t.value[leaves] >= y.min()) & (t.value[leaves] <= y.max()))
        internal = np.flatnonzero(t.left >= 0)
        assert np.all(t.right[internal] >= 0) and np.all(t.feature[internal] < 3)

    def test_stops_on_constant_labels(self):
        t = fit_tree(np.random.default_rng(0).normal(size=(50, 2)), np.full(50, 3.0))
        assert t.node_count == 1 and t.value[0] == 3.0

    def test_monotone_capacity(self):
        rng = np.random.default_rng(4)
        X = rng.uniform(size=(400, 3))
        y = np.sin(6 * X[:, 0]) + X[:, 1] ** 2 + 0.1 * rng.normal(size=400)
        mse = [np.mean((fit_tree(X, y, max_depth=d, min_samples_leaf=2, seed=1).predict(X) - y) ** 2)
               for d in range(0, 12)]
        assert all(b <= a + 1e-15 for a, b in zip(mse, mse[1:]))

    def test_rejects_nan(self):
        X = np.ones((5, 1))
        X[2, 0] = np.nan
        with pytest.raises(DataError):
            fit_tree(X, np.arange(5.0))


@pytest.fixture(scope="module")
def data():
    rng = np.random.default_rng(0)
    X = rng.uniform(size=(500, 4))
    y = 5 * X[:, 0] + np.where(X[:, 1] > 0.5, 3.0, 0.0) + 0.2 * rng.normal(size=500)
    return _ds(X, y)


class TestForest:

    def test_hyperparam_validation(self, data):
        with pytest.raises(DataError):
            fit(data, ForestHyperparams(n_trees=0))
        with pytest.raises(DataError):
            fit(data, ForestHyperparams(mtry=9))
        assert ForestHyperparams().resolved_mtry(22) == 8

    def test_mean_of_trees(self, data):
        f = fit(data, ForestHyperparams(n_trees=7, seed=2))
        per = f.predict_per_tree(data.X[:20])
        assert per.shape == (7, 20)
        assert np.allclose(f.predict(data.X[:20]), per.mean(axis=0))
        assert f.predict_spread(data.X[:20]) == pytest.approx(per.std(axis=0, ddof=1))

    def test_single_tree(self, data):
        f = fit(data, ForestHyperparams(n_trees=1))
        assert f.predict(data.X[3]) == f.trees[0].predict(data.X[3:4])[0]
        assert f.predict_spread(data.X[3]) == 0.0

    def test_spread_hand_value(self):
        a = RegressionTree(*[np.array(v) for v in ([-1], [0.0], [-1], [-1], [10.0], [1])])
        b = RegressionTree(*[np.array(v) for v in ([-1], [0.0], [-1], [-1], [20.0], [1])])
        fc = FeatureConfig("x", ("v_c0",))
        f = Forest([a, b], fc, ForestHyperparams(n_trees=2))
        assert f.predict_spread(np.array([0.0])) == pytest.approx(7.0710678118654755)
        assert Forest([b, a], fc, ForestHyperparams(n_trees=2)).predict_spread(np.array([0.0])) == \
            f.predict_spread(np.array([0.0]))
        same = Forest([a, a], fc, ForestHyperparams(n_trees=2))
        assert same.predict_spread(np.array([1.0])) == 0.0

    def test_schedule_independent(self, data):
        hp = ForestHyperparams(n_trees=6, seed=11)
        a = fit(data, hp, n_jobs=1)
        b = fit(data, hp, n_jobs=3)
        assert a.dumps() == b.dumps()
        assert fit(data, ForestHyperparams(n_trees=6, seed=12)).dumps() != a.dumps()

    def test_persistence_byte_stable(self, tmp_path, data):
        f = fit(data, ForestHyperparams(n_trees=3))
        p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
        f.save(p1)
        Forest.load(p1).save(p2)
        assert p1.read_bytes() == p2.read_bytes()
        g = Forest.load(p1)
        assert np.array_equal(g.predict(data.X), f.predict(data.X))
        assert g.training_manifest["dataset_sha256"] == data.digest()

    def test_feature_count_mismatch(self, data):
        f = fit(data, ForestHyperparams(n_trees=2))
        with pytest.raises(SchemaError):
            f.predict(np.zeros((2, 3)))

    def test_version_check(self, tmp_path, data):
        d = fit(data, ForestHyperparams(n_trees=1)).to_dict()
        d["version"] = 99
        with pytest.raises(SchemaError):
            Forest.from_dict(d)

    def test_accuracy_beats_mean(self, data):
        tr, te = data.take(np.arange(350)), data.take(np.arange(350, 500))
        f = fit(tr, ForestHyperparams(n_trees=20))
        err = np.mean(np.abs(f.predict(te.X) - te.y))
        assert err < 0.5 * np.mean(np.abs(te.y - tr.y.mean()))

    def test_constant_labels(self, data):
        const = data.take(np.arange(len(data)))
        const.y[:] = 4.5e6
        f = fit(const, ForestHyperparams(n_trees=4))
        assert np.all(f.predict(data.X) == 4.5e6)

    def test_within_label_range(self, data):
        f = fit(data, ForestHyperparams(n_trees=5))
        X = np.random.default_rng(9).uniform(-3, 4, size=(300, 4))
        pred = f.predict(X)
        assert pred.min() >= data.y.min() and pred.max() <= data.y.max()

    def test_module_helpers(self, data):
        f = fit(data, ForestHyperparams(n_trees=2))
        assert rforest.predict(f, data.X[0]) == f.predict(data.X[0])
        assert rforest.predict_spread(f, data.X[0]) == f.predict_spread(data.X[0])
