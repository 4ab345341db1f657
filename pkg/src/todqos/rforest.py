"""Random-forest regression: bagged CART trees grown by variance reduction.

Trees are grown by a numba kernel working on per-feature presorted sample
indices, so each level of the tree costs O(n * p) rather than a sort per node.
"""
from __future__ import annotations

import base64
import json
import logging
import math
import os
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from todqos.errors import DataError, SchemaError
from todqos.featureset import Dataset, FeatureConfig

log = logging.getLogger(__name__)

FORMAT = "todqos-forest"
FORMAT_VERSION = 1
# relative tolerance (of the node's SSE) under which two split gains tie
TIE_RTOL = 1e-9


@dataclass
class ForestHyperparams:
    n_trees: int = 100
    max_depth: int = 25
    min_samples_leaf: int = 5
    mtry: int | None = None  # None -> ceil(p / 3)
    bootstrap: bool = True
    seed: int = 0

    def resolved_mtry(self, p: int) -> int:
        m = self.mtry if self.mtry is not None else max(1, math.ceil(p / 3))
        if not 1 <= m <= p:
            raise DataError(f"mtry must lie in [1, {p}], got {m}")
        return m

    def validate(self) -> None:
        if self.n_trees < 1:
            raise DataError("n_trees must be >= 1")
        if self.min_samples_leaf < 1:
            raise DataError("min_samples_leaf must be >= 1")
        if self.max_depth < 0:
            raise DataError("max_depth must be >= 0")


@dataclass
class RegressionTree:
    """Flat node arrays; ``left == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    n: np.ndarray

    @property
    def node_count(self) -> int:
        return len(self.value)

    def is_leaf(self, i: int) -> bool:
        return self.left[i] < 0

    def predict(self, X) -> np.ndarray:
        X = np.ascontiguousarray(X, dtype=np.float64)
        return _predict_tree(X, self.feature, self.threshold, self.left, self.right, self.value)

    def depth(self) -> int:
        def rec(i):
            return 0 if self.left[i] < 0 else 1 + max(rec(self.left[i]), rec(self.right[i]))
        return rec(0)

    def to_dict(self) -> dict:
        return {name: _encode(getattr(self, name), dt) for name, dt in _NODE_FIELDS}

    @classmethod
    def from_dict(cls, d: dict) -> "RegressionTree":
        return cls(**{name: _decode(d[name], dt) for name, dt in _NODE_FIELDS})


# node arrays are stored as zlib-compressed little-endian blobs; trees of
# tens of thousands of nodes would otherwise dominate the model file
_NODE_FIELDS = (("feature", "<i4"), ("threshold", "<f8"), ("left", "<i4"),
                ("right", "<i4"), ("value", "<f8"), ("n", "<i4"))


def _encode(arr: np.ndarray, dtype: str) -> str:
    return base64.b64encode(zlib.compress(np.asarray(arr).astype(dtype).tobytes(), 6)).decode("ascii")


def _decode(text: str, dtype: str) -> np.ndarray:
    raw = np.frombuffer(zlib.decompress(base64.b64decode(text)), dtype=dtype)
    return raw.astype(np.float64 if dtype.endswith("f8") else np.int64)


# --------------------------------------------------------------------------
# kernels


@njit(cache=True, nogil=True)
def _grow(X, y, rows, mtry, max_depth, min_leaf, seed):
    np.random.seed(seed)
    n = rows.shape[0]
    p = X.shape[1]
    # one presorted index per feature, plus one in row order (index p) so
    # node statistics are summed in a fixed, data-independent order
    sorted_rows = np.empty((p + 1, n), dtype=np.int64)
    for f in range(p):
        order = np.argsort(X[rows, f], kind="mergesort")
        for i in range(n):
            sorted_rows[f, i] = rows[order[i]]
    sorted_rows[p] = np.sort(rows)
    cap = 2 * (n // max(min_leaf, 1)) + 3
    feat = np.full(cap, -1, dtype=np.int64)
    thr = np.zeros(cap)
    left = np.full(cap, -1, dtype=np.int64)
    right = np.full(cap, -1, dtype=np.int64)
    value = np.zeros(cap)
    count = np.zeros(cap, dtype=np.int64)
    goes_left = np.zeros(X.shape[0], dtype=np.bool_)
    buf = np.empty(n, dtype=np.int64)
    perm = np.arange(p)
    # explicit stack of (node, start, end, depth)
    st_node = np.empty(cap, dtype=np.int64)
    st_start = np.empty(cap, dtype=np.int64)
    st_end = np.empty(cap, dtype=np.int64)
    st_depth = np.empty(cap, dtype=np.int64)
    top = 0
    st_node[0] = 0
    st_start[0] = 0
    st_end[0] = n
    st_depth[0] = 0
    top = 1
    n_nodes = 1
    while top > 0:
        top -= 1
        node = st_node[top]
        start = st_start[top]
        end = st_end[top]
        depth = st_depth[top]
        m = end - start
        s = 0.0
        ymin = np.inf
        ymax = -np.inf
        for i in range(start, end):
            v = y[sorted_rows[p, i]]
            s += v
            if v < ymin:
                ymin = v
            if v > ymax:
                ymax = v
        mean = s / m
        value[node] = mean
        count[node] = m
        if depth >= max_depth or m < 2 * min_leaf or ymax == ymin:
            continue
        sse = 0.0
        for i in range(start, end):
            d = y[sorted_rows[p, i]] - mean
            sse += d * d
        tol = TIE_RTOL * sse
        # random feature order; constant features do not count toward mtry
        for i in range(p):
            j = i + np.random.randint(p - i)
            tmp = perm[i]
            perm[i] = perm[j]
            perm[j] = tmp
        best_gain = -1.0
        best_f = -1
        best_thr = 0.0
        best_nl = 0
        visited = 0
        for k in range(p):
            if visited >= mtry:
                break
            f = perm[k]
            if X[sorted_rows[f, start], f] == X[sorted_rows[f, end - 1], f]:
                continue
            visited += 1
            sl = 0.0
            for i in range(start, end - 1):
                sl += y[sorted_rows[f, i]] - mean
                nl = i - start + 1
                nr = m - nl
                if nl < min_leaf or nr < min_leaf:
                    continue
                a = X[sorted_rows[f, i], f]
                b = X[sorted_rows[f, i + 1], f]
                if not a < b:
                    continue
                gain = sl * sl * (1.0 / nl + 1.0 / nr)
                if gain > best_gain + tol or (gain >= best_gain - tol and f < best_f):
                    best_gain = gain
                    best_f = f
                    t = 0.5 * (a + b)
                    if not t < b:
                        t = a
                    best_thr = t
                    best_nl = nl
        if best_f < 0 or best_gain <= tol:
            continue
        for i in range(start, end):
            r = sorted_rows[p, i]
            goes_left[r] = X[r, best_f] <= best_thr
        for f in range(p + 1):
            li = start
            ri = 0
            for i in range(start, end):
                r = sorted_rows[f, i]
                if goes_left[r]:
                    sorted_rows[f, li] = r
                    li += 1
                else:
                    buf[ri] = r
                    ri += 1
            for i in range(ri):
                sorted_rows[f, li + i] = buf[i]
        lc = n_nodes
        rc = n_nodes + 1
        n_nodes += 2
        feat[node] = best_f
        thr[node] = best_thr
        left[node] = lc
        right[node] = rc
        mid = start + best_nl
        st_node[top] = rc
        st_start[top] = mid
        st_end[top] = end
        st_depth[top] = depth + 1
        top += 1
        st_node[top] = lc
        st_start[top] = start
        st_end[top] = mid
        st_depth[top] = depth + 1
        top += 1
    return (feat[:n_nodes].copy(), thr[:n_nodes].copy(), left[:n_nodes].copy(),
            right[:n_nodes].copy(), value[:n_nodes].copy(), count[:n_nodes].copy())


@njit(cache=True, nogil=True)
def _predict_tree(X, feat, thr, left, right, value):
    out = np.empty(X.shape[0])
    for r in range(X.shape[0]):
        i = 0
        while left[i] >= 0:
            if X[r, feat[i]] <= thr[i]:
                i = left[i]
            else:
                i = right[i]
        out[r] = value[i]
    return out


# --------------------------------------------------------------------------


def _tree_seeds(seed: int, index: int) -> tuple[np.random.Generator, int]:
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, index])
    kernel_seed = int(ss.generate_state(1, dtype=np.uint32)[0])
    return np.random.default_rng(ss), kernel_seed


def fit_tree(X, y, *, rows=None, mtry=None, max_depth=25, min_samples_leaf=5, seed=0) -> RegressionTree:
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.ascontiguousarray(y, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise DataError(f"X {X.shape} and y {y.shape} disagree")
    if X.shape[0] == 0:
        raise DataError("cannot fit a tree on zero samples")
    if not np.all(np.isfinite(X)):
        raise DataError("features contain missing or non-finite values")
    p = X.shape[1]
    rows = np.arange(X.shape[0], dtype=np.int64) if rows is None else np.asarray(rows, dtype=np.int64)
    mtry = p if mtry is None else int(mtry)
    arrays = _grow(X, y, rows, mtry, int(max_depth), int(min_samples_leaf), int(seed))
    return RegressionTree(*arrays)


@dataclass
class Forest:
    trees: list
    feature_config: FeatureConfig
    hyperparams: ForestHyperparams
    training_manifest: dict = field(default_factory=dict)

    @property
    def n_features(self) -> int:
        return self.feature_config.n_features

    def _matrix(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim == 1:
            X = X[None, :]
        if X.shape[1] != self.n_features:
            raise SchemaError(f"forest expects {self.n_features} features, got {X.shape[1]}")
        if not np.all(np.isfinite(X)):
            raise DataError("features contain missing or non-finite values")
        return np.ascontiguousarray(X)

    def predict_per_tree(self, X) -> np.ndarray:
        """(n_trees, n_rows) matrix of individual tree predictions."""
        X = self._matrix(X)
        return np.stack([t.predict(X) for t in self.trees])

    def predict(self, X) -> np.ndarray | float:
        single = np.asarray(X).ndim == 1
        out = self.predict_per_tree(X).mean(axis=0)
        return float(out[0]) if single else out

    def predict_spread(self, X) -> np.ndarray | float:
        """Sample std of the per-tree predictions (0 for one tree)."""
        single = np.asarray(X).ndim == 1
        per = self.predict_per_tree(X)
        out = per.std(axis=0, ddof=1) if per.shape[0] > 1 else np.zeros(per.shape[1])
        return float(out[0]) if single else out

    def predict_dataset(self, ds: Dataset) -> np.ndarray:
        if tuple(ds.columns) != tuple(self.feature_config.columns):
            raise SchemaError("dataset columns do not match the forest's feature config")
        return self.predict(ds.X)

    # -- persistence -----------------------------------------------------
    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "version": FORMAT_VERSION,
            "feature_config": self.feature_config.to_dict(),
            "hyperparams": asdict(self.hyperparams),
            "training_manifest": self.training_manifest,
            "trees": [t.to_dict() for t in self.trees],
        }

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())

    @classmethod
    def from_dict(cls, d: dict) -> "Forest":
        if d.get("format") != FORMAT:
            raise SchemaError("not a forest model file")
        if d.get("version") != FORMAT_VERSION:
            raise SchemaError(f"unsupported model version {d.get('version')}")
        return cls([RegressionTree.from_dict(t) for t in d["trees"]],
                   FeatureConfig.from_dict(d["feature_config"]),
                   ForestHyperparams(**d["hyperparams"]), d.get("training_manifest", {}))

    @classmethod
    def load(cls, path) -> "Forest":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _stamp() -> str:
    epoch = int(os.environ.get("SOURCE_DATE_EPOCH", "0"))
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(epoch))


def fit(train: Dataset, hp: ForestHyperparams | None = None, feature_config: FeatureConfig | None = None,
        n_jobs: int = 1, trained_at: str | None = None) -> Forest:
    """Grow ``hp.n_trees`` trees on bootstrap resamples of ``train``.

    ``train`` must already be projected onto ``feature_config``'s columns
    (see :func:`todqos.featureset.apply_config`). Per-tree randomness is
    seeded from ``(hp.seed, tree_index)``, so the result does not depend on
    ``n_jobs``.
    """
    hp = hp or ForestHyperparams()
    hp.validate()
    if len(train) == 0:
        raise DataError("cannot fit a forest on an empty dataset")
    if feature_config is None:
        feature_config = FeatureConfig("custom", tuple(train.columns))
    if tuple(train.columns) != tuple(feature_config.columns):
        raise SchemaError("training columns do not match the feature config")
    X = np.ascontiguousarray(train.X, dtype=np.float64)
    y = np.ascontiguousarray(train.y, dtype=np.float64)
    if not np.all(np.isfinite(X)):
        raise DataError("features contain missing or non-finite values")
    n, p = X.shape
    mtry = hp.resolved_mtry(p)

    def grow(i):
        rng, kseed = _tree_seeds(hp.seed, i)
        rows = rng.integers(0, n, size=n) if hp.bootstrap else np.arange(n)
        return RegressionTree(*_grow(X, y, rows.astype(np.int64), mtry, hp.max_depth,
                                     hp.min_samples_leaf, kseed)), rows

    if n_jobs > 1:
        with ThreadPoolExecutor(n_jobs) as ex:
            grown = list(ex.map(grow, range(hp.n_trees)))
    else:
        grown = [grow(i) for i in range(hp.n_trees)]
    trees = [t for t, _ in grown]
    manifest = {"dataset_sha256": train.digest(), "n_samples": int(n),
                "trained_at": trained_at or _stamp()}
    forest = Forest(trees, feature_config, hp, manifest)
    if hp.bootstrap and hp.n_trees > 1:
        oob = oob_error(X, y, grown)
        if oob is not None:
            log.info("OOB MAE %.1f, MAPE %.4f over %d samples", *oob)
    return forest


def oob_error(X, y, grown):
    n = len(y)
    acc = np.zeros(n)
    cnt = np.zeros(n)
    for tree, rows in grown:
        mask = np.ones(n, dtype=bool)
        mask[rows] = False
        idx = np.flatnonzero(mask)
        if idx.size:
            acc[idx] += tree.predict(X[idx])
            cnt[idx] += 1
    ok = cnt > 0
    if not ok.any():
        return None
    pred = acc[ok] / cnt[ok]
    err = np.abs(pred - y[ok])
    nz = y[ok] != 0
    mape = float(np.mean(err[nz] / np.abs(y[ok][nz]))) if nz.any() else float("nan")
    return float(err.mean()), mape, int(ok.sum())


def predict(forest: Forest, x) -> float:
    return forest.predict(x)


def predict_spread(forest: Forest, x) -> float:
    return forest.predict_spread(x)
