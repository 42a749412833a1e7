"""Histogram-based gradient boosted decision trees.

Binary logistic and multiclass softmax objectives, leaf-wise growth,
deterministic training. Hot loops live in :mod:`malpipe.kernels`.
"""
from __future__ import annotations

import io
import itertools
import struct
from dataclasses import dataclass, field, fields, replace
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .vectorizer import LayoutMismatch

BINARY = "binary"
MULTICLASS = "multiclass"
_OBJECTIVES = (BINARY, MULTICLASS)

_PREDICT_CHUNK = 4096

MODEL_MAGIC = b"GBDT"
MODEL_FORMAT_VERSION = 1


class DegenerateLabels(ValueError):
    """Training labels contain fewer than two classes."""


class ModelFormatError(OSError):
    """A serialized model is truncated, corrupt or of another version."""


@dataclass
class TrainParams:
    iterations: int = 100
    learning_rate: float = 0.1
    max_leaves: int = 31
    min_samples_leaf: int = 20
    l2: float = 1.0
    max_bins: int = 255
    early_stopping_rounds: Optional[int] = None

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if value is None and f.name == "early_stopping_rounds":
                continue
            if not value > 0:
                raise ValueError(f"{f.name} must be positive, got {value!r}")
        if self.max_bins > 255:
            raise ValueError("max_bins must be <= 255")
        if self.max_leaves < 2:
            raise ValueError("max_leaves must be >= 2")


# -- binning -----------------------------------------------------------------

@dataclass
class BinnedMatrix:
    """Per-feature thresholds and bin indices; ``data`` is feature-major."""

    edges: list[np.ndarray]
    data: np.ndarray  # uint8, (cols, rows)

    @property
    def rows(self) -> int:
        return self.data.shape[1]

    @property
    def cols(self) -> int:
        return self.data.shape[0]

    @property
    def n_bins(self) -> np.ndarray:
        return np.array([len(e) + 1 for e in self.edges], dtype=np.intp)


def feature_edges(column: np.ndarray, max_bins: int) -> np.ndarray:
    """Thresholds between distinct values, chosen by rank.

    Only the ordering of the values matters, so a strictly increasing
    transform of the column moves the thresholds but not the bin indices.
    """
    u, c = np.unique(column, return_counts=True)
    if len(u) <= 1:
        return np.empty(0)
    if len(u) <= max_bins:
        idx = np.arange(len(u) - 1)
    else:
        cum = np.cumsum(c)
        targets = cum[-1] * np.arange(1, max_bins) / max_bins
        idx = np.unique(np.searchsorted(cum, targets, side="left"))
        idx = idx[idx < len(u) - 1]
    lo, hi = u[idx], u[idx + 1]
    mid = lo + (hi - lo) / 2
    # keep lo <= edge < hi even when the midpoint rounds up
    return np.where((mid >= hi) | ~np.isfinite(mid), lo, mid)


def _as_matrix(X) -> np.ndarray:
    X = np.asarray(X)
    if not np.issubdtype(X.dtype, np.floating):
        X = X.astype(np.float64)
    return X


def apply_bins(X: np.ndarray, edges: Sequence[np.ndarray]) -> np.ndarray:
    X = _as_matrix(X)
    out = np.empty((X.shape[1], X.shape[0]), dtype=np.uint8)
    for j, e in enumerate(edges):
        out[j] = np.searchsorted(e, X[:, j].astype(np.float64), side="left") if len(e) else 0
    return out


def quantize(X: np.ndarray, max_bins: int = 255) -> BinnedMatrix:
    X = _as_matrix(X)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ValueError("quantize needs a nonempty 2-D matrix")
    if not 1 <= max_bins <= 255:
        raise ValueError("max_bins must be in [1, 255]")
    edges = [feature_edges(X[:, j].astype(np.float64), max_bins) for j in range(X.shape[1])]
    return BinnedMatrix(edges, apply_bins(X, edges))


# -- objectives ----------------------------------------------------------------

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _softmax(s):
    z = s - s.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def grad_hess(objective: str, scores: np.ndarray, labels: np.ndarray):
    """First and (diagonal) second derivatives of the log loss."""
    labels = np.asarray(labels)
    if objective == BINARY:
        p = _sigmoid(np.asarray(scores, dtype=np.float64))
        return p - labels, p * (1.0 - p)
    if objective == MULTICLASS:
        p = _softmax(np.asarray(scores, dtype=np.float64))
        onehot = np.zeros_like(p)
        onehot[np.arange(len(labels)), labels] = 1.0
        return p - onehot, p * (1.0 - p)
    raise ValueError(f"unknown objective {objective!r}")


def log_loss(objective: str, scores: np.ndarray, labels: np.ndarray, reduce: bool = True):
    labels = np.asarray(labels)
    if objective == BINARY:
        per = np.logaddexp(0.0, scores) - labels * scores
    else:
        m = scores.max(axis=1)
        lse = m + np.log(np.exp(scores - m[:, None]).sum(axis=1))
        per = lse - scores[np.arange(len(labels)), labels]
    return float(per.mean()) if reduce else per


# -- split finding -------------------------------------------------------------

@dataclass
class SplitCandidate:
    feature: int
    threshold: int
    gain: float
    left: tuple[float, float, float]
    right: tuple[float, float, float]


def best_split(hist: np.ndarray, l2: float, min_samples_leaf: int, n_bins: Optional[int] = None) -> Optional[SplitCandidate]:
    """Best threshold for one feature's (sum g, sum h, count) histogram.

    ``bins <= threshold`` go left. Returns None unless some split has positive gain.
    """
    hist = np.asarray(hist, dtype=np.float64)
    n_bins = hist.shape[0] if n_bins is None else n_bins
    found = _best_of(hist[None], np.array([n_bins]), l2, min_samples_leaf)
    if found is None:
        return None
    _, t, gain = found
    left = hist[: t + 1].sum(axis=0)
    right = hist[t + 1 :].sum(axis=0)
    return SplitCandidate(0, t, gain, tuple(left), tuple(right))


def _best_of(hist, n_bins, l2, min_samples_leaf):
    hist = np.ascontiguousarray(hist, dtype=np.float64)
    n_bins = np.ascontiguousarray(n_bins, dtype=np.intp)
    f, t, gain = kernels.find_best_split(hist, n_bins, float(l2), float(min_samples_leaf))
    if f < 0 or not gain > 0.0:
        return None
    return int(f), int(t), float(gain)


# -- trees -------------------------------------------------------------------

@dataclass
class Tree:
    feature: np.ndarray  # -1 marks a leaf
    threshold_bin: np.ndarray
    threshold_value: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray
    count: np.ndarray

    @property
    def n_leaves(self) -> int:
        return int((self.feature < 0).sum())

    def predict(self, X: np.ndarray) -> np.ndarray:
        return kernels.predict_raw(self.feature, self.threshold_value, self.left, self.right, self.value, X)

    def predict_binned(self, binned: np.ndarray) -> np.ndarray:
        return kernels.predict_binned(self.feature, self.threshold_bin, self.left, self.right, self.value, binned)

    @classmethod
    def leaf(cls, value: float, count: int = 0) -> "Tree":
        return cls(
            np.array([-1], dtype=np.intp), np.zeros(1, dtype=np.intp), np.zeros(1),
            np.full(1, -1, dtype=np.intp), np.full(1, -1, dtype=np.intp),
            np.array([value], dtype=np.float64), np.zeros(1), np.array([count], dtype=np.int64),
        )


@dataclass
class _Leaf:
    node: int
    rows: np.ndarray
    hist: np.ndarray
    split: Optional[tuple[int, int, float]]


def train_tree(binned: BinnedMatrix, g: np.ndarray, h: np.ndarray, params: TrainParams) -> tuple[Tree, np.ndarray]:
    """Grow one tree leaf-wise; returns the tree and each row's leaf value."""
    g = np.ascontiguousarray(g, dtype=np.float64)
    h = np.ascontiguousarray(h, dtype=np.float64)
    n_bins_all = binned.n_bins
    active = np.flatnonzero(n_bins_all > 1).astype(np.intp)
    n_bins = n_bins_all[active]
    width = int(n_bins.max()) if len(active) else 1
    data = binned.data
    lam, msl = params.l2, params.min_samples_leaf

    feature, thr, left, right, count, gain = [-1], [0], [-1], [-1], [binned.rows], [0.0]
    rows0 = np.arange(binned.rows, dtype=np.intp)
    node_rows = {0: rows0}

    def make_leaf(node, rows, hist):
        found = _best_of(hist, n_bins, lam, msl) if len(active) else None
        return _Leaf(node, rows, hist, found)

    leaves = [make_leaf(0, rows0, kernels.build_histogram(data, rows0, g, h, active, width))]
    n_leaves = 1
    while n_leaves < params.max_leaves:
        candidates = [lf for lf in leaves if lf.split is not None]
        if not candidates:
            break
        # highest gain first, earliest node on ties
        best = max(candidates, key=lambda lf: (lf.split[2], -lf.node))
        fa, t, split_gain = best.split
        f = int(active[fa])
        mask = data[f, best.rows] <= t
        lrows, rrows = best.rows[mask], best.rows[~mask]
        if len(lrows) <= len(rrows):
            lhist = kernels.build_histogram(data, lrows, g, h, active, width)
            rhist = best.hist - lhist
        else:
            rhist = kernels.build_histogram(data, rrows, g, h, active, width)
            lhist = best.hist - rhist
        lnode, rnode = len(feature), len(feature) + 1
        feature[best.node], thr[best.node], gain[best.node] = f, t, split_gain
        left[best.node], right[best.node] = lnode, rnode
        for rows in (lrows, rrows):
            feature.append(-1)
            thr.append(0)
            left.append(-1)
            right.append(-1)
            count.append(len(rows))
            gain.append(0.0)
        leaves.remove(best)
        leaves.append(make_leaf(lnode, lrows, lhist))
        leaves.append(make_leaf(rnode, rrows, rhist))
        n_leaves += 1

    value = np.zeros(len(feature))
    row_values = np.zeros(binned.rows)
    for lf in leaves:
        v = -g[lf.rows].sum() / (h[lf.rows].sum() + lam)
        value[lf.node] = v
        row_values[lf.rows] = v
    feature_arr = np.array(feature, dtype=np.intp)
    thr_arr = np.array(thr, dtype=np.intp)
    thr_value = np.array(
        [binned.edges[fi][ti] if fi >= 0 else 0.0 for fi, ti in zip(feature, thr)], dtype=np.float64
    )
    tree = Tree(
        feature_arr, thr_arr, thr_value,
        np.array(left, dtype=np.intp), np.array(right, dtype=np.intp),
        value, np.array(gain), np.array(count, dtype=np.int64),
    )
    return tree, row_values


# -- model ---------------------------------------------------------------------

@dataclass
class GbdtModel:
    objective: str
    n_classes: int
    n_features: int
    params: TrainParams
    base_scores: np.ndarray
    edges: list[np.ndarray]
    trees: list[Tree] = field(default_factory=list)
    layout_version: int = 1

    @property
    def trees_per_iteration(self) -> int:
        return 1 if self.objective == BINARY else self.n_classes

    @property
    def iterations(self) -> int:
        return len(self.trees) // self.trees_per_iteration

    def _check(self, X) -> np.ndarray:
        X = _as_matrix(X)
        if X.ndim == 1:
            X = X[None, :]
        if X.ndim != 2 or X.shape[1] != self.n_features:
            raise LayoutMismatch(f"expected {self.n_features} features, got {X.shape[-1]}")
        return X

    def raw_scores(self, X) -> np.ndarray:
        X = self._check(X)
        k = self.trees_per_iteration
        scores = np.tile(self.base_scores, (X.shape[0], 1))
        for start in range(0, X.shape[0], _PREDICT_CHUNK):
            chunk = np.ascontiguousarray(X[start : start + _PREDICT_CHUNK], dtype=np.float64)
            view = scores[start : start + _PREDICT_CHUNK]
            for i, tree in enumerate(self.trees):
                view[:, i % k] += self.params.learning_rate * tree.predict(chunk)
        return scores[:, 0] if self.objective == BINARY else scores

    def predict_proba(self, X) -> np.ndarray:
        scores = self.raw_scores(X)
        if self.objective == BINARY:
            p = _sigmoid(scores)
            return np.column_stack([1.0 - p, p])
        return _softmax(scores)

    def importance(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-feature (split count, total gain) over all kept trees."""
        splits = np.zeros(self.n_features, dtype=np.int64)
        gain = np.zeros(self.n_features)
        for tree in self.trees:
            internal = tree.feature >= 0
            np.add.at(splits, tree.feature[internal], 1)
            np.add.at(gain, tree.feature[internal], tree.gain[internal])
        return splits, gain


def predict(model: GbdtModel, X) -> np.ndarray:
    return model.predict_proba(X)


def _base_scores(objective, y, n_classes):
    if objective == BINARY:
        p = float(np.clip(y.mean(), 1e-6, 1 - 1e-6))
        return np.array([np.log(p / (1 - p))])
    prior = np.bincount(y, minlength=n_classes) / len(y)
    return np.log(np.clip(prior, 1e-6, None))


def train(
    X,
    y,
    objective: str = BINARY,
    params: Optional[TrainParams] = None,
    validation: Optional[tuple] = None,
    n_classes: Optional[int] = None,
    layout_version: int = 1,
) -> GbdtModel:
    """Fit a boosted ensemble on a dense matrix and integer labels.

    With ``params.early_stopping_rounds`` and a ``validation`` pair, training
    stops once validation log loss has not improved for that many rounds and
    the best iteration is kept.
    """
    params = params or TrainParams()
    if objective not in _OBJECTIVES:
        raise ValueError(f"unknown objective {objective!r}")
    X = _as_matrix(X)
    y = np.asarray(y, dtype=np.intp)
    if X.ndim != 2 or X.shape[0] != y.shape[0] or X.shape[0] == 0:
        raise ValueError("X must be 2-D with one label per row")
    if len(np.unique(y)) < 2:
        raise DegenerateLabels("training labels hold a single class")
    if objective == BINARY:
        if not set(np.unique(y)) <= {0, 1}:
            raise ValueError("binary labels must be 0/1")
        n_classes = 2
    else:
        n_classes = int(n_classes or y.max() + 1)
        if y.min() < 0 or y.max() >= n_classes:
            raise ValueError("multiclass labels out of range")

    binned = quantize(X, params.max_bins)
    model = GbdtModel(objective, n_classes, X.shape[1], params, _base_scores(objective, y, n_classes), binned.edges,
                      layout_version=layout_version)
    k = model.trees_per_iteration
    scores = np.tile(model.base_scores, (len(y), 1))

    val = None
    if validation is not None and params.early_stopping_rounds:
        Xv, yv = _as_matrix(validation[0]), np.asarray(validation[1], dtype=np.intp)
        if len(yv):
            val = (apply_bins(Xv, binned.edges), yv, np.tile(model.base_scores, (len(yv), 1)))
    best_loss, best_iter = np.inf, -1

    for it in range(params.iterations):
        if objective == BINARY:
            g, h = grad_hess(objective, scores[:, 0], y)
            g, h = g[:, None], h[:, None]
        else:
            g, h = grad_hess(objective, scores, y)
        for c in range(k):
            tree, row_values = train_tree(binned, g[:, c], h[:, c], params)
            model.trees.append(tree)
            scores[:, c] += params.learning_rate * row_values
            if val is not None:
                val[2][:, c] += params.learning_rate * tree.predict_binned(val[0])
        if val is not None:
            vs = val[2][:, 0] if objective == BINARY else val[2]
            loss = log_loss(objective, vs, val[1])
            if loss < best_loss:
                best_loss, best_iter = loss, it
            elif it - best_iter >= params.early_stopping_rounds:
                break
    if val is not None and best_iter >= 0:
        del model.trees[(best_iter + 1) * k :]
    return model


def grid_search(X, y, objective, base: TrainParams, grid: dict[str, list], validation, n_classes=None,
                layout_version: int = 1) -> tuple[TrainParams, GbdtModel]:
    """Exhaustive search over a small parameter grid by validation log loss."""
    if not grid:
        return base, train(X, y, objective, base, validation, n_classes, layout_version)
    names = sorted(grid)
    best = None
    Xv, yv = validation
    for combo in itertools.product(*(grid[n] for n in names)):
        params = replace(base, **dict(zip(names, combo)))
        model = train(X, y, objective, params, validation, n_classes, layout_version)
        p = model.predict_proba(Xv)
        loss = -np.mean(np.log(np.clip(p[np.arange(len(yv)), yv], 1e-15, None)))
        if best is None or loss < best[0]:
            best = (loss, params, model)
    return best[1], best[2]


# -- importance ----------------------------------------------------------------

def block_name(index_name: str) -> str:
    """Manifest block of an index name: ``sections.entropy_hashed[17]`` -> ``sections.entropy_hashed``."""
    return index_name.split("[", 1)[0]


def feature_importance(model: GbdtModel, manifest: Sequence[tuple[int, str]]):
    """Ranked per-feature (name, gain, splits) plus the per-block roll-up."""
    splits, gain = model.importance()
    names = [name for _, name in manifest]
    if len(names) != model.n_features:
        raise LayoutMismatch("manifest does not match the model's feature count")
    order = sorted(range(len(names)), key=lambda i: (-gain[i], i))
    ranked = [(names[i], float(gain[i]), int(splits[i])) for i in order]
    blocks: dict[str, list] = {}
    for i, name in enumerate(names):
        entry = blocks.setdefault(block_name(name), [0.0, 0, i])
        entry[0] += float(gain[i])
        entry[1] += int(splits[i])
    rollup = sorted(blocks.items(), key=lambda kv: (-kv[1][0], kv[1][2]))
    return ranked, [(b, v[0], v[1]) for b, v in rollup]


# -- serialization -------------------------------------------------------------

def _pack_array(buf, arr, dtype):
    a = np.ascontiguousarray(arr, dtype=dtype)
    buf.write(struct.pack("<I", a.size))
    buf.write(a.tobytes())


class _Cursor:
    def __init__(self, blob: bytes):
        self.blob, self.pos = blob, 0

    def take(self, n: int) -> bytes:
        if n < 0 or self.pos + n > len(self.blob):
            raise ModelFormatError("model blob is truncated")
        out = self.blob[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype) -> np.ndarray:
        (n,) = self.unpack("<I")
        dt = np.dtype(dtype)
        return np.frombuffer(self.take(n * dt.itemsize), dtype=dt).copy()


def model_to_bytes(model: GbdtModel) -> bytes:
    p = model.params
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<IIBII", MODEL_FORMAT_VERSION, model.layout_version,
                          _OBJECTIVES.index(model.objective), model.n_classes, model.n_features))
    buf.write(struct.pack("<IdIIdIi", p.iterations, p.learning_rate, p.max_leaves, p.min_samples_leaf, p.l2,
                          p.max_bins, -1 if p.early_stopping_rounds is None else p.early_stopping_rounds))
    _pack_array(buf, model.base_scores, "<f8")
    buf.write(struct.pack("<I", len(model.edges)))
    for e in model.edges:
        _pack_array(buf, e, "<f8")
    buf.write(struct.pack("<I", len(model.trees)))
    for t in model.trees:
        _pack_array(buf, t.feature, "<i4")
        _pack_array(buf, t.threshold_bin, "<i4")
        _pack_array(buf, t.threshold_value, "<f8")
        _pack_array(buf, t.left, "<i4")
        _pack_array(buf, t.right, "<i4")
        _pack_array(buf, t.value, "<f8")
        _pack_array(buf, t.gain, "<f8")
        _pack_array(buf, t.count, "<u4")
    splits, gain = model.importance()
    _pack_array(buf, splits, "<u4")
    _pack_array(buf, gain, "<f8")
    return buf.getvalue()


def model_from_bytes(blob: bytes, expected_layout_version: Optional[int] = None) -> GbdtModel:
    cur = _Cursor(bytes(blob))
    if cur.take(4) != MODEL_MAGIC:
        raise ModelFormatError("not a GBDT model")
    version, layout_version, obj, n_classes, n_features = cur.unpack("<IIBII")
    if version != MODEL_FORMAT_VERSION:
        raise ModelFormatError(f"unsupported model format version {version}")
    if expected_layout_version is not None and layout_version != expected_layout_version:
        raise LayoutMismatch(f"model layout version {layout_version} != expected {expected_layout_version}")
    if obj >= len(_OBJECTIVES):
        raise ModelFormatError("unknown objective code")
    it, lr, leaves, msl, l2, max_bins, esr = cur.unpack("<IdIIdIi")
    params = TrainParams(it, lr, leaves, msl, l2, max_bins, None if esr < 0 else esr)
    base = cur.array("<f8")
    (n_edges,) = cur.unpack("<I")
    edges = [cur.array("<f8") for _ in range(n_edges)]
    (n_trees,) = cur.unpack("<I")
    trees = []
    for _ in range(n_trees):
        feature = cur.array("<i4").astype(np.intp)
        thr_bin = cur.array("<i4").astype(np.intp)
        thr_val = cur.array("<f8")
        left = cur.array("<i4").astype(np.intp)
        right = cur.array("<i4").astype(np.intp)
        value = cur.array("<f8")
        gain = cur.array("<f8")
        count = cur.array("<u4").astype(np.int64)
        n = len(feature)
        if any(len(a) != n for a in (thr_bin, thr_val, left, right, value, gain, count)) or n == 0:
            raise ModelFormatError("inconsistent tree arrays")
        internal = feature >= 0
        if (feature[internal] >= n_features).any() or (left[internal] >= n).any() or (right[internal] >= n).any():
            raise ModelFormatError("tree references out of range")
        trees.append(Tree(feature, thr_bin, thr_val, left, right, value, gain, count))
    cur.array("<u4")
    cur.array("<f8")
    if cur.pos != len(cur.blob):
        raise ModelFormatError("trailing bytes after model")
    if len(edges) != n_features:
        raise ModelFormatError("edge table does not match feature count")
    return GbdtModel(_OBJECTIVES[obj], n_classes, n_features, params, base, edges, trees, layout_version)


def save_model(model: GbdtModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path, expected_layout_version: Optional[int] = None) -> GbdtModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read(), expected_layout_version)
