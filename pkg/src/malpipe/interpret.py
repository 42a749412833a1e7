"""Per-stage importance tables and a 3-D principal-component embedding."""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .gbdt import GbdtModel, block_name, feature_importance
from .vectorizer import layout_manifest

TOP_BLOCKS = 5
BLOCK = "block"
GROUP = "group"


class RankDeficient(UserWarning):
    """Fewer nonzero-variance directions than requested components."""


# -- importance ----------------------------------------------------------------

def group_name(index_name: str) -> str:
    """Top-level feature group of an index name: ``header.timestamp`` -> ``header``."""
    return block_name(index_name).split(".", 1)[0]


@dataclass
class ImportanceTable:
    stage: str
    rows: list[tuple[str, float, int]]  # (block, summed gain, split count), all blocks, ranked
    total_gain: float

    def top(self, n: int = TOP_BLOCKS) -> list[tuple[str, float, int]]:
        return [r for r in self.rows[:n] if r[1] > 0.0]


def model_importance(model: Optional[GbdtModel], manifest, stage: str = "", level: str = BLOCK) -> ImportanceTable:
    """Roll per-feature gain up to manifest blocks (or top-level groups)."""
    if model is None:
        return ImportanceTable(stage, [], 0.0)
    if level not in (BLOCK, GROUP):
        raise ValueError(f"level must be {BLOCK!r} or {GROUP!r}")
    ranked, _ = feature_importance(model, manifest)
    key = block_name if level == BLOCK else group_name
    order: dict[str, int] = {}
    sums: dict[str, list] = {}
    for _, name in manifest:
        order.setdefault(key(name), len(order))
    for name, gain, splits in ranked:
        entry = sums.setdefault(key(name), [0.0, 0])
        entry[0] += gain
        entry[1] += splits
    rows = sorted(((b, v[0], v[1]) for b, v in sums.items()), key=lambda r: (-r[1], order[r[0]]))
    _, gain = model.importance()
    return ImportanceTable(stage, rows, float(gain.sum()))


def importance_tables(pipeline, manifest=None, level: str = BLOCK) -> dict[str, ImportanceTable]:
    """One table per stage; an untrained stage yields an empty table."""
    manifest = manifest if manifest is not None else layout_manifest(pipeline.layout)
    return {stage: model_importance(m, manifest, stage, level) for stage, m in pipeline.models.items()}


def format_tables(tables: dict[str, ImportanceTable], n: int = TOP_BLOCKS) -> str:
    lines = []
    for stage, table in tables.items():
        top = table.top(n)
        lines.append(f"{stage} (total gain {table.total_gain:.6g})")
        if not top:
            lines.append("  (no splits)")
            lines.append("")
            continue
        width = max(len("block"), *(len(b) for b, _, _ in top))
        lines.append(f"  {'rank':>4}  {'block':<{width}}  {'gain':>14}  {'share':>7}  {'splits':>6}")
        for rank, (b, g, s) in enumerate(top, 1):
            share = g / table.total_gain if table.total_gain > 0 else 0.0
            lines.append(f"  {rank:>4}  {b:<{width}}  {g:>14.6g}  {share:>7.1%}  {s:>6}")
        lines.append("")
    return "\n".join(lines)


def write_tables_csv(tables: dict[str, ImportanceTable], path, n: int = TOP_BLOCKS) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["stage", "rank", "block", "gain", "share", "splits"])
        for stage, table in tables.items():
            for rank, (b, g, s) in enumerate(table.top(n), 1):
                share = g / table.total_gain if table.total_gain > 0 else 0.0
                w.writerow([stage, rank, b, repr(g), f"{share:.6f}", s])


# -- embedding -----------------------------------------------------------------

@dataclass
class EmbeddingResult:
    coordinates: np.ndarray  # (n, m), m <= k
    component_vectors: np.ndarray  # (m, d), orthonormal rows
    explained_variance: np.ndarray  # (m,), non-increasing
    total_variance: float
    mean: np.ndarray
    rank_deficient: bool = False
    iterations: list[int] = field(default_factory=list)

    @property
    def components(self) -> int:
        return len(self.explained_variance)

    def residual(self, X) -> float:
        """Frobenius norm of the centered data left unexplained by the components."""
        Xc = np.asarray(X, dtype=np.float64) - self.mean
        return float(np.linalg.norm(Xc - self.coordinates @ self.component_vectors))


def _orthogonalize(v: np.ndarray, basis: list[np.ndarray]) -> np.ndarray:
    # two passes of classical Gram-Schmidt keep the basis orthogonal to working precision
    for _ in range(2):
        for b in basis:
            v = v - (b @ v) * b
    return v


def embed(X, k: int = 3, seed: int = 0, tol: float = 1e-9, max_iter: int = 1000) -> EmbeddingResult:
    """Top-``k`` principal directions by power iteration with deflation.

    Columns are mean-centered; constant columns are left out of the iteration
    and get zero weight. Each component is scaled so that its largest-magnitude
    entry is positive. When the data has fewer than ``k`` directions of
    nonzero variance, only those are returned and ``rank_deficient`` is set.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("embed needs a 2-D matrix")
    n, d = X.shape
    if k < 1:
        raise ValueError("k must be positive")
    if n < k:
        raise ValueError(f"need at least k={k} rows, got {n}")
    mean = X.mean(axis=0)
    Xc = X - mean
    live = np.flatnonzero(np.ptp(X, axis=0) > 0)
    A = Xc[:, live]
    denom = max(n - 1, 1)
    total = float((A * A).sum() / denom)
    # A^T A has spectral norm at most its trace; anything this far below it
    # after deflation is rounding noise, not a direction of the data
    noise = 1e-12 * total * denom

    rng = np.random.default_rng(seed)
    basis: list[np.ndarray] = []
    variances: list[float] = []
    iterations: list[int] = []
    for _ in range(min(k, len(live))):
        v = _orthogonalize(rng.standard_normal(len(live)), basis)
        v /= np.linalg.norm(v)
        used = max_iter
        for it in range(1, max_iter + 1):
            w = _orthogonalize(A.T @ (A @ v), basis)
            norm = np.linalg.norm(w)
            if norm <= noise:
                v = None
                break
            w /= norm
            delta = min(np.linalg.norm(w - v), np.linalg.norm(w + v))
            v = w
            if delta < tol:
                used = it
                break
        if v is None:
            break
        v = _orthogonalize(v, basis)
        v /= np.linalg.norm(v)
        proj = A @ v
        var = float(proj @ proj / denom)
        if var * denom <= noise:
            break
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        basis.append(v)
        variances.append(var)
        iterations.append(used)

    m = len(basis)
    components = np.zeros((m, d))
    if m:
        components[:, live] = np.vstack(basis)
    rank_deficient = m < k
    if rank_deficient:
        warnings.warn(f"data has only {m} direction(s) of nonzero variance; asked for {k}", RankDeficient,
                      stacklevel=2)
    # deflation can leave tiny order inversions between near-equal variances
    order = np.argsort(-np.array(variances), kind="stable") if m else np.arange(0)
    components = components[order]
    variances = np.array(variances)[order] if m else np.zeros(0)
    coords = Xc @ components.T if m else np.zeros((n, 0))
    return EmbeddingResult(coords, components, variances, total, mean, rank_deficient,
                           [iterations[i] for i in order])


def embedding_export(result: EmbeddingResult, sha256s: Sequence[str], labels: Sequence[str], path) -> None:
    """CSV ``sha256,x,y,z,label``; absent components are written as 0."""
    n = result.coordinates.shape[0]
    if len(sha256s) != n or len(labels) != n:
        raise ValueError("sha256s and labels must align with the embedded rows")
    coords = np.zeros((n, 3))
    m = min(3, result.coordinates.shape[1])
    coords[:, :m] = result.coordinates[:, :m]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sha256", "x", "y", "z", "label"])
        for sha, row, label in zip(sha256s, coords, labels):
            w.writerow([sha, *(repr(float(v)) for v in row), label])
