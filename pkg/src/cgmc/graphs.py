"""Build user/item link graphs from feature vectors or raw rating rows."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import RatingSet, SPLIT_TRAIN
from .exceptions import DomainError, ParseError, ShapeError
from .sparsegraph import SparseMatrix

__all__ = ["FeatureTable", "knn_graph", "rating_row_features", "read_features_csv"]

_KNN_CHUNK = 512


@dataclass(frozen=True)
class FeatureTable:
    """Dense per-node feature rows (N x dim)."""

    rows: np.ndarray

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.ndim != 2:
            raise ShapeError("feature table must be 2-d")
        if not np.all(np.isfinite(rows)):
            raise DomainError("feature values must be finite")
        object.__setattr__(self, "rows", rows)

    @property
    def n(self):
        return self.rows.shape[0]

    @property
    def dim(self):
        return self.rows.shape[1]


def knn_graph(features: FeatureTable, k) -> SparseMatrix:
    """Unit-weight k-nearest-neighbor graph under Euclidean distance.

    Each node contributes edges to its k nearest other nodes; the edge set is
    the union of both directions (an edge exists if either endpoint selected
    the other), so degrees can exceed k.  Equidistant candidates are ordered
    by ascending node index.  No self-edges.
    """
    n = features.n
    if n < 2:
        raise DomainError("need at least 2 nodes to build a neighbor graph")
    if not (1 <= k <= n - 1):
        raise DomainError(f"k must be in [1, {n - 1}], got {k}")
    x = features.rows
    sq_norms = np.einsum("ij,ij->i", x, x)
    src = np.empty(n * k, dtype=np.int64)
    dst = np.empty(n * k, dtype=np.int64)
    col_idx = np.arange(n)
    for start in range(0, n, _KNN_CHUNK):
        stop = min(start + _KNN_CHUNK, n)
        chunk = x[start:stop]
        # squared distances; tiny negatives from cancellation clipped to 0
        d2 = sq_norms[start:stop, None] - 2.0 * (chunk @ x.T) + sq_norms[None, :]
        np.maximum(d2, 0.0, out=d2)
        d2[col_idx[start:stop] - start, col_idx[start:stop]] = np.inf  # mask self
        for r in range(stop - start):
            order = np.lexsort((col_idx, d2[r]))  # distance, then index
            i = start + r
            src[i * k:(i + 1) * k] = i
            dst[i * k:(i + 1) * k] = order[:k]
    # union symmetrization with unit weights: dedupe via max instead of sum
    und_i = np.concatenate([src, dst])
    und_j = np.concatenate([dst, src])
    pair_keys = und_i * n + und_j
    uniq = np.unique(pair_keys)
    rows = uniq // n
    cols = uniq % n
    return SparseMatrix.from_arrays(
        n, n, rows, cols, np.ones(uniq.size, dtype=np.float64), symmetric=True
    )


def rating_row_features(ratings: RatingSet, side, splits=(SPLIT_TRAIN,)) -> FeatureTable:
    """Densified rating rows (user side) or columns (item side) as features.

    Unobserved entries are zero.  Only triples in ``splits`` are densified,
    defaulting to the training split so held-out ratings never shape the
    graphs.
    """
    if ratings.size == 0:
        raise DomainError("rating set is empty")
    if side not in ("user", "item"):
        raise DomainError(f"side must be 'user' or 'item', got {side!r}")
    mask = np.isin(ratings.split, np.asarray(splits, dtype=ratings.split.dtype))
    dense = np.zeros((ratings.m, ratings.n))
    dense[ratings.users[mask], ratings.items[mask]] = ratings.ratings[mask]
    if side == "item":
        dense = dense.T.copy()
    return FeatureTable(rows=dense)


def read_features_csv(path) -> FeatureTable:
    """Read a headerless CSV of one feature row per node."""
    rows = []
    width = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split(",")
            if width is None:
                width = len(parts)
            elif len(parts) != width:
                raise ParseError(
                    f"expected {width} columns, got {len(parts)}",
                    line=lineno, path=str(path),
                )
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise ParseError(
                    f"non-numeric feature value in {line!r}",
                    line=lineno, path=str(path),
                ) from None
    if not rows:
        raise ParseError("feature file has no data rows", line=1, path=str(path))
    return FeatureTable(rows=np.asarray(rows))
