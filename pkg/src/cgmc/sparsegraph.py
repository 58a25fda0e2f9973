"""Sparse symmetric graphs, degree normalization, and spectral filters.

Everything downstream (embedding towers, Laplacian penalties, diagnostics)
consumes the two types defined here: ``SparseMatrix`` for raw weighted
adjacency and ``PropagationOperator`` for its degree-normalized form
S = D^{-1/2} G D^{-1/2}.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .exceptions import DomainError, NumericError, ParseError, ShapeError

__all__ = [
    "SparseMatrix",
    "PropagationOperator",
    "normalize_adjacency",
    "selfloop_normalize",
    "apply_filter",
    "mixed_filter_symmetric",
    "spectral_radius",
    "chebyshev_filter",
    "read_edge_list",
    "write_edge_list",
]


@dataclass(frozen=True)
class SparseMatrix:
    """Sparse real matrix in CSR storage with validated, deduplicated entries.

    Duplicate (row, col) pairs passed to a constructor are summed.  When
    ``symmetric`` is set, construction verifies that entry (i, j) is present
    iff (j, i) is, with equal value.
    """

    csr: sp.csr_array
    symmetric: bool = False

    @classmethod
    def from_entries(cls, n_rows, n_cols, entries, symmetric=False):
        """Build from an iterable of (row, col, value) triples."""
        entries = list(entries)
        if entries:
            rows = np.asarray([e[0] for e in entries], dtype=np.int64)
            cols = np.asarray([e[1] for e in entries], dtype=np.int64)
            vals = np.asarray([e[2] for e in entries], dtype=np.float64)
        else:
            rows = np.zeros(0, dtype=np.int64)
            cols = np.zeros(0, dtype=np.int64)
            vals = np.zeros(0, dtype=np.float64)
        return cls.from_arrays(n_rows, n_cols, rows, cols, vals, symmetric=symmetric)

    @classmethod
    def from_arrays(cls, n_rows, n_cols, rows, cols, vals, symmetric=False):
        if n_rows < 0 or n_cols < 0:
            raise ShapeError("matrix dimensions must be nonnegative")
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        if rows.size:
            if rows.min() < 0 or rows.max() >= n_rows:
                raise ShapeError(f"row index out of range for {n_rows} rows")
            if cols.min() < 0 or cols.max() >= n_cols:
                raise ShapeError(f"col index out of range for {n_cols} cols")
        if not np.all(np.isfinite(vals)):
            raise DomainError("matrix values must be finite")
        coo = sp.coo_array((vals, (rows, cols)), shape=(n_rows, n_cols))
        csr = coo.tocsr()  # sums duplicates
        csr.sum_duplicates()
        csr.sort_indices()
        mat = cls(csr=csr, symmetric=symmetric)
        if symmetric:
            mat._check_symmetric()
        return mat

    @classmethod
    def from_dense(cls, arr, symmetric=False):
        arr = np.asarray(arr, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError("dense input must be 2-d")
        if not np.all(np.isfinite(arr)):
            raise DomainError("matrix values must be finite")
        mat = cls(csr=sp.csr_array(arr), symmetric=symmetric)
        if symmetric:
            mat._check_symmetric()
        return mat

    def _check_symmetric(self):
        if self.n_rows != self.n_cols:
            raise ShapeError("symmetric matrix must be square")
        diff = (self.csr - self.csr.T).tocsr()
        if diff.nnz and np.max(np.abs(diff.data)) != 0.0:
            raise ShapeError("matrix flagged symmetric has (i,j) != (j,i)")

    @property
    def n_rows(self):
        return self.csr.shape[0]

    @property
    def n_cols(self):
        return self.csr.shape[1]

    @property
    def nnz(self):
        return self.csr.nnz

    def entries(self):
        """Iterate stored (row, col, value) triples in row-major order."""
        coo = self.csr.tocoo()
        return zip(coo.row.tolist(), coo.col.tolist(), coo.data.tolist())

    def matmul(self, dense):
        """Row-major product with a dense vector or matrix."""
        dense = np.asarray(dense, dtype=np.float64)
        if dense.shape[0] != self.n_cols:
            raise ShapeError(
                f"cannot multiply {self.n_rows}x{self.n_cols} by operand with "
                f"leading dimension {dense.shape[0]}"
            )
        return self.csr @ dense

    def __matmul__(self, dense):
        return self.matmul(dense)

    def row_sums(self):
        return np.asarray(self.csr.sum(axis=1)).ravel()

    def to_dense(self):
        return self.csr.toarray()

    def transpose(self):
        return SparseMatrix(csr=self.csr.T.tocsr(), symmetric=self.symmetric)


@dataclass(frozen=True)
class PropagationOperator:
    """Degree-normalized adjacency S = D^{-1/2} G D^{-1/2}.

    Rows and columns of isolated nodes (degree zero) are all-zero, so such a
    node propagates nothing and receives nothing.  The spectrum of S lies in
    [-1, 1], which keeps every filter built on top of it non-expansive.
    """

    s: SparseMatrix

    @property
    def n(self):
        return self.s.n_rows

    def matmul(self, dense):
        return self.s.matmul(dense)

    def __matmul__(self, dense):
        return self.s.matmul(dense)


def _validate_adjacency(g: SparseMatrix):
    if g.n_rows != g.n_cols:
        raise ShapeError("adjacency must be square")
    if not g.symmetric:
        # accept unflagged input but verify it is actually symmetric
        diff = (g.csr - g.csr.T).tocsr()
        if diff.nnz and np.max(np.abs(diff.data)) != 0.0:
            raise ShapeError("adjacency must be symmetric")
    if g.nnz and g.csr.data.size and np.min(g.csr.data) < 0:
        raise DomainError("adjacency weights must be nonnegative")
    diag = g.csr.diagonal()
    if np.any(diag != 0.0):
        raise DomainError(
            "adjacency must have zero diagonal; self-connections are modeled "
            "by the mixing weights, not by the graph"
        )


def normalize_adjacency(g: SparseMatrix) -> PropagationOperator:
    """Symmetrically normalize a nonnegative adjacency: S = D^{-1/2} G D^{-1/2}.

    ``d_i = sum_j G_ij``.  Isolated nodes (``d_i = 0``) get all-zero rows and
    columns rather than a division error.
    """
    _validate_adjacency(g)
    deg = g.row_sums()
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    coo = g.csr.tocoo()
    # scale product first: commutativity keeps (i,j) and (j,i) bitwise equal
    data = coo.data * (inv_sqrt[coo.row] * inv_sqrt[coo.col])
    s = SparseMatrix.from_arrays(g.n_rows, g.n_cols, coo.row, coo.col, data, symmetric=True)
    return PropagationOperator(s=s)


def selfloop_normalize(g: SparseMatrix) -> PropagationOperator:
    """Renormalized filter with implicit unit self-loops.

    Returns D~^{-1/2} (G + I) D~^{-1/2} with D~_ii = sum_j (G + I)_ij.  Self
    node and neighbors contribute with fixed, equal policy; there are no
    per-node mixing weights.  Used by the fixed-weight ablation models.
    """
    _validate_adjacency(g)
    n = g.n_rows
    gi = (g.csr + sp.eye_array(n, format="csr")).tocsr()
    deg = np.asarray(gi.sum(axis=1)).ravel()
    inv_sqrt = 1.0 / np.sqrt(deg)  # deg >= 1 always: the self-loop
    coo = gi.tocoo()
    data = coo.data * (inv_sqrt[coo.row] * inv_sqrt[coo.col])
    s = SparseMatrix.from_arrays(n, n, coo.row, coo.col, data, symmetric=True)
    return PropagationOperator(s=s)


def apply_filter(op: PropagationOperator, sigma, v):
    """Apply the mixed self/neighbor filter (diag(sigma) + (I - diag(sigma)) S) to v.

    Row i of the output is ``sigma_i * v_i + (1 - sigma_i) * (S v)_i``;
    ``sigma`` weights each node's own signal against its aggregated
    neighborhood.  ``v`` may be a length-N vector or an N x r matrix.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if sigma.ndim != 1 or sigma.shape[0] != op.n:
        raise ShapeError(f"sigma must be a length-{op.n} vector")
    if v.shape[0] != op.n:
        raise ShapeError(f"signal must have {op.n} rows, got {v.shape[0]}")
    sv = op.matmul(v)
    if v.ndim == 1:
        return sigma * v + (1.0 - sigma) * sv
    return sigma[:, None] * v + (1.0 - sigma)[:, None] * sv


def mixed_filter_symmetric(op: PropagationOperator, sigma):
    """Symmetric map with the same spectrum as the mixed self/neighbor filter.

    ``diag(sigma) + (I - diag(sigma)) S`` is similar to
    ``diag(sigma) + P S P`` with ``P = diag(sqrt(1 - sigma))`` (conjugate by
    P, which commutes with the diagonals), so both have identical
    eigenvalues.  Power iteration on the symmetric form approaches the
    spectral radius from below instead of overshooting through the
    operator norm, which makes bound checks reliable.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.ndim != 1 or sigma.shape[0] != op.n:
        raise ShapeError(f"sigma must be a length-{op.n} vector")
    root = np.sqrt(1.0 - sigma)

    def apply(v):
        v = np.asarray(v, dtype=np.float64)
        if v.ndim == 1:
            return sigma * v + root * op.matmul(root * v)
        return sigma[:, None] * v + root[:, None] * op.matmul(root[:, None] * v)

    return apply


def spectral_radius(q_apply, n, iters=1000, seed=0, tol=1e-9):
    """Power-iteration estimate of the largest absolute eigenvalue.

    ``q_apply`` is any linear map on R^n given as a callable.  The start
    vector is drawn from a generator seeded with ``seed`` so the estimate is
    deterministic.  Iteration stops early once the estimate moves less than
    ``tol`` between steps.
    """
    if iters < 50:
        raise DomainError("power iteration needs at least 50 iterations")
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(n)
    x /= np.linalg.norm(x)
    estimate = 0.0
    for _ in range(iters):
        y = q_apply(x)
        if not np.all(np.isfinite(y)):
            raise NumericError("power iteration produced a non-finite vector")
        norm = np.linalg.norm(y)
        if norm == 0.0:
            return 0.0  # x in the null space and no growth anywhere
        new_estimate = norm  # ||Q x|| with ||x|| = 1
        x = y / norm
        if abs(new_estimate - estimate) < tol:
            return new_estimate
        estimate = new_estimate
    return estimate


def chebyshev_filter(op: PropagationOperator, theta, lambda_max, x):
    """Truncated Chebyshev spectral filter sum_k theta_k T_k(L~) x.

    ``L~ = (2 / lambda_max) L - I`` with ``L = I - S``; the polynomials
    follow the matrix recurrence ``T_0 x = x``, ``T_1 x = L~ x``,
    ``T_k x = 2 L~ T_{k-1} x - T_{k-2} x``.  Only low orders are supported:
    this is a verification utility for the order-1 reduction, not a general
    spectral-filter implementation.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 1 or theta.size == 0:
        raise ShapeError("theta must be a nonempty 1-d coefficient vector")
    k_max = theta.size - 1
    if k_max > 3:
        raise DomainError(f"chebyshev order K={k_max} unsupported (K <= 3)")
    if lambda_max <= 0:
        raise DomainError("lambda_max must be positive")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] != op.n:
        raise ShapeError(f"signal must have {op.n} rows")

    def lap_scaled(v):
        # L~ v = (2/lambda_max)(v - S v) - v
        return (2.0 / lambda_max) * (v - op.matmul(v)) - v

    t_prev = x
    out = theta[0] * t_prev
    if k_max >= 1:
        t_cur = lap_scaled(x)
        out = out + theta[1] * t_cur
        for k in range(2, k_max + 1):
            t_next = 2.0 * lap_scaled(t_cur) - t_prev
            out = out + theta[k] * t_next
            t_prev, t_cur = t_cur, t_next
    return out


def read_edge_list(path, n_nodes) -> SparseMatrix:
    """Read an undirected weighted edge list into a symmetric SparseMatrix.

    One edge per line as ``i<TAB>j<TAB>weight`` with 0-based indices, each
    undirected edge listed once.  Lines starting with ``#`` and blank lines
    are skipped.
    """
    rows, cols, vals = [], [], []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(
                    f"expected 'i<TAB>j<TAB>weight', got {line!r}",
                    line=lineno, path=str(path),
                )
            try:
                i, j, w = int(parts[0]), int(parts[1]), float(parts[2])
            except ValueError:
                raise ParseError(
                    f"non-numeric edge fields in {line!r}", line=lineno, path=str(path)
                ) from None
            if i == j:
                raise ParseError(
                    "self-loop edges are not supported", line=lineno, path=str(path)
                )
            if not (0 <= i < n_nodes and 0 <= j < n_nodes):
                raise ParseError(
                    f"edge ({i},{j}) out of range for {n_nodes} nodes",
                    line=lineno, path=str(path),
                )
            rows.extend((i, j))
            cols.extend((j, i))
            vals.extend((w, w))
    return SparseMatrix.from_arrays(
        n_nodes, n_nodes,
        np.asarray(rows, dtype=np.int64),
        np.asarray(cols, dtype=np.int64),
        np.asarray(vals, dtype=np.float64),
        symmetric=True,
    )


def write_edge_list(mat: SparseMatrix, path):
    """Write the upper triangle of a symmetric SparseMatrix as an edge list."""
    if not mat.symmetric:
        raise ShapeError("edge-list output requires a symmetric matrix")
    with open(path, "w", encoding="utf-8") as fh:
        for i, j, w in mat.entries():
            if i < j:
                fh.write(f"{i}\t{j}\t{w:.17g}\n")
