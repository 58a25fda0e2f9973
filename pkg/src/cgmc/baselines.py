"""Reference methods: plain matrix factorization and graph-regularized MF.

Both share the trainer and evaluation stack of the main model so comparisons
are controlled: same batching, same momentum updates, same selection rule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .data import RatingScale
from .exceptions import DomainError, ShapeError
from .sparsegraph import PropagationOperator, SparseMatrix

__all__ = [
    "FactorModel",
    "LaplacianPair",
    "init_factor_model",
    "normalized_laplacian",
    "mf_loss_grad",
    "grals_loss_grad",
]


@dataclass
class FactorModel:
    """Free user/item factor matrices with rating-scale metadata."""

    user_factors: np.ndarray
    item_factors: np.ndarray
    scale: RatingScale
    seed: int = 0

    def __post_init__(self):
        if self.user_factors.ndim != 2 or self.item_factors.ndim != 2:
            raise ShapeError("factor matrices must be 2-d")
        if self.user_factors.shape[1] != self.item_factors.shape[1]:
            raise ShapeError("user and item factors must share one dim")

    @property
    def m(self):
        return self.user_factors.shape[0]

    @property
    def n(self):
        return self.item_factors.shape[0]

    @property
    def d(self):
        return self.user_factors.shape[1]

    def param_items(self):
        yield "user.factors", self.user_factors
        yield "item.factors", self.item_factors

    def copy(self):
        return FactorModel(
            user_factors=self.user_factors.copy(),
            item_factors=self.item_factors.copy(),
            scale=self.scale,
            seed=self.seed,
        )


def init_factor_model(m, n, d, seed, scale=None) -> FactorModel:
    """Seeded init matching the tower convention: scaled symmetric uniform."""
    rng = np.random.default_rng(seed)
    bw = np.sqrt(6.0 / (m + d))
    bh = np.sqrt(6.0 / (n + d))
    return FactorModel(
        user_factors=rng.uniform(-bw, bw, size=(m, d)),
        item_factors=rng.uniform(-bh, bh, size=(n, d)),
        scale=scale if scale is not None else RatingScale(),
        seed=seed,
    )


@dataclass(frozen=True)
class LaplacianPair:
    """Normalized Laplacians L = I - S for the user and item graphs."""

    l_user: sp.csr_array
    l_item: sp.csr_array


def normalized_laplacian(op: PropagationOperator) -> sp.csr_array:
    """L = I - S; symmetric positive semidefinite with spectrum in [0, 2]."""
    return (sp.eye_array(op.n, format="csr") - op.s.csr).tocsr()


def laplacian_pair(user_op, item_op) -> LaplacianPair:
    return LaplacianPair(
        l_user=normalized_laplacian(user_op),
        l_item=normalized_laplacian(item_op),
    )


def _data_loss_and_residuals(model, users, items, targets):
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.float64)
    if users.size == 0:
        raise DomainError("batch must be nonempty")
    dots = np.einsum(
        "ij,ij->i", model.user_factors[users], model.item_factors[items]
    )
    residuals = dots - targets
    return float(np.mean(residuals ** 2)), residuals, users, items


def mf_loss_grad(model: FactorModel, users, items, targets, gamma_w, gamma_h):
    """Batch-mean squared residual plus Frobenius penalties, with gradients.

    Returns ``(loss, {"user.factors": gW, "item.factors": gH})``.  The data
    gradient touches only rows in the batch; the penalty gradient touches all
    rows.
    """
    data_term, residuals, users, items = _data_loss_and_residuals(
        model, users, items, targets
    )
    w, h = model.user_factors, model.item_factors
    loss = (data_term
            + 0.5 * gamma_w * float(np.sum(w * w))
            + 0.5 * gamma_h * float(np.sum(h * h)))
    coeff = (2.0 / residuals.size) * residuals
    grad_w = gamma_w * w
    grad_h = gamma_h * h
    np.add.at(grad_w, users, coeff[:, None] * h[items])
    np.add.at(grad_h, items, coeff[:, None] * w[users])
    return loss, {"user.factors": grad_w, "item.factors": grad_h}


def grals_loss_grad(model: FactorModel, users, items, targets, laps: LaplacianPair,
                    gamma_w, gamma_h, beta_w, beta_h):
    """MF loss plus Laplacian smoothness penalties tr(W' L W), tr(H' L H).

    The trace-term gradient is ``beta * L @ factors`` (L symmetric), applied
    to the full matrix once per batch.
    """
    if laps.l_user.shape[0] != model.m or laps.l_item.shape[0] != model.n:
        raise ShapeError("Laplacian sizes do not match factor matrices")
    loss, grads = mf_loss_grad(model, users, items, targets, gamma_w, gamma_h)
    w, h = model.user_factors, model.item_factors
    lw_w = laps.l_user @ w
    lh_h = laps.l_item @ h
    loss += 0.5 * beta_w * float(np.sum(w * lw_w))
    loss += 0.5 * beta_h * float(np.sum(h * lh_h))
    grads["user.factors"] = grads["user.factors"] + beta_w * lw_w
    grads["item.factors"] = grads["item.factors"] + beta_h * lh_h
    return loss, grads


def predict_factors(model: FactorModel, users, items):
    """Predicted ratings in original units."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    if users.size and (users.min() < 0 or users.max() >= model.m):
        raise ShapeError("user index out of range")
    if items.size and (items.min() < 0 or items.max() >= model.n):
        raise ShapeError("item index out of range")
    dots = np.einsum(
        "ij,ij->i", model.user_factors[users], model.item_factors[items]
    )
    return model.scale.unscale(dots)
