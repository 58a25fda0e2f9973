"""Two-tower completion model: prediction, loss, and checkpoint persistence.

The model couples a user tower and an item tower; the predicted rating for a
pair is the dot product of their embeddings mapped back to original rating
units.  Training minimizes the batch-mean squared residual plus a Frobenius
penalty on every weight matrix (biases and mixing logits are never
penalized).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .data import RatingScale
from .exceptions import CheckpointError, DomainError, ShapeError
from .towers import CgeTower, init_tower

__all__ = [
    "ModelState",
    "BatchLoss",
    "init_model",
    "predict",
    "batch_loss",
    "embedding_gradients",
    "save_checkpoint",
    "load_checkpoint",
]

_MAGIC = b"CGMC"
_VERSION = 1
KIND_TWO_TOWER = 1
KIND_TWO_TOWER_PLAIN = 2
KIND_FACTOR = 3

_SCALE_CODES = {"none": 0, "divide_max": 1, "center_divide": 2}
_SCALE_NAMES = {v: k for k, v in _SCALE_CODES.items()}


@dataclass
class ModelState:
    """Both towers plus rating-scale metadata and the seed that built them."""

    user_tower: CgeTower
    item_tower: CgeTower
    d: int
    scale: RatingScale
    seed: int

    def __post_init__(self):
        if self.user_tower.out_dim != self.d or self.item_tower.out_dim != self.d:
            raise ShapeError("both towers must end in the shared embedding dim")

    @property
    def weighted(self):
        return self.user_tower.weighted

    def param_items(self):
        yield from self.user_tower.param_items("user.")
        yield from self.item_tower.param_items("item.")

    def copy(self):
        return ModelState(
            user_tower=self.user_tower.copy(),
            item_tower=self.item_tower.copy(),
            d=self.d,
            scale=self.scale,
            seed=self.seed,
        )


@dataclass
class BatchLoss:
    """Loss pieces for one batch, with residuals retained for backprop."""

    data_term: float
    reg_term: float
    total: float
    residuals: np.ndarray   # prediction - target, in the training scale
    users: np.ndarray
    items: np.ndarray


def init_model(m, n, d, layers, seed, scale=None, weighted=True, with_fc=True,
               user_dim=None, item_dim=None) -> ModelState:
    """Seeded model initialization; user tower is drawn first, then item."""
    rng = np.random.default_rng(seed)
    user_tower = init_tower(m, d, layers, rng, in_dim=user_dim,
                            weighted=weighted, with_fc=with_fc)
    item_tower = init_tower(n, d, layers, rng, in_dim=item_dim,
                            weighted=weighted, with_fc=with_fc)
    return ModelState(
        user_tower=user_tower,
        item_tower=item_tower,
        d=d,
        scale=scale if scale is not None else RatingScale(),
        seed=seed,
    )


def predict(state: ModelState, user_emb, item_emb, users, items):
    """Predicted ratings for (user, item) pairs, in original rating units."""
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    if users.size and (users.min() < 0 or users.max() >= user_emb.shape[0]):
        raise ShapeError("user index out of range")
    if items.size and (items.min() < 0 or items.max() >= item_emb.shape[0]):
        raise ShapeError("item index out of range")
    dots = np.einsum("ij,ij->i", user_emb[users], item_emb[items])
    return state.scale.unscale(dots)


def regularization_term(state: ModelState):
    """Sum of squared Frobenius norms of every weight matrix in both towers.

    Includes the fully connected weights; excludes biases and mixing logits.
    """
    total = 0.0
    for tower in (state.user_tower, state.item_tower):
        for w in tower.weights:
            total += float(np.sum(w * w))
        if tower.has_fc:
            total += float(np.sum(tower.fc_weight * tower.fc_weight))
    return total


def batch_loss(state: ModelState, user_emb, item_emb, users, items, targets,
               gamma) -> BatchLoss:
    """Batch-mean squared residual plus gamma/2 times the weight penalty.

    ``targets`` are in the training scale (already mapped by the model's
    rating scale).
    """
    users = np.asarray(users, dtype=np.int64)
    items = np.asarray(items, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.float64)
    if users.size == 0:
        raise DomainError("batch must be nonempty")
    if gamma < 0:
        raise DomainError("gamma must be nonnegative")
    dots = np.einsum("ij,ij->i", user_emb[users], item_emb[items])
    residuals = dots - targets
    data_term = float(np.mean(residuals ** 2))
    reg_term = regularization_term(state)
    return BatchLoss(
        data_term=data_term,
        reg_term=reg_term,
        total=data_term + 0.5 * gamma * reg_term,
        residuals=residuals,
        users=users,
        items=items,
    )


def embedding_gradients(loss: BatchLoss, user_emb, item_emb):
    """Gradient of the data term with respect to both embedding matrices."""
    batch = loss.residuals.size
    coeff = (2.0 / batch) * loss.residuals
    grad_user = np.zeros_like(user_emb)
    grad_item = np.zeros_like(item_emb)
    np.add.at(grad_user, loss.users, coeff[:, None] * item_emb[loss.items])
    np.add.at(grad_item, loss.items, coeff[:, None] * user_emb[loss.users])
    return grad_user, grad_item


# ---------------------------------------------------------------------------
# checkpoint format: magic "CGMC", version byte, kind byte, dims header, then
# parameter arrays as row-major little-endian float64.  Round trips are
# bit-exact.


class _Writer:
    def __init__(self):
        self.parts = []

    def u8(self, v):
        self.parts.append(struct.pack("<B", v))

    def u32(self, v):
        self.parts.append(struct.pack("<I", v))

    def u64(self, v):
        self.parts.append(struct.pack("<Q", v))

    def f64(self, v):
        self.parts.append(struct.pack("<d", v))

    def array(self, arr):
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        if arr.ndim == 1:
            self.u8(1)
            self.u32(arr.shape[0])
        elif arr.ndim == 2:
            self.u8(2)
            self.u32(arr.shape[0])
            self.u32(arr.shape[1])
        else:
            raise ShapeError("only 1-d and 2-d parameter arrays are stored")
        self.parts.append(arr.astype("<f8").tobytes(order="C"))

    def bytes(self):
        return b"".join(self.parts)


class _Reader:
    def __init__(self, blob):
        self.blob = blob
        self.offset = 0

    def _take(self, nbytes, what):
        if self.offset + nbytes > len(self.blob):
            raise CheckpointError(f"truncated checkpoint while reading {what}",
                                  offset=self.offset)
        chunk = self.blob[self.offset:self.offset + nbytes]
        self.offset += nbytes
        return chunk

    def u8(self, what="byte"):
        return struct.unpack("<B", self._take(1, what))[0]

    def u32(self, what="u32"):
        return struct.unpack("<I", self._take(4, what))[0]

    def u64(self, what="u64"):
        return struct.unpack("<Q", self._take(8, what))[0]

    def f64(self, what="f64"):
        return struct.unpack("<d", self._take(8, what))[0]

    def array(self, what="array"):
        ndim = self.u8(f"{what} ndim")
        if ndim == 1:
            shape = (self.u32(f"{what} length"),)
        elif ndim == 2:
            shape = (self.u32(f"{what} rows"), self.u32(f"{what} cols"))
        else:
            raise CheckpointError(f"bad array rank {ndim} for {what}",
                                  offset=self.offset - 1)
        count = int(np.prod(shape)) if shape else 0
        raw = self._take(count * 8, what)
        return np.frombuffer(raw, dtype="<f8").reshape(shape).copy()

    def done(self):
        if self.offset != len(self.blob):
            raise CheckpointError("trailing bytes after checkpoint payload",
                                  offset=self.offset)


def _write_tower(w: _Writer, tower: CgeTower):
    w.u32(tower.n)
    w.u8(1 if tower.featureless else 0)
    w.u32(tower.layers)
    w.u8(1 if tower.has_fc else 0)
    w.u8(1 if tower.weighted else 0)
    for mat in tower.weights:
        w.array(mat)
    if tower.weighted:
        w.array(tower.self_logits)
    if tower.has_fc:
        w.array(tower.fc_weight)
        w.array(tower.fc_bias)


def _read_tower(r: _Reader) -> CgeTower:
    n = r.u32("tower size")
    featureless = bool(r.u8("featureless flag"))
    layers = r.u32("layer count")
    has_fc = bool(r.u8("fc flag"))
    weighted = bool(r.u8("mixing flag"))
    weights = [r.array(f"conv weight {i}") for i in range(layers)]
    logits = r.array("self logits") if weighted else None
    fc_weight = fc_bias = None
    if has_fc:
        fc_weight = r.array("fc weight")
        fc_bias = r.array("fc bias")
    tower = CgeTower(n=n, weights=weights, self_logits=logits,
                     fc_weight=fc_weight, fc_bias=fc_bias,
                     featureless=featureless)
    tower.validate()
    return tower


def save_checkpoint(state, path):
    """Serialize a two-tower or factor model; round trips are bit-exact."""
    from .baselines import FactorModel  # local import avoids a module cycle

    w = _Writer()
    w.parts.append(_MAGIC)
    w.u8(_VERSION)
    if isinstance(state, ModelState):
        w.u8(KIND_TWO_TOWER if state.weighted else KIND_TWO_TOWER_PLAIN)
        w.u32(state.d)
        w.u64(state.seed)
        w.u8(_SCALE_CODES[state.scale.mode])
        w.f64(state.scale.offset)
        w.f64(state.scale.divisor)
        _write_tower(w, state.user_tower)
        _write_tower(w, state.item_tower)
    elif isinstance(state, FactorModel):
        w.u8(KIND_FACTOR)
        w.u32(state.d)
        w.u64(state.seed)
        w.u8(_SCALE_CODES[state.scale.mode])
        w.f64(state.scale.offset)
        w.f64(state.scale.divisor)
        w.array(state.user_factors)
        w.array(state.item_factors)
    else:
        raise ShapeError(f"cannot checkpoint object of type {type(state).__name__}")
    with open(path, "wb") as fh:
        fh.write(w.bytes())


def load_checkpoint(path):
    """Load a checkpoint written by :func:`save_checkpoint`."""
    from .baselines import FactorModel

    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    magic = r._take(4, "magic")
    if magic != _MAGIC:
        raise CheckpointError(f"bad magic {magic!r}", offset=0)
    version = r.u8("format version")
    if version != _VERSION:
        raise CheckpointError(f"unsupported format version {version}", offset=4)
    kind = r.u8("model kind")
    if kind not in (KIND_TWO_TOWER, KIND_TWO_TOWER_PLAIN, KIND_FACTOR):
        raise CheckpointError(f"unknown model kind {kind}", offset=5)
    d = r.u32("embedding dim")
    seed = r.u64("seed")
    scale_code = r.u8("scale mode")
    if scale_code not in _SCALE_NAMES:
        raise CheckpointError(f"unknown scale mode {scale_code}", offset=r.offset - 1)
    offset = r.f64("scale offset")
    divisor = r.f64("scale divisor")
    scale = RatingScale(mode=_SCALE_NAMES[scale_code], offset=offset, divisor=divisor)
    if kind in (KIND_TWO_TOWER, KIND_TWO_TOWER_PLAIN):
        user_tower = _read_tower(r)
        item_tower = _read_tower(r)
        r.done()
        state = ModelState(user_tower=user_tower, item_tower=item_tower,
                           d=d, scale=scale, seed=seed)
        if state.weighted != (kind == KIND_TWO_TOWER):
            raise CheckpointError("model kind does not match stored towers",
                                  offset=5)
        return state
    user_factors = r.array("user factors")
    item_factors = r.array("item factors")
    r.done()
    return FactorModel(user_factors=user_factors, item_factors=item_factors,
                       scale=scale, seed=seed)
