"""Mini-batch gradient descent with momentum over all model parameters.

One trainer drives every method: the two-tower graph-convolution models, the
fixed-weight ablation, and the factorization baselines.  Batches are drawn
without replacement (one shuffle per epoch), gradients flow through the
hand-derived backward passes, and the returned model is the parameter
snapshot with the best validation RMSE.  Runs are bitwise deterministic for a
fixed seed in single-threaded mode.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .baselines import (
    FactorModel,
    grals_loss_grad,
    init_factor_model,
    laplacian_pair,
    mf_loss_grad,
    predict_factors,
)
from .data import (
    SPLIT_TRAIN,
    SPLIT_VALID,
    RatingSet,
    rmse,
    scale_ratings,
)
from .exceptions import ConfigError, DomainError, ShapeError, TrainingDiverged
from .model import (
    ModelState,
    batch_loss,
    embedding_gradients,
    init_model,
    predict,
)
from .sparsegraph import PropagationOperator, SparseMatrix, normalize_adjacency, selfloop_normalize
from .towers import tower_backward, tower_forward

__all__ = [
    "TrainConfig",
    "EpochStats",
    "METHODS",
    "train",
    "make_validation_split",
    "grad_check",
    "compare_gradients",
    "GradCheckInstance",
    "GradCheckReport",
]

METHODS = ("cgmc", "cgmc0", "gcnkw", "gcnkw0", "mf", "grals")
_UPDATE_MODES = ("joint", "alternating")
_SCALING_MODES = ("none", "divide_max", "center_divide")


@dataclass
class TrainConfig:
    """All training hyper-parameters; also the schema of config files."""

    d: int = 64
    layers: int = 1
    gamma: float = 0.01
    eta: float = 0.01
    momentum: float = 0.9
    batch_size: int = 1024
    epochs: int = 200
    seed: int = 0
    early_stop_patience: int = 20
    update_mode: str = "joint"
    scaling: str = "divide_max"
    clip: bool = False

    def validate(self):
        if self.d < 1:
            raise ConfigError("d must be at least 1")
        if self.layers < 1:
            raise ConfigError("layers must be at least 1")
        if self.gamma < 0:
            raise ConfigError("gamma must be nonnegative")
        if self.eta < 0:
            raise ConfigError("eta must be nonnegative")
        if not (0.0 <= self.momentum < 1.0):
            raise ConfigError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be nonnegative")
        if self.update_mode not in _UPDATE_MODES:
            raise ConfigError(f"update_mode must be one of {_UPDATE_MODES}")
        if self.scaling not in _SCALING_MODES:
            raise ConfigError(f"scaling must be one of {_SCALING_MODES}")
        return self

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_file(cls, path):
        """Parse a flat ``key = value`` config file; unknown keys are errors."""
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
        return cls.from_text(text, source=str(path))

    @classmethod
    def from_text(cls, text, source="<config>"):
        known = {f.name: f.type for f in fields(cls)}
        values = {}
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{source}:line {lineno}: expected 'key = value'")
            key, _, value = line.partition("=")
            key = key.strip()
            value = value.strip()
            if key not in known:
                raise ConfigError(f"{source}:line {lineno}: unknown key {key!r}")
            values[key] = _coerce(key, value, getattr(cls, key), source, lineno)
        cfg = cls(**values)
        cfg.validate()
        return cfg


def _coerce(key, text, default, source, lineno):
    kind = type(default)
    try:
        if kind is bool:
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(
            f"{source}:line {lineno}: bad value {text!r} for {key}"
        ) from None


@dataclass
class EpochStats:
    epoch: int
    train_rmse: float
    valid_rmse: float
    loss: float
    seconds: float = 0.0


def make_validation_split(ratings: RatingSet, test_size, seed) -> RatingSet:
    """Retag ``test_size`` training triples as validation, seeded."""
    train_idx = np.flatnonzero(ratings.split == SPLIT_TRAIN)
    if test_size < 0:
        raise DomainError("validation size must be nonnegative")
    if test_size >= train_idx.size:
        raise DomainError(
            f"validation size {test_size} must be smaller than the "
            f"training split ({train_idx.size})"
        )
    rng = np.random.default_rng(seed)
    chosen = rng.permutation(train_idx)[:test_size]
    split = ratings.split.copy()
    split[chosen] = SPLIT_VALID
    return replace(ratings, split=split)


# ---------------------------------------------------------------------------
# objectives: one adapter per model family, all speaking the same protocol
# (live parameter dict, per-batch loss/gradients, full-set predictions).


class _TwoTowerObjective:
    def __init__(self, model: ModelState, user_op, item_op, gamma,
                 user_features=None, item_features=None):
        self.model = model
        self.user_op = user_op
        self.item_op = item_op
        self.gamma = gamma
        self.user_features = user_features
        self.item_features = item_features

    def params(self):
        return dict(self.model.param_items())

    def replace_model(self, model):
        self.model = model

    def embeddings(self):
        user_emb, self._user_acts = tower_forward(
            self.model.user_tower, self.user_op, self.user_features
        )
        item_emb, self._item_acts = tower_forward(
            self.model.item_tower, self.item_op, self.item_features
        )
        return user_emb, item_emb

    def batch_loss_only(self, users, items, targets):
        user_emb, item_emb = self.embeddings()
        return batch_loss(
            self.model, user_emb, item_emb, users, items, targets, self.gamma
        ).total

    def batch_grads(self, users, items, targets):
        user_emb, item_emb = self.embeddings()
        loss = batch_loss(
            self.model, user_emb, item_emb, users, items, targets, self.gamma
        )
        g_user_emb, g_item_emb = embedding_gradients(loss, user_emb, item_emb)
        g_user = tower_backward(
            self.model.user_tower, self.user_op, self._user_acts, g_user_emb
        )
        g_item = tower_backward(
            self.model.item_tower, self.item_op, self._item_acts, g_item_emb
        )
        grads = dict(g_user.param_items("user."))
        grads.update(g_item.param_items("item."))
        if self.gamma:
            for side, tower in (("user", self.model.user_tower),
                                ("item", self.model.item_tower)):
                for i, w in enumerate(tower.weights):
                    grads[f"{side}.conv{i}"] += self.gamma * w
                if tower.has_fc:
                    grads[f"{side}.fc_weight"] += self.gamma * tower.fc_weight
        return loss.total, grads

    def predict(self, users, items):
        user_emb, item_emb = self.embeddings()
        return predict(self.model, user_emb, item_emb, users, items)


class _FactorObjective:
    def __init__(self, model: FactorModel, gamma_w, gamma_h,
                 laps=None, beta_w=0.0, beta_h=0.0):
        self.model = model
        self.gamma_w = gamma_w
        self.gamma_h = gamma_h
        self.laps = laps
        self.beta_w = beta_w
        self.beta_h = beta_h

    def params(self):
        return dict(self.model.param_items())

    def replace_model(self, model):
        self.model = model

    def embeddings(self):
        return self.model.user_factors, self.model.item_factors

    def batch_loss_only(self, users, items, targets):
        loss, _ = self._loss_grads(users, items, targets)
        return loss

    def batch_grads(self, users, items, targets):
        return self._loss_grads(users, items, targets)

    def _loss_grads(self, users, items, targets):
        if self.laps is None:
            return mf_loss_grad(
                self.model, users, items, targets, self.gamma_w, self.gamma_h
            )
        return grals_loss_grad(
            self.model, users, items, targets, self.laps,
            self.gamma_w, self.gamma_h, self.beta_w, self.beta_h,
        )

    def predict(self, users, items):
        return predict_factors(self.model, users, items)


def _build_objective(ratings_scaled, scale, user_op, item_op, cfg, method,
                     user_features=None, item_features=None,
                     gamma_w=None, gamma_h=None, beta_w=0.1, beta_h=0.1):
    m, n = ratings_scaled.m, ratings_scaled.n
    if method in ("cgmc", "cgmc0", "gcnkw", "gcnkw0"):
        for op, count, side in ((user_op, m, "user"), (item_op, n, "item")):
            if op is None:
                raise ShapeError(f"method {method!r} requires a {side} graph")
            if op.n != count:
                raise ShapeError(
                    f"{side} graph has {op.n} nodes but rating set has {count}"
                )
        model = init_model(
            m, n, cfg.d, cfg.layers, cfg.seed, scale,
            weighted=method in ("cgmc", "cgmc0"),
            with_fc=method in ("cgmc", "gcnkw"),
            user_dim=None if user_features is None else user_features.shape[1],
            item_dim=None if item_features is None else item_features.shape[1],
        )
        return _TwoTowerObjective(model, user_op, item_op, cfg.gamma,
                                  user_features, item_features)
    if method == "mf":
        model = init_factor_model(m, n, cfg.d, cfg.seed, scale)
        return _FactorObjective(
            model,
            cfg.gamma if gamma_w is None else gamma_w,
            cfg.gamma if gamma_h is None else gamma_h,
        )
    if method == "grals":
        if user_op is None or item_op is None:
            raise ShapeError("grals requires both user and item graphs")
        model = init_factor_model(m, n, cfg.d, cfg.seed, scale)
        return _FactorObjective(
            model,
            cfg.gamma if gamma_w is None else gamma_w,
            cfg.gamma if gamma_h is None else gamma_h,
            laps=laplacian_pair(user_op, item_op),
            beta_w=beta_w,
            beta_h=beta_h,
        )
    raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")


def _split_arrays(ratings: RatingSet, scaled: RatingSet, code):
    mask = ratings.split == code
    return (ratings.users[mask], ratings.items[mask],
            ratings.ratings[mask], scaled.ratings[mask])


def _eval_rmse(objective, users, items, targets_original, clip_range):
    if users.size == 0:
        return float("nan")
    preds = objective.predict(users, items)
    if clip_range is not None:
        preds = np.clip(preds, clip_range[0], clip_range[1])
    return rmse(preds, targets_original)


def train(ratings: RatingSet, user_op, item_op, cfg: TrainConfig,
          method="cgmc", user_features=None, item_features=None,
          gamma_w=None, gamma_h=None, beta_w=0.1, beta_h=0.1):
    """Train a model and return ``(best_model, per-epoch history)``.

    Every epoch shuffles the training triples and walks them in batches; each
    batch runs a full forward over both sides, backpropagates, and applies
    the momentum update ``v <- mu v - eta g; p <- p + v``.  In
    ``alternating`` update mode, batches update the user-side and item-side
    parameters in turn instead of jointly.  The snapshot with the lowest
    validation RMSE is returned (training RMSE decides when there is no
    validation split).
    """
    cfg.validate()
    if ratings.count(SPLIT_TRAIN) == 0:
        raise DomainError("training split is empty")
    scaled, scale = scale_ratings(ratings, cfg.scaling)
    objective = _build_objective(
        scaled, scale, user_op, item_op, cfg, method,
        user_features=None if user_features is None else user_features.rows,
        item_features=None if item_features is None else item_features.rows,
        gamma_w=gamma_w, gamma_h=gamma_h, beta_w=beta_w, beta_h=beta_h,
    )
    u_tr, i_tr, r_tr, t_tr = _split_arrays(ratings, scaled, SPLIT_TRAIN)
    u_va, i_va, r_va, _ = _split_arrays(ratings, scaled, SPLIT_VALID)
    clip_range = (min(ratings.levels), max(ratings.levels)) if cfg.clip else None
    has_valid = u_va.size > 0

    rng = np.random.default_rng(cfg.seed)
    params = objective.params()
    velocity = {name: np.zeros_like(p) for name, p in params.items()}
    history = []
    best_metric = np.inf
    best_model = objective.model.copy()
    epochs_since_best = 0
    iteration = 0
    n_train = u_tr.size

    for epoch in range(1, cfg.epochs + 1):
        tick = time.perf_counter()
        perm = rng.permutation(n_train)
        epoch_losses = []
        for start in range(0, n_train, cfg.batch_size):
            sel = perm[start:start + cfg.batch_size]
            loss, grads = objective.batch_grads(u_tr[sel], i_tr[sel], t_tr[sel])
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    "loss became non-finite", epoch=epoch, iteration=iteration
                )
            if cfg.update_mode == "alternating":
                active = "user." if iteration % 2 == 0 else "item."
                grads = {k: g for k, g in grads.items() if k.startswith(active)}
            for name, g in grads.items():
                v = velocity[name]
                v *= cfg.momentum
                v -= cfg.eta * g
                params[name] += v
            epoch_losses.append(loss)
            iteration += 1
        stats = EpochStats(
            epoch=epoch,
            train_rmse=_eval_rmse(objective, u_tr, i_tr, r_tr, clip_range),
            valid_rmse=_eval_rmse(objective, u_va, i_va, r_va, clip_range),
            loss=float(np.mean(epoch_losses)),
            seconds=time.perf_counter() - tick,
        )
        history.append(stats)
        metric = stats.valid_rmse if has_valid else stats.train_rmse
        if metric < best_metric:
            best_metric = metric
            best_model = objective.model.copy()
            epochs_since_best = 0
        else:
            epochs_since_best += 1
        if cfg.early_stop_patience > 0 and epochs_since_best >= cfg.early_stop_patience:
            break
    return best_model, history


def evaluate_model(model, ratings: RatingSet, split_code, user_op=None,
                   item_op=None, user_features=None, item_features=None,
                   clip=False):
    """Test-time RMSE of a trained model on one split, in original units."""
    objective = objective_for_model(
        model, user_op, item_op, user_features=user_features,
        item_features=item_features,
    )
    users, items, targets = ratings.triples(split_code)
    clip_range = (min(ratings.levels), max(ratings.levels)) if clip else None
    return _eval_rmse(objective, users, items, targets, clip_range)


def predict_pairs(model, users, items, user_op=None, item_op=None,
                  user_features=None, item_features=None):
    """Predictions in original units for explicit (user, item) pairs."""
    objective = objective_for_model(
        model, user_op, item_op, user_features=user_features,
        item_features=item_features,
    )
    return objective.predict(np.asarray(users), np.asarray(items))


def objective_for_model(model, user_op=None, item_op=None, gamma=0.0,
                        user_features=None, item_features=None):
    if isinstance(model, ModelState):
        if user_op is None or item_op is None:
            raise ShapeError("two-tower model needs both propagation operators")
        return _TwoTowerObjective(
            model, user_op, item_op, gamma,
            None if user_features is None else user_features.rows,
            None if item_features is None else item_features.rows,
        )
    return _FactorObjective(model, gamma, gamma)


def operator_for_method(graph: SparseMatrix, method) -> PropagationOperator:
    """Normalization matching the method: degree norm, or self-loop renorm."""
    if method in ("gcnkw", "gcnkw0"):
        return selfloop_normalize(graph)
    return normalize_adjacency(graph)


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckInstance:
    """Spec of a small random instance for finite-difference checking."""

    n_users: int = 7
    n_items: int = 9
    d: int = 3
    layers: int = 2
    with_fc: bool = True
    weighted: bool = True
    featureless: bool = True
    feature_dim: int = 5
    batch: int = 12
    gamma: float = 0.1
    seed: int = 0


@dataclass
class GradCheckReport:
    """Max relative error per parameter group against central differences."""

    errors: dict
    tol: float
    step: float

    @property
    def passed(self):
        return all(e <= self.tol for e in self.errors.values())

    def failing_groups(self):
        return sorted(k for k, e in self.errors.items() if e > self.tol)

    def worst(self):
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]


def _random_symmetric_graph(n, rng, edge_prob=0.5):
    rows, cols, vals = [], [], []
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < edge_prob:
                w = rng.uniform(0.5, 2.0)
                rows.extend((i, j))
                cols.extend((j, i))
                vals.extend((w, w))
    return SparseMatrix.from_arrays(n, n, rows, cols, vals, symmetric=True)


def build_gradcheck_instance(inst: GradCheckInstance):
    """Materialize the instance: objective with randomized params plus batch."""
    rng = np.random.default_rng(inst.seed)
    user_graph = _random_symmetric_graph(inst.n_users, rng)
    item_graph = _random_symmetric_graph(inst.n_items, rng)
    norm = selfloop_normalize if not inst.weighted else normalize_adjacency
    user_op = norm(user_graph)
    item_op = norm(item_graph)
    user_dim = None if inst.featureless else inst.feature_dim
    item_dim = None if inst.featureless else inst.feature_dim
    model = init_model(
        inst.n_users, inst.n_items, inst.d, inst.layers,
        seed=int(rng.integers(2**31)),
        weighted=inst.weighted, with_fc=inst.with_fc,
        user_dim=user_dim, item_dim=item_dim,
    )
    # randomize logits away from zero so the sigmoid chain is exercised
    for tower in (model.user_tower, model.item_tower):
        if tower.self_logits is not None:
            tower.self_logits += rng.uniform(-1.0, 1.0, size=tower.n)
    user_features = item_features = None
    if not inst.featureless:
        user_features = rng.standard_normal((inst.n_users, inst.feature_dim))
        item_features = rng.standard_normal((inst.n_items, inst.feature_dim))
    objective = _TwoTowerObjective(model, user_op, item_op, inst.gamma,
                                   user_features, item_features)
    users = rng.integers(0, inst.n_users, size=inst.batch)
    items = rng.integers(0, inst.n_items, size=inst.batch)
    targets = rng.uniform(-1.0, 1.0, size=inst.batch)
    return objective, users, items, targets


def numeric_gradients(objective, users, items, targets, step=1e-6):
    """Central finite differences of the batch loss for every parameter."""
    out = {}
    for name, p in objective.params().items():
        g = np.zeros_like(p)
        flat_p = p.ravel()
        flat_g = g.ravel()
        for idx in range(flat_p.size):
            orig = flat_p[idx]
            flat_p[idx] = orig + step
            up = objective.batch_loss_only(users, items, targets)
            flat_p[idx] = orig - step
            down = objective.batch_loss_only(users, items, targets)
            flat_p[idx] = orig
            flat_g[idx] = (up - down) / (2.0 * step)
        out[name] = g
    return out


def compare_gradients(analytic, numeric, floor=1e-8):
    """Per-group max relative error between two gradient dicts.

    The error is the largest component difference normalized by the group's
    largest magnitude, floored so all-zero groups do not divide by zero.
    """
    errors = {}
    for name in numeric:
        a = analytic[name]
        n = numeric[name]
        scale = max(np.max(np.abs(a)), np.max(np.abs(n)), floor)
        errors[name] = float(np.max(np.abs(a - n)) / scale)
    return errors


def grad_check(instance=None, tol=1e-5, step=1e-6) -> GradCheckReport:
    """Check the hand-derived backward pass against central differences."""
    inst = instance if instance is not None else GradCheckInstance()
    objective, users, items, targets = build_gradcheck_instance(inst)
    _, analytic = objective.batch_grads(users, items, targets)
    numeric = numeric_gradients(objective, users, items, targets, step=step)
    return GradCheckReport(
        errors=compare_gradients(analytic, numeric), tol=tol, step=step
    )
