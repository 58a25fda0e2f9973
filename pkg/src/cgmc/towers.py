"""Graph-convolution embedding towers with hand-derived backpropagation.

A tower stacks weighted graph-convolution layers over one side's link graph
(users or items).  Each layer first transforms the node signal by a weight
matrix, then propagates it through the filter
``diag(sigma) + (I - diag(sigma)) S`` and applies tanh.  Transforming before
propagating is the associativity-equivalent order of the same linear map; it
lets featureless input (identity features) reduce to using the first weight
matrix as a per-node embedding table without materializing an N x N identity.

An optional fully connected layer projects the final graph embedding into the
rating-matrix role space.  Towers with ``self_logits=None`` propagate through
their operator directly with no per-node mixing (the fixed-weight ablation).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import ShapeError
from .sparsegraph import PropagationOperator, SparseMatrix, selfloop_normalize

__all__ = [
    "CgeTower",
    "TowerActivations",
    "TowerGradients",
    "sigmoid",
    "init_tower",
    "tower_forward",
    "tower_backward",
    "gcnkw_forward",
]


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass
class CgeTower:
    """Parameters of one side's embedding tower.

    ``weights[0]`` has shape (input_dim, d), or (N, d) in featureless mode
    where it doubles as the per-node embedding table.  ``self_logits`` holds
    the unconstrained per-node logits whose sigmoid gives the self-connection
    weight in (0, 1); ``None`` selects plain propagation with no mixing
    parameters.  The fully connected projection (``fc_weight``, ``fc_bias``)
    is optional.
    """

    n: int
    weights: list = field(default_factory=list)
    self_logits: np.ndarray | None = None
    fc_weight: np.ndarray | None = None
    fc_bias: np.ndarray | None = None
    featureless: bool = True

    @property
    def layers(self):
        return len(self.weights)

    @property
    def has_fc(self):
        return self.fc_weight is not None

    @property
    def weighted(self):
        return self.self_logits is not None

    @property
    def out_dim(self):
        if self.has_fc:
            return self.fc_weight.shape[1]
        return self.weights[-1].shape[1]

    def sigma(self):
        """Per-node self-connection weights in (0, 1)."""
        if self.self_logits is None:
            return None
        return sigmoid(self.self_logits)

    def validate(self):
        if not self.weights:
            raise ShapeError("tower needs at least one convolution layer")
        if self.featureless and self.weights[0].shape[0] != self.n:
            raise ShapeError(
                f"featureless first weight matrix must have {self.n} rows"
            )
        for a, b in zip(self.weights, self.weights[1:]):
            if a.shape[1] != b.shape[0]:
                raise ShapeError("weight matrix dimensions do not chain")
        if self.self_logits is not None and self.self_logits.shape != (self.n,):
            raise ShapeError(f"self logits must be a length-{self.n} vector")
        if self.has_fc:
            d_in = self.weights[-1].shape[1]
            if self.fc_weight.shape[0] != d_in:
                raise ShapeError("fully connected weight does not match tower output")
            if self.fc_bias is None or self.fc_bias.shape != (self.fc_weight.shape[1],):
                raise ShapeError("fully connected bias has wrong shape")
        for w in self.weights:
            if not np.all(np.isfinite(w)):
                raise ShapeError("non-finite tower weight")

    def param_items(self, prefix=""):
        """Yield (name, array) for every trainable tensor."""
        for i, w in enumerate(self.weights):
            yield f"{prefix}conv{i}", w
        if self.self_logits is not None:
            yield f"{prefix}self_logits", self.self_logits
        if self.has_fc:
            yield f"{prefix}fc_weight", self.fc_weight
            yield f"{prefix}fc_bias", self.fc_bias

    def copy(self):
        return CgeTower(
            n=self.n,
            weights=[w.copy() for w in self.weights],
            self_logits=None if self.self_logits is None else self.self_logits.copy(),
            fc_weight=None if self.fc_weight is None else self.fc_weight.copy(),
            fc_bias=None if self.fc_bias is None else self.fc_bias.copy(),
            featureless=self.featureless,
        )


@dataclass
class TowerActivations:
    """Forward-pass caches consumed by the backward pass."""

    inputs: list          # V per layer; None marks identity input at layer 0
    transformed: list     # H = V @ W per layer
    neighbor: list        # S @ H per layer (None in plain mode)
    filtered: list        # post-filter pre-activation A per layer
    outputs: list         # tanh(A) per layer
    fc_input: np.ndarray | None = None
    fc_output: np.ndarray | None = None


@dataclass
class TowerGradients:
    """Loss gradients, shaped like the tower's parameters."""

    weights: list
    self_logits: np.ndarray | None = None
    fc_weight: np.ndarray | None = None
    fc_bias: np.ndarray | None = None

    def param_items(self, prefix=""):
        for i, w in enumerate(self.weights):
            yield f"{prefix}conv{i}", w
        if self.self_logits is not None:
            yield f"{prefix}self_logits", self.self_logits
        if self.fc_weight is not None:
            yield f"{prefix}fc_weight", self.fc_weight
            yield f"{prefix}fc_bias", self.fc_bias


def init_tower(n, d, layers, rng, in_dim=None, weighted=True, with_fc=True):
    """Seeded tower initialization.

    Weight matrices draw from the symmetric uniform range
    +-sqrt(6 / (fan_in + fan_out)); self-connection logits start at zero
    (sigma = 0.5, neighbors and self weighted equally); the projection bias
    starts at zero.
    """
    first_rows = n if in_dim is None else in_dim
    weights = []
    dims = [first_rows] + [d] * layers
    for fan_in, fan_out in zip(dims, dims[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
    fc_weight = fc_bias = None
    if with_fc:
        bound = np.sqrt(6.0 / (d + d))
        fc_weight = rng.uniform(-bound, bound, size=(d, d))
        fc_bias = np.zeros(d)
    tower = CgeTower(
        n=n,
        weights=weights,
        self_logits=np.zeros(n) if weighted else None,
        fc_weight=fc_weight,
        fc_bias=fc_bias,
        featureless=in_dim is None,
    )
    tower.validate()
    return tower


def tower_forward(tower: CgeTower, op: PropagationOperator, features=None):
    """Run the tower; returns (embedding N x d, activations for backward).

    ``features`` supplies the input signal; ``None`` selects featureless mode
    (identity input), where the first weight matrix is the layer-0 signal
    itself.
    """
    tower.validate()
    if op.n != tower.n:
        raise ShapeError("propagation operator size does not match tower")
    if features is None and not tower.featureless:
        raise ShapeError("tower expects explicit input features")
    if features is not None:
        features = np.asarray(features, dtype=np.float64)
        if features.ndim != 2 or features.shape[0] != tower.n:
            raise ShapeError(f"features must be {tower.n} x input_dim")
        if features.shape[1] != tower.weights[0].shape[0]:
            raise ShapeError(
                f"feature dim {features.shape[1]} does not match first weight "
                f"matrix with {tower.weights[0].shape[0]} rows"
            )
    sigma = tower.sigma()
    acts = TowerActivations([], [], [], [], [])
    v = features
    for w in tower.weights:
        h = w if v is None else v @ w
        sv = op.matmul(h)
        if sigma is None:
            a = sv
            acts.neighbor.append(None)
        else:
            a = sigma[:, None] * h + (1.0 - sigma)[:, None] * sv
            acts.neighbor.append(sv)
        out = np.tanh(a)
        acts.inputs.append(v)
        acts.transformed.append(h)
        acts.filtered.append(a)
        acts.outputs.append(out)
        v = out
    if tower.has_fc:
        acts.fc_input = v
        v = np.tanh(v @ tower.fc_weight + tower.fc_bias)
        acts.fc_output = v
    return v, acts


def tower_backward(tower: CgeTower, op: PropagationOperator,
                   acts: TowerActivations, grad_out) -> TowerGradients:
    """Backpropagate a loss gradient on the embedding to all tower parameters.

    The self-connection gradient is chained through the sigmoid
    reparameterization, so the returned vector differentiates the
    unconstrained logits.
    """
    grad_out = np.asarray(grad_out, dtype=np.float64)
    if len(acts.outputs) != tower.layers:
        raise ShapeError("activation cache does not match tower depth")
    expected = acts.fc_output if tower.has_fc else acts.outputs[-1]
    if expected is None or grad_out.shape != expected.shape:
        raise ShapeError("gradient shape does not match cached forward output")
    sigma = tower.sigma()
    g_fc_w = g_fc_b = None
    if tower.has_fc:
        dz = grad_out * (1.0 - acts.fc_output ** 2)
        g_fc_w = acts.fc_input.T @ dz
        g_fc_b = dz.sum(axis=0)
        dv = dz @ tower.fc_weight.T
    else:
        dv = grad_out
    g_weights = [None] * tower.layers
    g_sigma = None if sigma is None else np.zeros(tower.n)
    for layer in range(tower.layers - 1, -1, -1):
        da = dv * (1.0 - acts.outputs[layer] ** 2)
        if sigma is None:
            dh = op.matmul(da)  # operator is symmetric
        else:
            h = acts.transformed[layer]
            sv = acts.neighbor[layer]
            g_sigma += np.einsum("ij,ij->i", da, h - sv)
            dh = sigma[:, None] * da + op.matmul((1.0 - sigma)[:, None] * da)
        v_in = acts.inputs[layer]
        if v_in is None:
            g_weights[layer] = dh  # identity input: dH is the table gradient
        else:
            g_weights[layer] = v_in.T @ dh
            dv = dh @ tower.weights[layer].T
    g_logits = None
    if sigma is not None:
        g_logits = g_sigma * sigma * (1.0 - sigma)
    return TowerGradients(
        weights=g_weights,
        self_logits=g_logits,
        fc_weight=g_fc_w,
        fc_bias=g_fc_b,
    )


def gcnkw_forward(g: SparseMatrix, features, thetas, fc_weight=None, fc_bias=None):
    """Forward pass of the fixed-weight ablation tower.

    The filter is the self-loop renormalization D~^{-1/2}(G + I)D~^{-1/2};
    self node and neighbors contribute with fixed equal policy and there are
    no per-node mixing parameters.  ``features=None`` selects featureless
    mode.
    """
    op = selfloop_normalize(g)
    tower = CgeTower(
        n=g.n_rows,
        weights=list(thetas),
        self_logits=None,
        fc_weight=fc_weight,
        fc_bias=fc_bias,
        featureless=features is None,
    )
    emb, _ = tower_forward(tower, op, features)
    return emb
