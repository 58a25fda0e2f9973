"""Convolutional geometric matrix completion.

Rating-matrix completion where user and item embeddings come from weighted
graph convolutions over user/item link graphs, trained end to end by
mini-batch gradient descent with momentum.  Includes matrix-factorization and
graph-regularized baselines, a fixed-weight graph-filter ablation, and
spectral diagnostics for the propagation filter.
"""

from .baselines import (
    FactorModel,
    LaplacianPair,
    grals_loss_grad,
    init_factor_model,
    mf_loss_grad,
)
from .data import (
    SPLIT_TEST,
    SPLIT_TRAIN,
    SPLIT_VALID,
    RatingScale,
    RatingSet,
    load_movielens,
    load_split_files,
    rmse,
    scale_ratings,
)
from .exceptions import (
    CgmcError,
    CheckpointError,
    ConfigError,
    DomainError,
    NumericError,
    ParseError,
    ShapeError,
    TrainingDiverged,
)
from .graphs import FeatureTable, knn_graph, rating_row_features
from .model import (
    BatchLoss,
    ModelState,
    batch_loss,
    init_model,
    load_checkpoint,
    predict,
    save_checkpoint,
)
from .sparsegraph import (
    PropagationOperator,
    SparseMatrix,
    apply_filter,
    chebyshev_filter,
    normalize_adjacency,
    read_edge_list,
    selfloop_normalize,
    spectral_radius,
    write_edge_list,
)
from .towers import (
    CgeTower,
    TowerActivations,
    TowerGradients,
    gcnkw_forward,
    init_tower,
    sigmoid,
    tower_backward,
    tower_forward,
)
from .training import (
    EpochStats,
    GradCheckInstance,
    GradCheckReport,
    TrainConfig,
    evaluate_model,
    grad_check,
    make_validation_split,
    train,
)

__version__ = "0.1.0"
