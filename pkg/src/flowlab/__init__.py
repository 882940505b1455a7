"""Closed-form rectified-flow transport over finite datasets: stability
under pruning, selection criteria, stitched coarse-to-fine inference, and
Wasserstein error bounds, at desk scale."""

__version__ = "0.1.0"

from .data import GmmSpec, LatentDataset, Rng, generate_gmm, load_dataset, make_gmm_spec, sample_source, save_dataset
from .errors import DataFormatError, DivergenceError, FlowLabError, ValidationError
from .metrics import combine_triangle, endpoint_similarity, lipschitz_estimate, velocity_error, w2_bound
from .pruning import (
    ClusterModel,
    PruneSelection,
    allocate_quota,
    apply_selection,
    balance_divergence,
    kmeans_cosine,
    select_by_coreset,
    select_by_distance,
    select_by_kernel,
    select_by_score,
    select_random,
)
from .stitching import StitchedField, cost_model, finetune_coarse, invert_to_seam, stitched_sample
from .surrogate import ScoreTable, SurrogateModel, TrainConfig, evaluate_field, fm_loss, score_samples, train
from .transport import (
    ClosedFormField,
    Trajectory,
    assign,
    closed_form_velocity,
    dominance_distribution,
    integrate,
    path_deviation,
    softmax_weights,
)

__all__ = [name for name in dir() if not name.startswith("_")]
