"""Multimodal subspace clustering via self-expressive autoencoders.

Per-modality encoder banks learn latent codes whose zero-diagonal coefficient
matrices are fused into one affinity for spectral clustering; a shared-matrix
baseline, a feature-concatenation variant, a linearized-ADMM coefficient
solver on fixed features, and a corruption-robustness harness round out the
pipeline.
"""

__version__ = "0.1.0"

from ._kernels import BACKEND as kernel_backend
from .admm import AdmmConfig, AdmmReport, admm_run, prox_group, shrink_l1
from .clustering import (
    MetricSet,
    build_affinity,
    classify,
    classify_dataset,
    cluster_accuracy,
    evaluate,
    fit_cluster_subspaces,
    fuse_coefficients,
    spectral_cluster,
)
from .dataio import (
    FIXTURE_SPEC,
    ModalityDataset,
    RunConfig,
    Scenario,
    SyntheticSpec,
    gen_synthetic,
    load_config,
    load_dataset,
    save_dataset,
)
from .networks import (
    LayerSpec,
    ModelConfig,
    MultiBranchAutoencoder,
    TrainResult,
    build_model,
    load_checkpoint,
    save_checkpoint,
    self_express,
    train,
)
from .numerics import Adam, adam_step, conv2d, conv2d_transpose, finite_diff_grad
from .objectives import (
    LossBreakdown,
    backprop,
    commutator,
    commutator_penalty,
    concat_loss,
    dmsc_loss,
    drogsure_loss,
    group_l12_norm,
    model_loss,
)
from .robustness import (
    PerturbationReport,
    PipelineRunner,
    add_gaussian_snr,
    perturbation_report,
    resilience_comparison,
    run_scenario,
    shuffle_pixels,
)
