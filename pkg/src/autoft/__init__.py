"""autoft: learn a fine-tuning objective and optimizer hyperparameters by
bi-level search against a small out-of-distribution validation set, then
fine-tune with the learned objective and measure robustness on unseen shifts.
"""

from ._kernels import backend_name
from .data import LabeledDataset, ShiftSpec, SplitSizes, gen_gaussian_toy, gen_spurious_blobs, load_dataset, save_dataset
from .engine import (
    BenchmarkSetup,
    EngineConfig,
    HyperParams,
    StudyResult,
    autoft_run,
    compare_samplers,
    default_blob_benchmark,
    didactic_run,
    trial_eval,
    val_choice_ablation,
)
from .evaluation import ensemble_sweep, macro_f1, top1, wise_interpolate, worst_group_acc
from .losses import LossWeights, composite_loss
from .models import DiagGaussian, LinearModel, ParamVector, adamw_step, cosine_lr, kl_diag_gaussians, pretrain_linear, vb_fit
from .samplers import Sampler, TpeConfig, TrialRecord, make_sampler
from .space import IntUniform, LogUniform, SearchSpace, Uniform, default_autoft_space, grouped_space

__version__ = "0.1.0"

__all__ = [
    "BenchmarkSetup",
    "DiagGaussian",
    "EngineConfig",
    "HyperParams",
    "IntUniform",
    "LabeledDataset",
    "LinearModel",
    "LogUniform",
    "LossWeights",
    "ParamVector",
    "Sampler",
    "SearchSpace",
    "ShiftSpec",
    "SplitSizes",
    "StudyResult",
    "TpeConfig",
    "TrialRecord",
    "Uniform",
    "adamw_step",
    "autoft_run",
    "backend_name",
    "compare_samplers",
    "composite_loss",
    "cosine_lr",
    "default_autoft_space",
    "default_blob_benchmark",
    "didactic_run",
    "ensemble_sweep",
    "gen_gaussian_toy",
    "gen_spurious_blobs",
    "grouped_space",
    "kl_diag_gaussians",
    "load_dataset",
    "macro_f1",
    "make_sampler",
    "pretrain_linear",
    "save_dataset",
    "top1",
    "trial_eval",
    "val_choice_ablation",
    "vb_fit",
    "wise_interpolate",
    "worst_group_acc",
]
