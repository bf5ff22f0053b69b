"""In-season crop growth stage estimation at desk scale.

A numpy/scipy library covering the full pipeline: a mechanistic
synthetic-season generator, preprocessing of meteorological and canopy time
series into weekly district feature blocks, three neural estimators over a
small reverse-mode autodiff engine, a hidden-Markov baseline, and the
evaluation metrics, plus a thin command-line wrapper for reproducible runs.
"""

__version__ = "0.1.0"

from .metrics import (STAGES, cosine_similarity, kld_loss, nse,
                      state_aggregate)
from .models import (build_dense, build_dgnn, build_model, build_sequential,
                     load_checkpoint, save_checkpoint)
from .preprocess import (DailyMet, FparSample, SeasonFeatures, SoilProps,
                         StageDataset, accumulate_agdd, build_dataset,
                         compute_gdd, sg_smooth_fpar, standardize_and_pad,
                         weekly_aggregate)
from .simulate import SimConfig, make_benchmark, simulate_benchmark, simulate_season
from .training import (MetricsReport, TrainConfig, cross_validate, evaluate,
                       export_activations, train)

__all__ = [
    "__version__",
    "STAGES", "cosine_similarity", "kld_loss", "nse", "state_aggregate",
    "build_dense", "build_dgnn", "build_model", "build_sequential",
    "load_checkpoint", "save_checkpoint",
    "DailyMet", "FparSample", "SeasonFeatures", "SoilProps", "StageDataset",
    "accumulate_agdd", "build_dataset", "compute_gdd", "sg_smooth_fpar",
    "standardize_and_pad", "weekly_aggregate",
    "SimConfig", "make_benchmark", "simulate_benchmark", "simulate_season",
    "MetricsReport", "TrainConfig", "cross_validate", "evaluate",
    "export_activations", "train",
]
