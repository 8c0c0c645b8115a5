"""Cascaded 3D patch CNN for white-matter lesion segmentation with
one-shot domain adaptation by retraining fully connected groups."""

# The adaptation entry point stays at mslesion.adapt.adapt so the submodule
# name is not shadowed.
from .adapt import recommend_freeze, run_adaptation_grid
from .cascade import (CascadeModel, FeatureStore, PostprocessConfig, infer, load_cascade, postprocess,
                      save_cascade, segment, train_cascade)
from .metrics import dsc, evaluate, lesion_precision, lesion_sensitivity
from .network import FreezeConfig, FreezeMode, build_model, count_params, load_model, save_model
from .training import TrainConfig, train
from .volume_io import Case, Volume, load_case, load_case_set, load_nifti, save_nifti

__version__ = "0.1.0"

__all__ = [
    "CascadeModel", "Case", "FeatureStore", "FreezeConfig", "FreezeMode", "PostprocessConfig", "TrainConfig",
    "Volume", "build_model", "count_params", "dsc", "evaluate", "infer", "lesion_precision",
    "lesion_sensitivity", "load_case", "load_case_set", "load_cascade", "load_model", "load_nifti",
    "postprocess", "recommend_freeze", "run_adaptation_grid", "save_cascade", "save_model", "save_nifti",
    "segment", "train", "train_cascade",
]
