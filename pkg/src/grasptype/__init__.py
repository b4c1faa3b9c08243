"""Grasp-type-aware grasp planning: learned success classifiers, configuration
priors and MAP inference over hand preshapes."""

__version__ = "0.1.0"

from grasptype.errors import GraspTypeError
from grasptype.grasp import (
    ConfigurationBounds,
    GraspConfiguration,
    GraspDataset,
    GraspType,
    TrainingSample,
    assemble_input,
)
from grasptype.inference import InferenceConfig, InferenceResult, minimize_for_type, plan_grasp
from grasptype.model import GraspModel, ModelConfig, evaluate_loo, fit_model, fit_type_free
from grasptype.perception import PointCloud, extract_features, fit_pca, perceive

__all__ = [
    "ConfigurationBounds",
    "GraspConfiguration",
    "GraspDataset",
    "GraspModel",
    "GraspType",
    "GraspTypeError",
    "InferenceConfig",
    "InferenceResult",
    "ModelConfig",
    "PointCloud",
    "TrainingSample",
    "assemble_input",
    "evaluate_loo",
    "extract_features",
    "fit_model",
    "fit_pca",
    "fit_type_free",
    "minimize_for_type",
    "perceive",
    "plan_grasp",
]
