"""Photometric bundle adjustment with a low-memory Variable Projection solver."""

from .camera import Intrinsics, InverseDistortion, Pose, invert_distortion, project, undistort
from .imaging import GrayImage, ImagePyramid, PyramidAtlas, build_pyramid, to_grayscale
from .photocost import CostConfig, PhotometricModel, total_cost
from .scene import Landmark, ParameterDelta, ProblemState, apply_update
from .solver import SolverConfig, optimize
from .pipeline import RunConfig, run_pipeline
from .evaluate import EvalReport, evaluate_against_truth

__all__ = [
    "CostConfig",
    "EvalReport",
    "GrayImage",
    "ImagePyramid",
    "Intrinsics",
    "InverseDistortion",
    "Landmark",
    "ParameterDelta",
    "PhotometricModel",
    "Pose",
    "ProblemState",
    "PyramidAtlas",
    "RunConfig",
    "SolverConfig",
    "apply_update",
    "build_pyramid",
    "evaluate_against_truth",
    "invert_distortion",
    "optimize",
    "project",
    "run_pipeline",
    "to_grayscale",
    "total_cost",
    "undistort",
]

__version__ = "0.1.0"
