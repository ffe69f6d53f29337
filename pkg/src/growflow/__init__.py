"""Continuous-time growth reconstruction for Gaussian-splat scenes.

The heavy lifting lives in the submodules; the most commonly used entry
points are re-exported here.
"""

from .core import Box, Camera, GaussianSet, Image, TimeAxis, TimedDataset
from .field import FieldConfig, VelocityFieldParams, eval_field, init_params
from .metrics import build_report, chamfer_tracking, psnr, ssim
from .ode import GeomState, IntegrationOptions, integrate, rk4_step
from .splat import RenderConfig, render, render_brute_force, render_with_grads
from .synth import SceneSpec, generate_scene, render_dataset
from .train import TrainConfig, boundary_stage, global_stage, query_time, static_stage

__version__ = "0.1.0"

__all__ = [
    "Box", "Camera", "GaussianSet", "Image", "TimeAxis", "TimedDataset",
    "FieldConfig", "VelocityFieldParams", "eval_field", "init_params",
    "build_report", "chamfer_tracking", "psnr", "ssim",
    "GeomState", "IntegrationOptions", "integrate", "rk4_step",
    "RenderConfig", "render", "render_brute_force", "render_with_grads",
    "SceneSpec", "generate_scene", "render_dataset",
    "TrainConfig", "boundary_stage", "global_stage", "query_time",
    "static_stage",
]
