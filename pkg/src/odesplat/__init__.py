"""Continuous-time dynamic Gaussian splatting with a latent neural ODE."""

from .autodiff import ContractError, NumericError
from .config import TrainConfig, desk_config, load_config, save_config
from .estimator import DynamicSplatModel
from .gaussians import ParticleSet
from .render import Camera, render_particles
from .scenes import SceneSpec, generate_scene, load_dataset, save_dataset, split_dataset
from .trainer import Pipeline, Trainer, load_pipeline

__version__ = "0.1.0"
__all__ = [
    "Camera",
    "ContractError",
    "DynamicSplatModel",
    "NumericError",
    "ParticleSet",
    "Pipeline",
    "SceneSpec",
    "TrainConfig",
    "Trainer",
    "desk_config",
    "generate_scene",
    "load_config",
    "load_dataset",
    "load_pipeline",
    "render_particles",
    "save_config",
    "save_dataset",
    "split_dataset",
]
