"""Recurrent canvas-attention ViT with dense latent distillation, at desk scale."""

from .geometry import FULL_SCENE, InvalidViewpoint, Viewpoint
from .model import CANVIT_B, DESK, MICRO, ModelConfig, ModelParams, ModelState, init_state, rollout, step

__all__ = ["FULL_SCENE", "InvalidViewpoint", "Viewpoint", "CANVIT_B", "DESK", "MICRO", "ModelConfig",
           "ModelParams", "ModelState", "init_state", "rollout", "step"]
__version__ = "0.1.0"
