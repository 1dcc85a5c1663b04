"""Two-network generative model: structure (LBP) stage plus image stage."""

from .losses import (LossWeights, loss_perceptual, loss_ragan, loss_recon,
                     loss_style, stage1_generator_loss, stage2_generator_loss)
from .networks import (Discriminator, Generator, NetworkSpec, PerceptNet,
                       SliModel, build_discriminator, build_generator,
                       load_model, reconstruct)
from .train import TrainConfig, TrainResult, load_config, parse_config_text, train

__all__ = [
    "LossWeights", "loss_perceptual", "loss_ragan", "loss_recon", "loss_style",
    "stage1_generator_loss", "stage2_generator_loss",
    "Discriminator", "Generator", "NetworkSpec", "PerceptNet", "SliModel",
    "build_discriminator", "build_generator", "load_model", "reconstruct",
    "TrainConfig", "TrainResult", "load_config", "parse_config_text", "train",
]
