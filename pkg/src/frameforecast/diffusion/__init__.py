from .losses import (LossOutput, LossWeights, PatchDiscriminator, PerceptualFeatures,
                     composite_loss, discriminator_step)
from .model import FuturePredictor
from .peft import PeftPolicy, apply_mask, peft_mask, trainable_fraction
from .schedule import NoiseSchedule, forward_noise, make_schedule, predict_x0
from .unet import ConditionalUNet, DenoiserConfig, timestep_embedding

__all__ = [
    "ConditionalUNet", "DenoiserConfig", "FuturePredictor", "LossOutput", "LossWeights",
    "NoiseSchedule", "PatchDiscriminator", "PeftPolicy", "PerceptualFeatures",
    "apply_mask", "composite_loss", "discriminator_step", "forward_noise", "make_schedule",
    "peft_mask", "predict_x0", "timestep_embedding", "trainable_fraction",
]
