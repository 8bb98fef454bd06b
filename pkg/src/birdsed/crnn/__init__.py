from .checkpoint import load as load_checkpoint, save as save_checkpoint
from .model import (PRESETS, ArchitecturePreset, ModelParams, backward, bce_loss, forward, get_preset,
                    init_model, loss_and_grads)
from .optim import AdamState, adam_step
from .train import TrainConfig, predict_recording, train, train_recordings

__all__ = [
    "PRESETS", "ArchitecturePreset", "ModelParams", "AdamState", "TrainConfig",
    "adam_step", "backward", "bce_loss", "forward", "get_preset", "init_model", "load_checkpoint",
    "loss_and_grads", "predict_recording", "save_checkpoint", "train", "train_recordings",
]
