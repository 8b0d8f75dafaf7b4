from .trainer import (
    Adam,
    LevelError,
    TrainConfig,
    TrainResult,
    batch_loss,
    blur_sigma,
    blurred_view,
    checkpoint_paths,
    compute_gradients,
    dataset_max_relative_error,
    dataset_mse,
    dataset_mse_by_level,
    load_optimizer,
    loss,
    save_optimizer,
    train,
    train_step,
    write_checkpoint,
)

__all__ = [
    "Adam",
    "LevelError",
    "TrainConfig",
    "TrainResult",
    "batch_loss",
    "blur_sigma",
    "blurred_view",
    "checkpoint_paths",
    "compute_gradients",
    "dataset_max_relative_error",
    "dataset_mse",
    "dataset_mse_by_level",
    "load_optimizer",
    "loss",
    "save_optimizer",
    "train",
    "train_step",
    "write_checkpoint",
]
