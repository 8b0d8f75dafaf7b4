from .mlp import (
    HIDDEN_LAYERS,
    HIDDEN_WIDTH,
    Mlp,
    MlpCache,
    MlpGrads,
    decoder_dims,
    mlp_backward,
    mlp_backward_batch,
    mlp_forward,
    mlp_forward_batch,
    mlp_init,
    offset_mlp_dims,
    param_count,
)

__all__ = [
    "HIDDEN_LAYERS",
    "HIDDEN_WIDTH",
    "Mlp",
    "MlpCache",
    "MlpGrads",
    "decoder_dims",
    "mlp_backward",
    "mlp_backward_batch",
    "mlp_forward",
    "mlp_forward_batch",
    "mlp_init",
    "offset_mlp_dims",
    "param_count",
]
