from .pyramid import (
    LevelBlend,
    NeuralPyramid,
    clamp_sigma,
    level_blend,
    level_of_detail,
    level_of_detail_batch,
    sigma_range,
    trilinear_backward,
    trilinear_backward_batch,
    trilinear_lookup,
    trilinear_lookup_batch,
)

__all__ = [
    "LevelBlend",
    "NeuralPyramid",
    "clamp_sigma",
    "level_blend",
    "level_of_detail",
    "level_of_detail_batch",
    "sigma_range",
    "trilinear_backward",
    "trilinear_backward_batch",
    "trilinear_lookup",
    "trilinear_lookup_batch",
]
