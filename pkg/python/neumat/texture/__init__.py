from .texture import (
    UV,
    BilinearTaps,
    FeatureTexture,
    accumulate_texel_grads,
    bilinear_backward,
    bilinear_backward_batch,
    bilinear_lookup,
    bilinear_lookup_batch,
    bilinear_taps,
    blur_array,
    blur_backward,
    gaussian_blur,
    gaussian_kernel,
    kernel_support,
    sample_bilinear,
)

__all__ = [
    "UV",
    "BilinearTaps",
    "FeatureTexture",
    "accumulate_texel_grads",
    "bilinear_backward",
    "bilinear_backward_batch",
    "bilinear_lookup",
    "bilinear_lookup_batch",
    "bilinear_taps",
    "blur_array",
    "blur_backward",
    "gaussian_blur",
    "gaussian_kernel",
    "kernel_support",
    "sample_bilinear",
]
