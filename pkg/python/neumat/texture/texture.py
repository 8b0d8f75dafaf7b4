"""
Trainable 2D feature grids.

A texture of resolution `res` has texel (i, j) centered at
((i + 0.5) / res, (j + 0.5) / res), with `i` along u (columns) and `j` along v (rows).
Data is stored row-major as `data[j, i, channel]`. All lookups wrap modulo 1.0 in both
coordinates.
"""

import numpy as np

from ..prelude import *

UV = Tuple[float, float]


@dataclass
class FeatureTexture:
    data: FloatArray

    def __post_init__(self) -> None:
        if self.data.ndim != 3 or self.data.shape[0] != self.data.shape[1]:
            raise ContractViolation(
                "texture data must have shape (res, res, c)", shape=self.data.shape
            )

        res = self.data.shape[0]
        if res < 1 or (res & (res - 1)) != 0:
            raise ContractViolation(
                "texture resolution must be a power of two", res=res
            )

        if self.data.shape[2] < 1:
            raise ContractViolation("texture needs at least one channel")

    @property
    def resolution(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @classmethod
    def zeros(cls, resolution: int, channels: int) -> "FeatureTexture":
        return cls(np.zeros((resolution, resolution, channels), dtype=np.float64))

    @classmethod
    def from_values(
        cls, resolution: int, channels: int, values: Sequence[float]
    ) -> "FeatureTexture":
        """
        Builds a texture from a flat row-major list of `resolution² × channels`.
        """
        arr = np.asarray(values, dtype=np.float64)
        if arr.size != resolution * resolution * channels:
            raise ContractViolation(
                "wrong number of texel values",
                expected=resolution * resolution * channels,
                actual=arr.size,
            )
        return cls(arr.reshape(resolution, resolution, channels).copy())

    @classmethod
    def random_normal(
        cls, resolution: int, channels: int, rng: np.random.Generator, std: float
    ) -> "FeatureTexture":
        return cls(rng.normal(0.0, std, size=(resolution, resolution, channels)))

    def copy(self) -> "FeatureTexture":
        return FeatureTexture(self.data.copy())

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))


@dataclass
class BilinearTaps:
    """
    The four texels touched by each of N lookups.

    `index` holds flat texel indices (j * res + i) in the order 00, 10, 01, 11;
    `weight` holds the matching bilinear weights; `fx`/`fy` are the in-cell fractions.
    """

    index: IntArray
    weight: FloatArray
    fx: FloatArray
    fy: FloatArray


def bilinear_taps(resolution: int, uv: FloatArray) -> BilinearTaps:
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    x = uv[:, 0] * resolution - 0.5
    y = uv[:, 1] * resolution - 0.5
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0

    i0 = np.mod(x0.astype(np.int64), resolution)
    j0 = np.mod(y0.astype(np.int64), resolution)
    i1 = np.mod(i0 + 1, resolution)
    j1 = np.mod(j0 + 1, resolution)

    index = np.stack(
        [
            j0 * resolution + i0,
            j0 * resolution + i1,
            j1 * resolution + i0,
            j1 * resolution + i1,
        ],
        axis=1,
    )
    weight = np.stack(
        [(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy],
        axis=1,
    )
    return BilinearTaps(index=index, weight=weight, fx=fx, fy=fy)


def sample_bilinear(grid: FloatArray, uv: FloatArray) -> FloatArray:
    """
    Wrap-around bilinear sampling of any square `(res, res, c)` grid at N points.

    Unlike `FeatureTexture`, `grid` need not have a power-of-two resolution.
    """
    res = grid.shape[0]
    taps = bilinear_taps(res, uv)
    flat = grid.reshape(res * res, -1)
    return _blend(flat, taps)


def _blend(flat: FloatArray, taps: BilinearTaps) -> FloatArray:
    w = taps.weight
    idx = taps.index
    # fixed summation order so a row never depends on the batch it is in
    return (
        w[:, 0:1] * flat[idx[:, 0]]
        + w[:, 1:2] * flat[idx[:, 1]]
        + w[:, 2:3] * flat[idx[:, 2]]
        + w[:, 3:4] * flat[idx[:, 3]]
    )


def bilinear_lookup_batch(tex: FeatureTexture, uv: FloatArray) -> FloatArray:
    """
    Looks up N points at once; `uv` has shape (N, 2), the result (N, c).
    """
    return sample_bilinear(tex.data, uv)


def bilinear_lookup(tex: FeatureTexture, p: UV) -> FloatArray:
    return bilinear_lookup_batch(tex, np.array([p], dtype=np.float64))[0]


def bilinear_backward_batch(
    tex: FeatureTexture,
    uv: FloatArray,
    upstream: FloatArray,
    grad_out: Optional[FloatArray] = None,
) -> FloatArray:
    """
    Adjoint of `bilinear_lookup_batch`.

    Texel gradients are accumulated into `grad_out` (shaped like `tex.data`) when given.
    Returns the (N, 2) gradient with respect to the lookup coordinates. At cell
    boundaries the derivative is that of the cell selected by `floor`.
    """
    res = tex.resolution
    c = tex.channels
    taps = bilinear_taps(res, uv)
    upstream = np.asarray(upstream, dtype=np.float64).reshape(-1, c)

    if grad_out is not None:
        accumulate_texel_grads(grad_out, taps, upstream)

    flat = tex.data.reshape(res * res, c)
    t00 = flat[taps.index[:, 0]]
    t10 = flat[taps.index[:, 1]]
    t01 = flat[taps.index[:, 2]]
    t11 = flat[taps.index[:, 3]]
    fx = taps.fx[:, None]
    fy = taps.fy[:, None]

    d_du = res * ((1 - fy) * (t10 - t00) + fy * (t11 - t01))
    d_dv = res * ((1 - fx) * (t01 - t00) + fx * (t11 - t10))
    return np.stack(
        [np.sum(d_du * upstream, axis=1), np.sum(d_dv * upstream, axis=1)], axis=1
    )


def accumulate_texel_grads(
    grad_out: FloatArray, taps: BilinearTaps, upstream: FloatArray, scale: float = 1.0
) -> None:
    res = grad_out.shape[0]
    c = grad_out.shape[2]
    flat_grad = grad_out.reshape(res * res, c)
    index = taps.index.reshape(-1)
    # (N, 4) weights against (N, c) upstream, flattened tap-major per lookup
    contrib = (taps.weight[:, :, None] * upstream[:, None, :]).reshape(-1, c) * scale
    for ch in range(c):
        flat_grad[:, ch] += np.bincount(
            index, weights=contrib[:, ch], minlength=res * res
        )


def bilinear_backward(
    tex: FeatureTexture, p: UV, upstream: Sequence[float]
) -> Tuple[Dict[Tuple[int, int], FloatArray], FloatArray]:
    """
    Single-point adjoint. Returns `({(j, i): gradient}, coord_gradient)`; taps that land
    on the same texel (textures smaller than 2×2) are merged.
    """
    res = tex.resolution
    up = np.asarray(upstream, dtype=np.float64).reshape(1, tex.channels)
    taps = bilinear_taps(res, np.array([p], dtype=np.float64))
    texel_grads: Dict[Tuple[int, int], FloatArray] = {}
    for flat_index, w in zip(taps.index[0], taps.weight[0]):
        key = (int(flat_index) // res, int(flat_index) % res)
        if key in texel_grads:
            texel_grads[key] = texel_grads[key] + w * up[0]
        else:
            texel_grads[key] = w * up[0]

    coord = bilinear_backward_batch(tex, np.array([p], dtype=np.float64), up)[0]
    return texel_grads, coord


def gaussian_kernel(sigma_blur: float) -> FloatArray:
    """
    1D Gaussian truncated at ±ceil(3σ) texels and renormalized to sum 1.
    """
    radius = int(math.ceil(3.0 * sigma_blur))
    offsets = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (offsets / sigma_blur) ** 2)
    return k / np.sum(k)


def _convolve_wrap(data: FloatArray, kernel: FloatArray, axis: int) -> FloatArray:
    radius = (kernel.size - 1) // 2
    out = np.zeros_like(data)
    for t, w in enumerate(kernel):
        out += w * np.roll(data, -(t - radius), axis=axis)
    return out


def blur_array(data: FloatArray, sigma_blur: float) -> FloatArray:
    if sigma_blur < 0:
        raise ContractViolation("blur sigma must be non-negative", sigma=sigma_blur)

    if sigma_blur == 0:
        return data.copy()

    kernel = gaussian_kernel(sigma_blur)
    return _convolve_wrap(_convolve_wrap(data, kernel, axis=0), kernel, axis=1)


def gaussian_blur(tex: FeatureTexture, sigma_blur: float) -> FeatureTexture:
    """
    Separable wrap-around Gaussian blur with standard deviation `sigma_blur` in texels.
    """
    return FeatureTexture(blur_array(tex.data, sigma_blur))


def blur_backward(upstream: FloatArray, sigma_blur: float) -> FloatArray:
    """
    Adjoint of `gaussian_blur` applied to a texture-shaped gradient. The kernel is
    symmetric, so this is the same convolution.
    """
    return blur_array(upstream, sigma_blur)


def kernel_support(sigma_blur: float) -> int:
    return 2 * int(math.ceil(3.0 * sigma_blur)) + 1
