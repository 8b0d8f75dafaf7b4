"""
Neural texture pyramids: independent feature textures of resolution 2^s for s = 0..k,
queried by bilinear lookups blended linearly across levels.

Kernel sizes `sigma` are fractions of one tile. Level `l = -log2(sigma)`, so `sigma = 1`
selects the 1×1 level and `sigma = 2^-k` the finest one.
"""

import numpy as np

from ..prelude import *
from ..texture import (
    UV,
    FeatureTexture,
    bilinear_backward,
    bilinear_backward_batch,
    bilinear_lookup_batch,
)


def sigma_range(k: int) -> Tuple[float, float]:
    return (2.0 ** -(k + 1), 1.0)


def clamp_sigma(sigma: FloatArray, k: int) -> FloatArray:
    lo, hi = sigma_range(k)
    return np.clip(sigma, lo, hi)


def level_of_detail_batch(sigma: FloatArray, k: int) -> FloatArray:
    sigma = np.asarray(sigma, dtype=np.float64)
    if np.any(~(sigma > 0)):
        raise ContractViolation(
            "kernel size must be positive", min_sigma=float(np.min(sigma))
        )
    return np.clip(-np.log2(sigma), 0.0, float(k))


def level_of_detail(sigma: float, k: int) -> float:
    return float(level_of_detail_batch(np.array([sigma]), k)[0])


@dataclass
class LevelBlend:
    lo: IntArray
    hi: IntArray
    w_lo: FloatArray
    w_hi: FloatArray


def level_blend(level: FloatArray) -> LevelBlend:
    lo = np.floor(level)
    hi = np.ceil(level)
    w_lo = hi - level
    w_hi = level - lo
    same = lo == hi
    w_lo[same] = 1.0
    w_hi[same] = 0.0
    return LevelBlend(
        lo=lo.astype(np.int64), hi=hi.astype(np.int64), w_lo=w_lo, w_hi=w_hi
    )


@dataclass
class NeuralPyramid:
    levels: List[FeatureTexture]

    def __post_init__(self) -> None:
        if not self.levels:
            raise ContractViolation("pyramid needs at least one level")

        c = self.levels[0].channels
        for s, level in enumerate(self.levels):
            if level.resolution != 2**s:
                raise ContractViolation(
                    "pyramid level has the wrong resolution",
                    level=s,
                    expected=2**s,
                    actual=level.resolution,
                )
            if level.channels != c:
                raise ContractViolation(
                    "pyramid levels must share a channel count",
                    level=s,
                    expected=c,
                    actual=level.channels,
                )

    @property
    def k(self) -> int:
        return len(self.levels) - 1

    @property
    def channels(self) -> int:
        return self.levels[0].channels

    @classmethod
    def zeros(cls, k: int, channels: int) -> "NeuralPyramid":
        return cls([FeatureTexture.zeros(2**s, channels) for s in range(k + 1)])

    @classmethod
    def random_normal(
        cls, k: int, channels: int, rng: np.random.Generator, std: float
    ) -> "NeuralPyramid":
        return cls(
            [
                FeatureTexture.random_normal(2**s, channels, rng, std)
                for s in range(k + 1)
            ]
        )

    def copy(self) -> "NeuralPyramid":
        return NeuralPyramid([level.copy() for level in self.levels])

    def param_count(self) -> int:
        return sum(level.data.size for level in self.levels)


def trilinear_lookup_batch(
    pyramid: NeuralPyramid, uv: FloatArray, sigma: FloatArray
) -> FloatArray:
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    blend = level_blend(level_of_detail_batch(sigma, pyramid.k))
    out = np.zeros((uv.shape[0], pyramid.channels))
    # ascending level order; per query this adds the lower level first
    for s, level in enumerate(pyramid.levels):
        use_lo = blend.lo == s
        if np.any(use_lo):
            out[use_lo] += blend.w_lo[use_lo, None] * bilinear_lookup_batch(
                level, uv[use_lo]
            )
        use_hi = (blend.hi == s) & (blend.hi != blend.lo)
        if np.any(use_hi):
            out[use_hi] += blend.w_hi[use_hi, None] * bilinear_lookup_batch(
                level, uv[use_hi]
            )
    return out


def trilinear_lookup(pyramid: NeuralPyramid, p: UV, sigma: float) -> FloatArray:
    return trilinear_lookup_batch(
        pyramid, np.array([p], dtype=np.float64), np.array([sigma])
    )[0]


def trilinear_backward_batch(
    pyramid: NeuralPyramid,
    uv: FloatArray,
    sigma: FloatArray,
    upstream: FloatArray,
    grads_out: Optional[List[FloatArray]] = None,
) -> FloatArray:
    """
    Adjoint of `trilinear_lookup_batch`.

    Texel gradients are accumulated into `grads_out[s]` (shaped like level s) if given.
    Returns the (N, 2) coordinate gradient. Sigma is an input and gets no gradient.
    """
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    upstream = np.asarray(upstream, dtype=np.float64).reshape(-1, pyramid.channels)
    blend = level_blend(level_of_detail_batch(sigma, pyramid.k))
    coord = np.zeros((uv.shape[0], 2))
    for s, level in enumerate(pyramid.levels):
        grad_level = grads_out[s] if grads_out is not None else None
        for mask, weight in (
            (blend.lo == s, blend.w_lo),
            ((blend.hi == s) & (blend.hi != blend.lo), blend.w_hi),
        ):
            if not np.any(mask):
                continue
            coord[mask] += bilinear_backward_batch(
                level,
                uv[mask],
                weight[mask, None] * upstream[mask],
                grad_out=grad_level,
            )
    return coord


def trilinear_backward(
    pyramid: NeuralPyramid, p: UV, sigma: float, upstream: Sequence[float]
) -> Tuple[List[Dict[Tuple[int, int], FloatArray]], FloatArray]:
    """
    Single-query adjoint: per-level sparse texel gradients keyed by (row, column), and
    the coordinate gradient.
    """
    up = np.asarray(upstream, dtype=np.float64)
    coord = trilinear_backward_batch(
        pyramid,
        np.array([p], dtype=np.float64),
        np.array([sigma]),
        up[None, :],
    )[0]

    blend = level_blend(level_of_detail_batch(np.array([sigma]), pyramid.k))
    lo, hi = int(blend.lo[0]), int(blend.hi[0])
    sparse: List[Dict[Tuple[int, int], FloatArray]] = [{} for _ in pyramid.levels]
    sparse[lo], _ = bilinear_backward(pyramid.levels[lo], p, blend.w_lo[0] * up)
    if hi != lo:
        sparse[hi], _ = bilinear_backward(pyramid.levels[hi], p, blend.w_hi[0] * up)
    return sparse, coord
