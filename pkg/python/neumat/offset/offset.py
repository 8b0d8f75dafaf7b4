"""
Neural offsets: a view-dependent shift of the lookup position.

A bilinear lookup in the offset texture feeds the offset MLP together with `wo`; the MLP
regresses a ray depth `r`, and the fixed function

    H(r, wo) = r / max(wo.z, Z_MIN) * (wo.x, wo.y)

turns it into a UV offset. Nothing supervises `r` directly: it is trained only through
the lookups it displaces.
"""

import numpy as np
from PIL import Image

from ..mlp import (
    Mlp,
    MlpCache,
    MlpGrads,
    mlp_backward_batch,
    mlp_forward_batch,
    mlp_init,
    offset_mlp_dims,
)
from ..prelude import *
from ..texture import (
    UV,
    FeatureTexture,
    accumulate_texel_grads,
    bilinear_lookup_batch,
    bilinear_taps,
)

Z_MIN = 0.1

# slack for directions that went through float32 storage
DIRECTION_TOLERANCE = 1e-6


@dataclass(frozen=True)
class Direction:
    """
    A unit upper-hemisphere direction in projected-hemisphere form: its tangent-plane
    components `(x, y)`, with `z` derived.
    """

    x: float
    y: float

    def __post_init__(self) -> None:
        check_directions(np.array([[self.x, self.y]]), "direction")

    @property
    def z(self) -> float:
        return math.sqrt(max(0.0, 1.0 - self.x * self.x - self.y * self.y))

    @classmethod
    def from_vector(cls, v: Sequence[float]) -> "Direction":
        """
        Normalizes a 3D tangent-frame vector (z along the normal) onto the hemisphere.
        """
        a = np.asarray(v, dtype=np.float64)
        norm = float(np.linalg.norm(a))
        if norm == 0.0 or a[2] < 0:
            raise ContractViolation("direction is below the horizon", vector=a.tolist())
        return cls(float(a[0] / norm), float(a[1] / norm))

    def as_array(self) -> FloatArray:
        return np.array([self.x, self.y], dtype=np.float64)


def check_directions(d: FloatArray, name: str) -> None:
    d = np.asarray(d, dtype=np.float64)
    if d.ndim != 2 or d.shape[1] != 2:
        raise ContractViolation(f"{name} must have shape (N, 2)", shape=d.shape)

    r2 = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1]
    bad = ~(r2 <= 1.0 + DIRECTION_TOLERANCE)
    if np.any(bad):
        first = int(np.argmax(bad))
        raise ContractViolation(
            f"{name} is outside the upper hemisphere",
            index=first,
            x=float(d[first, 0]),
            y=float(d[first, 1]),
        )


def direction_z(d: FloatArray) -> FloatArray:
    return np.sqrt(np.maximum(0.0, 1.0 - d[:, 0] * d[:, 0] - d[:, 1] * d[:, 1]))


@dataclass
class OffsetModule:
    texture: FeatureTexture
    mlp: Mlp

    def __post_init__(self) -> None:
        expected = offset_mlp_dims(self.texture.channels)
        if self.mlp.n_in != expected[0] or self.mlp.n_out != 1:
            raise ContractViolation(
                "offset MLP does not match the offset texture",
                expected_in=expected[0],
                actual_in=self.mlp.n_in,
                actual_out=self.mlp.n_out,
            )
        if self.mlp.final_relu:
            raise ContractViolation("offset MLP must not clamp its output")

    @property
    def channels(self) -> int:
        return self.texture.channels

    @classmethod
    def zeros(cls, k: int, channels: int) -> "OffsetModule":
        return cls(
            FeatureTexture.zeros(2**k, channels),
            Mlp.zeros(offset_mlp_dims(channels), final_relu=False),
        )

    @classmethod
    def init(
        cls,
        k: int,
        channels: int,
        seed: int,
        rng: np.random.Generator,
        texture_std: float,
    ) -> "OffsetModule":
        return cls(
            FeatureTexture.random_normal(2**k, channels, rng, texture_std),
            mlp_init(offset_mlp_dims(channels), final_relu=False, seed=seed),
        )

    def copy(self) -> "OffsetModule":
        return OffsetModule(self.texture.copy(), self.mlp.copy())

    def with_texture(self, texture: FeatureTexture) -> "OffsetModule":
        """
        The same MLP over a different texture (e.g. a blurred view), sharing parameters.
        """
        return OffsetModule(texture, self.mlp)


@dataclass
class OffsetCache:
    uv: FloatArray
    scale: FloatArray
    mlp_cache: MlpCache


def offset_scale(wo: FloatArray) -> FloatArray:
    """
    `∂H/∂r`, shape (N, 2): `(wo.x, wo.y) / max(wo.z, Z_MIN)`.
    """
    z = np.maximum(direction_z(wo), Z_MIN)
    return wo / z[:, None]


def ray_depth_batch(
    mod: OffsetModule, uv: FloatArray, wo: FloatArray
) -> Tuple[FloatArray, MlpCache]:
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    wo = np.asarray(wo, dtype=np.float64).reshape(-1, 2)
    features = bilinear_lookup_batch(mod.texture, uv)
    r, cache = mlp_forward_batch(mod.mlp, np.concatenate([features, wo], axis=1))
    return r[:, 0], cache


def offset_from_depth_batch(r: FloatArray, wo: FloatArray) -> FloatArray:
    return np.asarray(r, dtype=np.float64)[:, None] * offset_scale(wo)


def apply_offset_batch(
    mod: OffsetModule, uv: FloatArray, wo: FloatArray
) -> Tuple[FloatArray, OffsetCache]:
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    wo = np.asarray(wo, dtype=np.float64).reshape(-1, 2)
    r, mlp_cache = ray_depth_batch(mod, uv, wo)
    scale = offset_scale(wo)
    return uv + r[:, None] * scale, OffsetCache(uv=uv, scale=scale, mlp_cache=mlp_cache)


def offset_backward_batch(
    mod: OffsetModule,
    cache: OffsetCache,
    coord_grad: FloatArray,
    texture_grad_out: Optional[FloatArray] = None,
    mlp_grads_out: Optional[MlpGrads] = None,
) -> None:
    """
    Pulls the gradient of the shifted lookup position back through H, the offset MLP and
    the offset texture lookup.
    """
    coord_grad = np.asarray(coord_grad, dtype=np.float64).reshape(-1, 2)
    d_r = np.sum(coord_grad * cache.scale, axis=1)
    d_in = mlp_backward_batch(mod.mlp, cache.mlp_cache, d_r[:, None], mlp_grads_out)
    if texture_grad_out is not None:
        taps = bilinear_taps(mod.texture.resolution, cache.uv)
        accumulate_texel_grads(texture_grad_out, taps, d_in[:, : mod.channels])


def ray_depth(mod: OffsetModule, p: UV, wo: Direction) -> float:
    r, _ = ray_depth_batch(mod, np.array([p]), wo.as_array()[None, :])
    return float(r[0])


def offset_from_depth(r: float, wo: Direction) -> FloatArray:
    return offset_from_depth_batch(np.array([r]), wo.as_array()[None, :])[0]


def apply_offset(mod: OffsetModule, p: UV, wo: Direction) -> UV:
    uv, _ = apply_offset_batch(mod, np.array([p]), wo.as_array()[None, :])
    return (float(uv[0, 0]), float(uv[0, 1]))


def offset_backward(
    mod: OffsetModule, p: UV, wo: Direction, upstream_coord_grad: Sequence[float]
) -> Tuple[FloatArray, MlpGrads]:
    """
    Returns `(offset texture gradient, offset MLP gradients)` for one query.
    """
    _, cache = apply_offset_batch(mod, np.array([p]), wo.as_array()[None, :])
    texture_grad = np.zeros_like(mod.texture.data)
    mlp_grads = MlpGrads.zeros_like(mod.mlp)
    offset_backward_batch(
        mod,
        cache,
        np.asarray(upstream_coord_grad, dtype=np.float64)[None, :],
        texture_grad,
        mlp_grads,
    )
    return texture_grad, mlp_grads


def texel_centers(resolution: int) -> FloatArray:
    """
    (res², 2) UVs of every texel center, row-major like texture data.
    """
    c = (np.arange(resolution, dtype=np.float64) + 0.5) / resolution
    u, v = np.meshgrid(c, c)
    return np.stack([u.reshape(-1), v.reshape(-1)], axis=1)


def offset_field(mod: OffsetModule, wo: Direction) -> FloatArray:
    """
    The UV offset at every offset-texel center, shape (res, res, 2).
    """
    res = mod.texture.resolution
    uv = texel_centers(res)
    wo_batch = np.broadcast_to(wo.as_array(), uv.shape)
    r, _ = ray_depth_batch(mod, uv, wo_batch)
    return offset_from_depth_batch(r, wo_batch).reshape(res, res, 2)


def offset_visualization(
    mod: OffsetModule, wo: Direction, scale: float
) -> ByteArray:
    """
    8-bit RGB image of the offset field: red/green = 0.5 + scale·delta, blue = 0, so a
    zero offset is (128, 128, 0).
    """
    delta = offset_field(mod, wo)
    rgb = np.zeros(delta.shape[:2] + (3,))
    rgb[:, :, :2] = 0.5 + scale * delta
    return np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)


def write_offset_visualization(
    path: PathLike, mod: OffsetModule, wo: Direction, scale: float
) -> None:
    # row 0 of the texture (v near 0) goes at the bottom of the image
    pixels = offset_visualization(mod, wo, scale)[::-1]
    try:
        Image.fromarray(np.ascontiguousarray(pixels)).save(
            os.fspath(path), format="PNG"
        )
    except OSError as e:
        raise InputError("could not write image", path=os.fspath(path)) from e
