"""
Synthetic training data: a Monte Carlo reflectance oracle over heightfield
microgeometry, query sampling, and the `.mbtfq` dataset format.

A heightfield tile covers uv ∈ [0, 1)² and repeats; heights are in tile units above
the reference plane z = 0. A distant light delivers unit irradiance onto the reference
plane, so a flat Lambertian tile of albedo `a` returns exactly `a / π`.
"""

import contextlib
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from PIL import Image

from ..binfile import ByteReader, ByteWriter, atomic_write
from ..material import QueryBatch, sample_cosine
from ..offset import Direction, check_directions
from ..prelude import *
from ..pyramid import sigma_range
from ..texture import UV, sample_bilinear

MAGIC = b"MBTQ"
FORMAT_VERSION = 1
HEADER_BYTES = 24
RECORD_FLOATS = 12
RECORD_BYTES = 4 * RECORD_FLOATS
FIELDS = 10

FLAG_SYNTHETIC = 1
FLAG_INDIRECT = 2

DEFAULT_PER_TEXEL = 256
RECOMMENDED_PER_TEXEL = (200, 400)
DEFAULT_ORACLE_SAMPLES = 64
CHUNK_RECORDS = 4096

MARCH_STEP_TEXELS = 0.25
BISECTION_STEPS = 8
# descending rays are steepened to at least this slope so marches stay bounded
MIN_RAY_SLOPE = 1e-3
SPECULAR_WEIGHT = 0.04

PRESETS = ["flat", "step", "ramp", "checker", "bumps"]


@dataclass
class Heightfield:
    """
    `heights` is (res, res) in tile units, `albedo` (res, res, 3) linear RGB in [0, 1],
    and `roughness` an optional (res, res) grid driving a Blinn-Phong lobe. Rows are v.
    """

    heights: FloatArray
    albedo: FloatArray
    roughness: Optional[FloatArray] = None

    def __post_init__(self) -> None:
        res = self.heights.shape[0]
        if self.heights.shape != (res, res) or res < 2:
            raise ShapeMismatchError(
                "heights must be a square grid", shape=self.heights.shape
            )
        if self.albedo.shape != (res, res, 3):
            raise ShapeMismatchError(
                "albedo must match the heights", shape=self.albedo.shape, res=res
            )
        if self.roughness is not None and self.roughness.shape != (res, res):
            raise ShapeMismatchError(
                "roughness must match the heights", shape=self.roughness.shape, res=res
            )

        require_finite("heights", self.heights)
        require_finite("albedo", self.albedo)
        if np.any(self.albedo < 0) or np.any(self.albedo > 1):
            raise InputError("albedo must lie in [0, 1]")

    @property
    def resolution(self) -> int:
        return self.heights.shape[0]

    @property
    def min_height(self) -> float:
        return float(np.min(self.heights))

    @property
    def max_height(self) -> float:
        return float(np.max(self.heights))

    def height_at(self, xy: FloatArray) -> FloatArray:
        return sample_bilinear(self.heights[:, :, None], xy)[:, 0]

    def _texel_index(self, xy: FloatArray) -> Tuple[IntArray, IntArray]:
        res = self.resolution
        i = np.mod(np.floor(xy[:, 0] * res).astype(np.int64), res)
        j = np.mod(np.floor(xy[:, 1] * res).astype(np.int64), res)
        return j, i

    def albedo_at(self, xy: FloatArray) -> FloatArray:
        # nearest texel, so two-tone patterns stay two-tone
        j, i = self._texel_index(xy)
        return self.albedo[j, i]

    def roughness_at(self, xy: FloatArray) -> Optional[FloatArray]:
        if self.roughness is None:
            return None
        j, i = self._texel_index(xy)
        return self.roughness[j, i]

    def normal_at(self, xy: FloatArray) -> FloatArray:
        e = 1.0 / self.resolution
        dx = np.array([e, 0.0])
        dy = np.array([0.0, e])
        dh_du = (self.height_at(xy + dx) - self.height_at(xy - dx)) / (2 * e)
        dh_dv = (self.height_at(xy + dy) - self.height_at(xy - dy)) / (2 * e)
        n = np.stack([-dh_du, -dh_dv, np.ones_like(dh_du)], axis=1)
        return n / np.linalg.norm(n, axis=1, keepdims=True)


def _grid(resolution: int) -> Tuple[FloatArray, FloatArray]:
    c = (np.arange(resolution, dtype=np.float64) + 0.5) / resolution
    u, v = np.meshgrid(c, c)
    return u, v


def _constant_albedo(resolution: int, value: float) -> FloatArray:
    return np.full((resolution, resolution, 3), value)


def preset_heightfield(name: str, resolution: int = 256) -> Heightfield:
    """
    Built-in tileable test surfaces.

    - flat: height 0, albedo 0.5
    - step: a raised band u ∈ [0.25, 0.75) of height 0.05, brighter on top
    - ramp: triangle wave along u, peak height 0.05
    - checker: flat 4×4 checkerboard, albedo 0.2 / 0.8
    - bumps: six Gaussian bumps, albedo rising with height
    """
    u, v = _grid(resolution)
    if name == "flat":
        return Heightfield(np.zeros_like(u), _constant_albedo(resolution, 0.5))
    elif name == "step":
        raised = (u >= 0.25) & (u < 0.75)
        heights = np.where(raised, 0.05, 0.0)
        albedo = np.where(raised, 0.7, 0.3)[:, :, None] * np.ones(3)
        return Heightfield(heights, albedo)
    elif name == "ramp":
        heights = 0.05 * (1.0 - np.abs(2.0 * u - 1.0))
        return Heightfield(heights, _constant_albedo(resolution, 0.5))
    elif name == "checker":
        parity = (np.floor(u * 4) + np.floor(v * 4)) % 2
        albedo = np.where(parity == 0, 0.2, 0.8)[:, :, None] * np.ones(3)
        return Heightfield(np.zeros_like(u), albedo)
    elif name == "bumps":
        rng = np.random.default_rng(0)
        centers = rng.uniform(0.0, 1.0, size=(6, 2))
        heights = np.zeros_like(u)
        for cu, cv in centers:
            du = (u - cu + 0.5) % 1.0 - 0.5
            dv = (v - cv + 0.5) % 1.0 - 0.5
            heights += 0.04 * np.exp(-(du * du + dv * dv) / (2 * 0.08**2))
        tint = np.array([1.0, 0.8, 0.6])
        albedo = (0.25 + 0.6 * heights / heights.max())[:, :, None] * tint
        return Heightfield(heights, np.clip(albedo, 0.0, 1.0))
    else:
        raise InputError("unknown preset", preset=name, choices=PRESETS)


def srgb_to_linear(c: FloatArray) -> FloatArray:
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def load_heightfield_png(
    height_path: PathLike,
    albedo_path: Optional[PathLike] = None,
    *,
    height_scale: float = 0.05,
    roughness: Optional[float] = None,
) -> Heightfield:
    """
    Heights from a grayscale PNG (16-bit or 8-bit), mapped to [0, `height_scale`] tile
    units. Albedo from an 8-bit sRGB PNG, linearized; 0.5 everywhere when absent.
    """
    try:
        with Image.open(height_path) as im:
            raw = np.array(im)
    except OSError as e:
        path = os.fspath(height_path)
        raise InputError("could not read heightfield", path=path) from e

    if raw.ndim == 3:
        raw = raw[:, :, 0]
    full_scale = 65535.0 if raw.dtype != np.uint8 else 255.0
    # image row 0 is the top of the picture, i.e. the largest v
    heights = raw[::-1].astype(np.float64) / full_scale * height_scale
    res = heights.shape[0]
    if heights.shape[1] != res:
        raise ShapeMismatchError("heightfield must be square", shape=heights.shape)

    if albedo_path is not None:
        try:
            with Image.open(albedo_path) as im:
                rgb = np.array(im.convert("RGB"))[::-1]
        except OSError as e:
            path = os.fspath(albedo_path)
            raise InputError("could not read albedo", path=path) from e
        if rgb.shape[:2] != (res, res):
            raise ShapeMismatchError(
                "albedo image must match the heightfield",
                heights=heights.shape,
                albedo=rgb.shape[:2],
            )
        albedo = srgb_to_linear(rgb.astype(np.float64) / 255.0)
    else:
        albedo = _constant_albedo(res, 0.5)

    rough = np.full((res, res), roughness) if roughness is not None else None
    return Heightfield(heights, albedo, rough)


@dataclass
class HitBatch:
    point: FloatArray
    uv: FloatArray
    normal: FloatArray


def _first_crossing(
    hf: Heightfield,
    origin: FloatArray,
    direction: FloatArray,
    t_start: FloatArray,
    t_end: FloatArray,
) -> Tuple[BoolArray, FloatArray]:
    """
    Marches each ray from `t_start` to `t_end` in quarter-texel steps, bisects the first
    step that ends on or below the surface, and finishes with a secant estimate inside
    the last bracket. Returns `(hit mask, t)`.
    """
    n = origin.shape[0]
    dt = MARCH_STEP_TEXELS / hf.resolution
    t_lo = t_start.copy()
    t_hi = t_start.copy()
    hit = np.zeros(n, dtype=bool)

    def gap(idx: IntArray, t: FloatArray) -> FloatArray:
        p = origin[idx] + t[:, None] * direction[idx]
        return p[:, 2] - hf.height_at(p[:, :2])

    active = np.arange(n)
    at_start = gap(active, t_start) <= 0
    hit[at_start] = True
    active = active[~at_start]

    t_prev = t_start[active]
    while active.size > 0:
        t = np.minimum(t_prev + dt, t_end[active])
        below = gap(active, t) <= 0
        crossed = active[below]
        hit[crossed] = True
        t_lo[crossed] = t_prev[below]
        t_hi[crossed] = t[below]

        keep = ~below & (t < t_end[active])
        active = active[keep]
        t_prev = t[keep]

    idx = np.flatnonzero(hit)
    lo = t_lo[idx]
    hi = t_hi[idx]
    for _ in range(BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        below = gap(idx, mid) <= 0
        hi = np.where(below, mid, hi)
        lo = np.where(below, lo, mid)

    g_lo = gap(idx, lo)
    g_hi = gap(idx, hi)
    denom = g_lo - g_hi
    safe = np.where(denom > 0, denom, 1.0)
    secant = np.clip(lo + (hi - lo) * g_lo / safe, lo, hi)

    t_hit = np.full(n, np.inf)
    t_hit[idx] = np.where(denom > 0, secant, hi)
    return hit, t_hit


def intersect_batch(
    hf: Heightfield, origin: FloatArray, direction: FloatArray
) -> HitBatch:
    """
    Intersects descending rays with the surface. Every such ray hits.
    """
    origin = np.asarray(origin, dtype=np.float64).reshape(-1, 3)
    direction = np.asarray(direction, dtype=np.float64).reshape(-1, 3)
    if np.any(direction[:, 2] >= 0):
        raise ContractViolation("primary rays must descend")

    hmax = hf.max_height
    hmin = hf.min_height
    dz = -direction[:, 2]
    t_start = np.maximum(0.0, (origin[:, 2] - hmax) / dz)
    # one step past the lowest point: the last sample is below the surface
    dt = MARCH_STEP_TEXELS / hf.resolution
    t_end = np.maximum(t_start, (origin[:, 2] - hmin) / dz) + dt
    hit, t = _first_crossing(hf, origin, direction, t_start, t_end)
    if not np.all(hit):
        raise InvariantError("descending ray missed the heightfield")

    point = origin + t[:, None] * direction
    xy = point[:, :2]
    return HitBatch(point=point, uv=np.mod(xy, 1.0), normal=hf.normal_at(xy))


@dataclass
class Hit:
    uv: UV
    height: float
    normal: FloatArray


def heightfield_intersect(
    hf: Heightfield, origin: Sequence[float], direction: Sequence[float]
) -> Hit:
    d = np.asarray(direction, dtype=np.float64)
    unit = d / np.linalg.norm(d)
    hits = intersect_batch(hf, np.asarray(origin)[None, :], unit[None])
    return Hit(
        uv=(float(hits.uv[0, 0]), float(hits.uv[0, 1])),
        height=float(hits.point[0, 2]),
        normal=hits.normal[0],
    )


def _occluded(
    hf: Heightfield, origin: FloatArray, direction: FloatArray
) -> BoolArray:
    """
    Whether rays leaving the surface along `direction` hit it again before clearing the
    highest point of the tile.
    """
    n = origin.shape[0]
    occluded = np.zeros(n, dtype=bool)
    up = direction[:, 2] > 1e-9
    # rays with no upward component never clear the tile; cap travel at two tiles
    t_end = np.full(n, 2.0)
    t_end[up] = np.minimum(
        2.0, np.maximum(0.0, (hf.max_height - origin[up, 2]) / direction[up, 2])
    )
    t_start = np.full(n, MARCH_STEP_TEXELS / hf.resolution)
    marching = t_end > t_start
    if np.any(marching):
        hit, _ = _first_crossing(
            hf,
            origin[marching],
            direction[marching],
            t_start[marching],
            t_end[marching],
        )
        occluded[marching] = hit
    return occluded


def _orthonormal_basis(n: FloatArray) -> Tuple[FloatArray, FloatArray]:
    sign = np.where(n[:, 2] >= 0, 1.0, -1.0)
    a = -1.0 / (sign + n[:, 2])
    b = n[:, 0] * n[:, 1] * a
    t1 = np.stack([1.0 + sign * n[:, 0] ** 2 * a, sign * b, -sign * n[:, 0]], axis=1)
    t2 = np.stack([b, sign + n[:, 1] ** 2 * a, -n[:, 1]], axis=1)
    return t1, t2


def _to_vector(d: FloatArray) -> FloatArray:
    z = np.sqrt(np.maximum(0.0, 1.0 - d[:, 0] ** 2 - d[:, 1] ** 2))
    return np.stack([d[:, 0], d[:, 1], z], axis=1)


def _jitter_cone(
    rng: np.random.Generator, axis: FloatArray, half_angle_deg: float
) -> FloatArray:
    """
    Uniform directions within a cone around each `axis`; directions that would fall
    below the horizon keep their axis.
    """
    if half_angle_deg <= 0:
        return axis
    n = axis.shape[0]
    cos_max = math.cos(math.radians(half_angle_deg))
    cos_t = 1.0 - rng.uniform(0.0, 1.0, size=n) * (1.0 - cos_max)
    sin_t = np.sqrt(np.maximum(0.0, 1.0 - cos_t * cos_t))
    phi = rng.uniform(0.0, 2.0 * np.pi, size=n)
    t1, t2 = _orthonormal_basis(axis)
    d = (
        (sin_t * np.cos(phi))[:, None] * t1
        + (sin_t * np.sin(phi))[:, None] * t2
        + cos_t[:, None] * axis
    )
    return np.where(d[:, 2:3] > 1e-6, d, axis)


@dataclass
class OracleOptions:
    jitter_deg: float = 5.0
    indirect: bool = False
    n_samples: int = DEFAULT_ORACLE_SAMPLES


def _surface_offset(hf: Heightfield) -> float:
    return 1e-3 / hf.resolution


def _direct(
    hf: Heightfield,
    point: FloatArray,
    normal: FloatArray,
    light: FloatArray,
    view: FloatArray,
) -> FloatArray:
    """
    Reflected radiance toward `view` from the distant light, with a shadow ray.
    """
    xy = point[:, :2]
    cos_n = np.maximum(0.0, np.sum(normal * light, axis=1))
    lit = cos_n > 0
    visible = np.zeros(point.shape[0], dtype=bool)
    if np.any(lit):
        start = point[lit] + _surface_offset(hf) * normal[lit]
        visible[lit] = ~_occluded(hf, start, light[lit])

    # irradiance 1 on the reference plane means radiance 1 / light.z from the light
    weight = np.where(visible, cos_n / light[:, 2], 0.0)
    brdf = hf.albedo_at(xy) / np.pi

    roughness = hf.roughness_at(xy)
    if roughness is not None:
        r = np.clip(roughness, 0.05, 1.0)
        exponent = 2.0 / (r * r) - 2.0
        half = light + view
        half /= np.linalg.norm(half, axis=1, keepdims=True)
        cos_h = np.maximum(0.0, np.sum(normal * half, axis=1))
        lobe = SPECULAR_WEIGHT * (exponent + 8.0) / (8.0 * np.pi) * cos_h**exponent
        brdf = brdf + lobe[:, None]

    return brdf * weight[:, None]


def btf_eval_oracle_batch(
    hf: Heightfield,
    uv: FloatArray,
    wi: FloatArray,
    wo: FloatArray,
    rng: np.random.Generator,
    options: Optional[OracleOptions] = None,
) -> FloatArray:
    """
    One-sample estimate of the reflectance at N surface positions. The camera ray
    arrives along −wo through (u, v, 0) and is shaded by the jittered light `wi`, plus
    one cosine-sampled indirect bounce when enabled.
    """
    options = opt_or(options, OracleOptions())
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    check_directions(wi, "wi")
    check_directions(wo, "wo")
    n = uv.shape[0]

    view = _to_vector(wo)
    ray = -view
    ray[:, 2] = np.minimum(ray[:, 2], -MIN_RAY_SLOPE)
    ray /= np.linalg.norm(ray, axis=1, keepdims=True)
    lift = (hf.max_height + _surface_offset(hf)) / -ray[:, 2]
    origin = np.concatenate([uv, np.zeros((n, 1))], axis=1) - lift[:, None] * ray
    hits = intersect_batch(hf, origin, ray)

    light = _jitter_cone(rng, _to_vector(wi), options.jitter_deg)
    out = _direct(hf, hits.point, hits.normal, light, view)

    if options.indirect:
        disk, _ = sample_cosine(rng, n)
        local = _to_vector(disk)
        t1, t2 = _orthonormal_basis(hits.normal)
        bounce = (
            local[:, 0:1] * t1 + local[:, 1:2] * t2 + local[:, 2:3] * hits.normal
        )
        start = hits.point + _surface_offset(hf) * hits.normal
        out += _indirect(hf, start, bounce, light) * hf.albedo_at(hits.point[:, :2])

    return out


def _indirect(
    hf: Heightfield, start: FloatArray, bounce: FloatArray, light: FloatArray
) -> FloatArray:
    """
    Direct radiance arriving back along cosine-sampled `bounce` rays; zero for rays that
    escape (the light is the only emitter).
    """
    n = start.shape[0]
    radiance = np.zeros((n, 3))
    up = bounce[:, 2] > 1e-9
    t_end = np.full(n, 2.0)
    t_end[up] = np.minimum(
        2.0, np.maximum(0.0, (hf.max_height - start[up, 2]) / bounce[up, 2])
    )
    t_start = np.full(n, MARCH_STEP_TEXELS / hf.resolution)
    marching = np.flatnonzero(t_end > t_start)
    if marching.size == 0:
        return radiance

    hit, t = _first_crossing(
        hf, start[marching], bounce[marching], t_start[marching], t_end[marching]
    )
    idx = marching[hit]
    if idx.size == 0:
        return radiance

    point = start[idx] + t[hit][:, None] * bounce[idx]
    normal = hf.normal_at(point[:, :2])
    radiance[idx] = _direct(hf, point, normal, light[idx], -bounce[idx])
    return radiance


def btf_eval_oracle(
    hf: Heightfield,
    p: UV,
    wi: Direction,
    wo: Direction,
    rng: np.random.Generator,
    options: Optional[OracleOptions] = None,
) -> FloatArray:
    return btf_eval_oracle_batch(
        hf,
        np.array([p], dtype=np.float64),
        wi.as_array()[None, :],
        wo.as_array()[None, :],
        rng,
        options,
    )[0]


def mbtf_oracle_batch(
    hf: Heightfield,
    uv: FloatArray,
    sigma: FloatArray,
    wi: FloatArray,
    wo: FloatArray,
    rng: np.random.Generator,
    options: Optional[OracleOptions] = None,
) -> FloatArray:
    """
    Gaussian-footprint average of the oracle: `n_samples` positions per query drawn from
    a normal distribution centered at `uv` with standard deviation `sigma` (tile units).
    """
    options = opt_or(options, OracleOptions())
    uv = np.asarray(uv, dtype=np.float64).reshape(-1, 2)
    sigma = np.asarray(sigma, dtype=np.float64).reshape(-1)
    if np.any(sigma < 0):
        raise ContractViolation("kernel size must be non-negative")

    wi = np.asarray(wi, dtype=np.float64).reshape(-1, 2)
    wo = np.asarray(wo, dtype=np.float64).reshape(-1, 2)
    n = uv.shape[0]
    s = options.n_samples
    jitter = rng.normal(0.0, 1.0, size=(n, s, 2)) * sigma[:, None, None]
    positions = (uv[:, None, :] + jitter).reshape(n * s, 2)
    rgb = btf_eval_oracle_batch(
        hf,
        positions,
        np.repeat(wi, s, axis=0),
        np.repeat(wo, s, axis=0),
        rng,
        options,
    )
    return rgb.reshape(n, s, 3).mean(axis=1)


def mbtf_oracle(
    hf: Heightfield,
    p: UV,
    sigma: float,
    wi: Direction,
    wo: Direction,
    n_samples: int,
    rng: np.random.Generator,
    options: Optional[OracleOptions] = None,
) -> FloatArray:
    options = dataclasses.replace(opt_or(options, OracleOptions()), n_samples=n_samples)
    return mbtf_oracle_batch(
        hf,
        np.array([p], dtype=np.float64),
        np.array([sigma]),
        wi.as_array()[None, :],
        wo.as_array()[None, :],
        rng,
        options,
    )[0]


@dataclass
class QueryDataset:
    """
    Records as an (N, 10) array of columns u, v, sigma, wi.x, wi.y, wo.x, wo.y, r, g, b.
    Values are float32-representable, so writing and reading back is exact.
    """

    k: int
    records: FloatArray
    flags: int = 0

    def __post_init__(self) -> None:
        if self.records.ndim != 2 or self.records.shape[1] != FIELDS:
            raise ShapeMismatchError(
                "records must have shape (N, 10)", shape=self.records.shape
            )

    def __len__(self) -> int:
        return self.records.shape[0]

    @property
    def queries(self) -> QueryBatch:
        return records_to_queries(self.records)

    @property
    def targets(self) -> FloatArray:
        return self.records[:, 7:10]


def records_to_queries(records: FloatArray) -> QueryBatch:
    return QueryBatch(
        uv=records[:, 0:2],
        sigma=records[:, 2],
        wi=records[:, 3:5],
        wo=records[:, 5:7],
    )


def per_texel_in_range(per_texel: int) -> bool:
    lo, hi = RECOMMENDED_PER_TEXEL
    return lo <= per_texel <= hi


def per_texel_warning(per_texel: int) -> str:
    lo, hi = RECOMMENDED_PER_TEXEL
    return (
        f"{per_texel} queries per texel is outside the recommended range {lo}-{hi}"
    )


def record_count(k: int, per_texel: int) -> int:
    return (4**k) * per_texel


def _log_uniform_sigma(rng: np.random.Generator, k: int, n: int) -> FloatArray:
    lo, _ = sigma_range(k)
    return np.exp(rng.uniform(math.log(lo), math.log(0.5), size=n))


def _round_f32(a: FloatArray) -> FloatArray:
    return a.astype(np.float32).astype(np.float64)


def _sample_chunk(
    hf: Heightfield,
    k: int,
    seed: int,
    chunk: int,
    n: int,
    options: OracleOptions,
) -> FloatArray:
    rng = np.random.default_rng([seed, chunk])
    uv = rng.uniform(0.0, 1.0, size=(n, 2))
    wi, _ = sample_cosine(rng, n)
    wo, _ = sample_cosine(rng, n)
    sigma = _log_uniform_sigma(rng, k, n)
    # queries are stored as float32; the oracle sees exactly what the trainer will
    uv, wi, wo = _round_f32(uv), _round_f32(wi), _round_f32(wo)
    sigma = _round_f32(sigma)
    rgb = mbtf_oracle_batch(hf, uv, sigma, wi, wo, rng, options)
    records = np.concatenate([uv, sigma[:, None], wi, wo, rgb], axis=1)
    return _round_f32(records)


def iter_query_chunks(
    hf: Heightfield,
    k: int,
    per_texel: int,
    seed: int,
    options: Optional[OracleOptions] = None,
    *,
    threads: int = 1,
) -> Iterator[FloatArray]:
    """
    Yields the dataset in chunks of `CHUNK_RECORDS`, in order. Chunk `i` draws from its
    own generator seeded with `(seed, i)`, so the output does not depend on the thread
    count.
    """
    options = opt_or(options, OracleOptions())
    total = record_count(k, per_texel)
    sizes = [
        min(CHUNK_RECORDS, total - start) for start in range(0, total, CHUNK_RECORDS)
    ]

    def work(chunk: int) -> FloatArray:
        LOG.debug("generating chunk %d of %d", chunk + 1, len(sizes))
        return _sample_chunk(hf, k, seed, chunk, sizes[chunk], options)

    if threads <= 1:
        for chunk in range(len(sizes)):
            yield work(chunk)
        return

    with ThreadPoolExecutor(max_workers=threads) as pool:
        # bounded window keeps memory flat for large datasets
        window = threads * 2
        pending = [pool.submit(work, c) for c in range(min(window, len(sizes)))]
        next_chunk = len(pending)
        while pending:
            records = pending.pop(0).result()
            if next_chunk < len(sizes):
                pending.append(pool.submit(work, next_chunk))
                next_chunk += 1
            yield records


def dataset_flags(options: OracleOptions) -> int:
    return FLAG_SYNTHETIC | (FLAG_INDIRECT if options.indirect else 0)


def sample_queries(
    hf: Heightfield,
    k: int,
    per_texel: int,
    seed: int,
    options: Optional[OracleOptions] = None,
    *,
    threads: int = 1,
) -> QueryDataset:
    """
    `4^k · per_texel` queries: positions uniform over the tile, both directions
    cosine-distributed, kernel sizes log-uniform over [2^-(k+1), 1/2], targets from
    `mbtf_oracle`.
    """
    options = opt_or(options, OracleOptions())
    if not per_texel_in_range(per_texel):
        LOG.warning(per_texel_warning(per_texel))
    chunks = list(iter_query_chunks(hf, k, per_texel, seed, options, threads=threads))
    records = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, FIELDS))
    return QueryDataset(k=k, records=records, flags=dataset_flags(options))


@dataclass
class DatasetHeader:
    k: int
    count: int
    flags: int


def validate_records(records: FloatArray, path: str = "", first_index: int = 0) -> None:
    """
    Rejects non-finite values, directions outside the unit disk, non-positive kernel
    sizes and negative targets.
    """
    if not np.all(np.isfinite(records)):
        bad = int(np.argmax(~np.all(np.isfinite(records), axis=1)))
        raise NonFiniteValueError(
            "record has non-finite values", path=path, record=first_index + bad
        )

    problems = [
        (~(records[:, 2] > 0), "kernel size must be positive"),
        (np.any(records[:, 7:10] < 0, axis=1), "target must be non-negative"),
        (
            records[:, 3] ** 2 + records[:, 4] ** 2 > 1.0 + 1e-6,
            "wi is outside the upper hemisphere",
        ),
        (
            records[:, 5] ** 2 + records[:, 6] ** 2 > 1.0 + 1e-6,
            "wo is outside the upper hemisphere",
        ),
    ]
    for mask, message in problems:
        if np.any(mask):
            raise InvalidRecordError(
                message, path=path, record=first_index + int(np.argmax(mask))
            )


def _pack(records: FloatArray) -> bytes:
    packed = np.zeros((records.shape[0], RECORD_FLOATS), dtype="<f4")
    packed[:, :FIELDS] = records
    return packed.tobytes()


class DatasetWriter:
    """
    Streams records into a `.mbtfq` file. The header's record count is patched in on
    close; the file only appears at `path` once closed successfully.
    """

    def __init__(self, path: PathLike, k: int, flags: int) -> None:
        self.path = os.fspath(path)
        self.k = k
        self.flags = flags
        self.count = 0
        self._cm = atomic_write(self.path)
        self._f = self._cm.__enter__()
        self._write_header()

    def _write_header(self) -> None:
        w = ByteWriter(self._f)
        w.raw(MAGIC)
        w.u32(FORMAT_VERSION)
        w.u32(self.k)
        w.u64(self.count)
        w.u32(self.flags)

    def write(self, records: FloatArray) -> None:
        records = np.asarray(records, dtype=np.float64).reshape(-1, FIELDS)
        validate_records(records, self.path, self.count)
        self._f.write(_pack(records))
        self.count += records.shape[0]

    def close(self) -> None:
        self._f.seek(0)
        self._write_header()
        self._f.seek(0, os.SEEK_END)
        self._cm.__exit__(None, None, None)

    def abort(self, e: BaseException) -> None:
        with contextlib.suppress(BaseException):
            self._cm.__exit__(type(e), e, e.__traceback__)

    def __enter__(self) -> "DatasetWriter":
        return self

    def __exit__(self, exc_type: Any, exc: Any, tb: Any) -> None:
        if exc is None:
            self.close()
        else:
            self.abort(exc)


def dataset_write(ds: QueryDataset, path: PathLike) -> None:
    with DatasetWriter(path, ds.k, ds.flags) as w:
        for start in range(0, len(ds), 65536):
            w.write(ds.records[start : start + 65536])


def read_dataset_header(path: PathLike) -> DatasetHeader:
    """
    Reads and checks the header, including that the file holds exactly `count` records.
    """
    try:
        size = os.path.getsize(path)
        f = open(path, "rb")
    except OSError as e:
        raise InputError("could not open dataset", path=os.fspath(path)) from e

    with f:
        r = ByteReader(f, path)
        r.magic(MAGIC)
        r.version(FORMAT_VERSION)
        k = r.u32("k")
        count = r.u64("count")
        flags = r.u32("flags")

    expected = HEADER_BYTES + count * RECORD_BYTES
    if size < expected:
        raise TruncatedFileError(
            "dataset is shorter than its record count",
            path=os.fspath(path),
            count=count,
            expected_bytes=expected,
            actual_bytes=size,
        )
    if size > expected:
        raise FormatError(
            "trailing bytes after the last record",
            path=os.fspath(path),
            expected_bytes=expected,
            actual_bytes=size,
        )
    return DatasetHeader(k=k, count=count, flags=flags)


def dataset_iter(
    path: PathLike, chunk_records: int = 65536
) -> Iterator[FloatArray]:
    """
    Streams validated (n, 10) record chunks without loading the whole file.
    """
    header = read_dataset_header(path)
    with open(path, "rb") as f:
        r = ByteReader(f, path)
        r.read_exact(HEADER_BYTES, "header")
        done = 0
        while done < header.count:
            n = min(chunk_records, header.count - done)
            raw = r.read_exact(n * RECORD_BYTES, "records")
            packed = np.frombuffer(raw, dtype="<f4").reshape(n, RECORD_FLOATS)
            if np.any(packed[:, FIELDS:] != 0):
                bad = int(np.argmax(np.any(packed[:, FIELDS:] != 0, axis=1)))
                raise InvalidRecordError(
                    "reserved fields must be zero",
                    path=os.fspath(path),
                    record=done + bad,
                )
            records = packed[:, :FIELDS].astype(np.float64)
            validate_records(records, os.fspath(path), done)
            yield records
            done += n


def dataset_read(path: PathLike) -> QueryDataset:
    header = read_dataset_header(path)
    chunks = list(dataset_iter(path))
    records = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, FIELDS))
    return QueryDataset(k=header.k, records=records, flags=header.flags)
