"""
CPU renderer for a neural material mapped onto a plane.

A pinhole camera traces one ray per pixel sample to the plane. The hit becomes a
material query: uv from the plane parameterization, kernel size from the pixel
footprint, light and view directions in the plane's tangent frame. Queries go through
a buffer and are shaded in batches.

Images are (height, width, 3) arrays of linear RGB with row 0 at the top.
"""

from concurrent.futures import ThreadPoolExecutor

import numpy as np
from PIL import Image as PILImage

from ..datagen import Heightfield, OracleOptions, mbtf_oracle_batch
from ..material import MbtfMaterial, QueryBatch, evaluate_batch, sample_cosine
from ..prelude import *
from ..pyramid import clamp_sigma

FOOTPRINT_SCALE = 0.5
BAND_ROWS = 16

# shades a batch of queries; the second argument holds one integer key row per query
ShadeFn = Callable[[QueryBatch, IntArray], FloatArray]


def _vec3(x: Sequence[float], what: str) -> FloatArray:
    a = np.asarray(x, dtype=np.float64).reshape(-1)
    if a.shape != (3,) or not np.all(np.isfinite(a)):
        raise ConfigError("expected three finite numbers", field=what, value=list(a))
    return a


def _normalize(v: FloatArray) -> FloatArray:
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@dataclass
class Camera:
    position: FloatArray
    look_at: FloatArray
    up: FloatArray = dataclasses.field(
        default_factory=lambda: np.array([0.0, 0.0, 1.0])
    )
    fov_deg: float = 40.0
    width: int = 256
    height: int = 256

    def basis(self) -> Tuple[FloatArray, FloatArray, FloatArray]:
        """
        (forward, right, up) unit vectors.
        """
        forward = _normalize(self.look_at - self.position)
        right = _normalize(np.cross(forward, self.up))
        return forward, right, np.cross(right, forward)

    def pixel_steps(self) -> Tuple[FloatArray, FloatArray, FloatArray]:
        """
        Unnormalized ray direction at the image's top-left corner, and its change per
        pixel to the right and per pixel down.
        """
        forward, right, up = self.basis()
        half_h = math.tan(math.radians(self.fov_deg) / 2.0)
        half_w = half_h * self.width / self.height
        corner = forward - half_w * right + half_h * up
        step_x = right * (2.0 * half_w / self.width)
        step_y = -up * (2.0 * half_h / self.height)
        return corner, step_x, step_y

    def ray_directions(self, px: FloatArray, py: FloatArray) -> FloatArray:
        """
        Unnormalized directions through continuous pixel coordinates. (0, 0) is the
        top-left corner of the image and (width, height) the bottom-right one.
        """
        corner, dx, dy = self.pixel_steps()
        return corner + px[:, None] * dx + py[:, None] * dy


@dataclass
class Plane:
    origin: FloatArray = dataclasses.field(default_factory=lambda: np.zeros(3))
    u: FloatArray = dataclasses.field(default_factory=lambda: np.array([1.0, 0.0, 0.0]))
    v: FloatArray = dataclasses.field(default_factory=lambda: np.array([0.0, 1.0, 0.0]))
    tiling: float = 1.0

    @property
    def normal(self) -> FloatArray:
        return _normalize(np.cross(self.u, self.v))

    def frame(self) -> Tuple[FloatArray, FloatArray, FloatArray]:
        """
        Tangent, bitangent and normal of the material frame.
        """
        n = self.normal
        t = _normalize(self.u)
        return t, np.cross(n, t), n

    def to_local(self, d: FloatArray) -> FloatArray:
        t, b, n = self.frame()
        return np.stack([d @ t, d @ b, d @ n], axis=-1)

    def uv_of(self, offsets: FloatArray) -> FloatArray:
        """
        Texture coordinates of points given relative to the plane origin.
        """
        gram = np.array(
            [[self.u @ self.u, self.u @ self.v], [self.u @ self.v, self.v @ self.v]]
        )
        rhs = np.stack([offsets @ self.u, offsets @ self.v], axis=1)
        return np.linalg.solve(gram, rhs.T).T * self.tiling


@dataclass
class Light:
    direction: FloatArray = dataclasses.field(
        default_factory=lambda: np.array([0.0, 0.0, 1.0])
    )
    irradiance: FloatArray = dataclasses.field(default_factory=lambda: np.ones(3))


@dataclass
class Scene:
    camera: Camera
    plane: Plane = dataclasses.field(default_factory=Plane)
    light: Light = dataclasses.field(default_factory=Light)
    material: str = ""
    env_radiance: FloatArray = dataclasses.field(default_factory=lambda: np.zeros(3))
    spp: int = 1
    seed: int = 0
    indirect: bool = False

    def validate(self) -> None:
        cam = self.camera
        if cam.width < 1 or cam.height < 1:
            raise ConfigError(
                "image size must be positive", width=cam.width, height=cam.height
            )
        if not 0.0 < cam.fov_deg < 180.0:
            raise ConfigError(
                "field of view must be in (0, 180) degrees", fov=cam.fov_deg
            )
        if self.spp < 1:
            raise ConfigError("samples per pixel must be at least 1", spp=self.spp)
        if not self.plane.tiling > 0:
            raise ConfigError("plane tiling must be positive", tiling=self.plane.tiling)
        if np.linalg.norm(np.cross(self.plane.u, self.plane.v)) < 1e-12:
            raise ConfigError("plane tangents are parallel")

        forward = self.camera.look_at - self.camera.position
        if np.linalg.norm(np.cross(forward, cam.up)) < 1e-9 * np.linalg.norm(forward):
            raise ConfigError("camera up vector is parallel to the view direction")

        n = self.plane.normal
        if not (self.camera.position - self.plane.origin) @ n > 0:
            raise ConfigError("camera must be above the plane")
        if not self.light.direction @ n > 0:
            raise ConfigError("light must be above the plane")
        if np.any(self.light.irradiance < 0) or np.any(self.env_radiance < 0):
            raise ConfigError("light and environment radiance must not be negative")


SCENE_KEYS = {
    "camera.position",
    "camera.look_at",
    "camera.up",
    "camera.fov",
    "camera.width",
    "camera.height",
    "plane.origin",
    "plane.u",
    "plane.v",
    "plane.tiling",
    "light.direction",
    "light.irradiance",
    "env.radiance",
    "material",
    "spp",
    "seed",
    "indirect",
}


def _parse_numbers(value: str) -> List[float]:
    return [float(x) for x in value.replace(",", " ").split()]


def _parse_bool(value: str) -> bool:
    lowered = value.lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(value)


def load_scene(path: PathLike) -> Scene:
    """
    Reads a key-value scene file. A relative `material` path is taken relative to the
    scene file.
    """
    values: Dict[str, str] = {}
    for kv in read_key_values(path):
        if kv.key not in SCENE_KEYS:
            raise ConfigError(
                "unknown scene key", key=kv.key, path=os.fspath(path), line=kv.lineno
            )
        values[kv.key] = kv.value

    for required in ("camera.position", "camera.look_at"):
        if required not in values:
            raise ConfigError("missing scene key", key=required, path=os.fspath(path))

    def vec(key: str, default: Sequence[float]) -> FloatArray:
        if key not in values:
            return np.array(default, dtype=np.float64)
        try:
            return _vec3(_parse_numbers(values[key]), key)
        except ValueError as e:
            raise ConfigError("not a vector", key=key, value=values[key]) from e

    def num(key: str, default: float) -> float:
        try:
            return float(values[key]) if key in values else default
        except ValueError as e:
            raise ConfigError("not a number", key=key, value=values[key]) from e

    def integer(key: str, default: int) -> int:
        try:
            return int(values[key]) if key in values else default
        except ValueError as e:
            raise ConfigError("not an integer", key=key, value=values[key]) from e

    try:
        indirect = _parse_bool(values.get("indirect", "false"))
    except ValueError as e:
        raise ConfigError(
            "not a boolean", key="indirect", value=values["indirect"]
        ) from e

    material = values.get("material", "")
    if material and not os.path.isabs(material):
        material = os.path.join(os.path.dirname(os.fspath(path)), material)

    scene = Scene(
        camera=Camera(
            position=vec("camera.position", [0, 0, 0]),
            look_at=vec("camera.look_at", [0, 0, 0]),
            up=vec("camera.up", [0, 0, 1]),
            fov_deg=num("camera.fov", 40.0),
            width=integer("camera.width", 256),
            height=integer("camera.height", 256),
        ),
        plane=Plane(
            origin=vec("plane.origin", [0, 0, 0]),
            u=vec("plane.u", [1, 0, 0]),
            v=vec("plane.v", [0, 1, 0]),
            tiling=num("plane.tiling", 1.0),
        ),
        light=Light(
            direction=vec("light.direction", [0, 0, 1]),
            irradiance=vec("light.irradiance", [1, 1, 1]),
        ),
        material=material,
        env_radiance=vec("env.radiance", [0, 0, 0]),
        spp=integer("spp", 1),
        seed=integer("seed", 0),
        indirect=indirect,
    )
    scene.validate()
    return scene


@dataclass
class PlaneHits:
    hit: BoolArray
    uv: FloatArray
    view: FloatArray


def trace_plane(scene: Scene, px: FloatArray, py: FloatArray) -> PlaneHits:
    """
    Intersects the camera rays through continuous pixel coordinates with the plane.
    `view` is the unit vector from the hit toward the camera.
    """
    plane = scene.plane
    n = plane.normal
    d = scene.camera.ray_directions(px, py)
    denom = d @ n
    height = (scene.camera.position - plane.origin) @ n
    # the camera is above the plane, so only rays heading down can hit it
    hit = denom < 0
    t = np.where(hit, -height / np.where(hit, denom, -1.0), 0.0)
    offsets = scene.camera.position - plane.origin + t[:, None] * d
    return PlaneHits(hit=hit, uv=plane.uv_of(offsets), view=-_normalize(d))


def _analytic_uv_steps(
    scene: Scene, px: FloatArray, py: FloatArray
) -> Tuple[FloatArray, FloatArray]:
    """
    uv change per pixel step from differentiating the ray-plane intersection.
    """
    plane = scene.plane
    n = plane.normal
    _, dx, dy = scene.camera.pixel_steps()
    w = scene.camera.ray_directions(px, py)
    wn = w @ n
    safe = np.where(wn < 0, wn, -1e-12)
    t = -((scene.camera.position - plane.origin) @ n) / safe

    steps: List[FloatArray] = []
    for dw in (dx, dy):
        dp = t[:, None] * (dw[None, :] - w * ((dw @ n) / safe)[:, None])
        steps.append(plane.uv_of(dp))
    return steps[0], steps[1]


def pixel_footprint_sigma_batch(
    scene: Scene, px: FloatArray, py: FloatArray, uv: FloatArray, k: int
) -> FloatArray:
    """
    Kernel size for samples at continuous pixel coordinates whose rays hit `uv`: half
    the larger uv distance to the hits of rays one pixel to the right and one pixel
    down. Offset rays that miss the plane use the analytic derivative instead. The
    result is clamped to the range a pyramid with `k` levels can represent.
    """
    right = trace_plane(scene, px + 1.0, py)
    down = trace_plane(scene, px, py + 1.0)
    step_x, step_y = _analytic_uv_steps(scene, px, py)
    du = np.where(right.hit[:, None], right.uv - uv, step_x)
    dv = np.where(down.hit[:, None], down.uv - uv, step_y)
    extent = np.maximum(np.linalg.norm(du, axis=1), np.linalg.norm(dv, axis=1))
    return clamp_sigma(FOOTPRINT_SCALE * extent, k)


def pixel_footprint_sigma(
    scene: Scene, pixel: Tuple[int, int], uv: Sequence[float], k: int
) -> float:
    """
    Kernel size at the center of `pixel` = (column, row).
    """
    px = np.array([pixel[0] + 0.5])
    py = np.array([pixel[1] + 0.5])
    uv_batch = np.array([uv], dtype=np.float64)
    return float(pixel_footprint_sigma_batch(scene, px, py, uv_batch, k)[0])


class QueryBuffer:
    """
    Collects material queries with per-query weights and target pixels, and shades them
    `capacity` at a time. Results are accumulated into `out` in push order, so the image
    does not depend on the capacity.

    Each query may carry a key row (the renderer uses `[row, column, sample, bounce]`)
    that is handed to `shade` with it. A shader that seeds its randomness on the keys
    gives the same result however the queries are split into drains.
    """

    shade: ShadeFn
    out: FloatArray
    capacity: int
    drains: int

    _batch: Optional[QueryBatch]
    _weight: FloatArray
    _pixel: IntArray
    _keys: IntArray
    _cursor: int

    def __init__(self, shade: ShadeFn, out: FloatArray, capacity: int) -> None:
        if capacity < 1:
            raise ConfigError(
                "query buffer capacity must be at least 1", capacity=capacity
            )
        self.shade = shade
        self.out = out
        self.capacity = capacity
        self.drains = 0
        self._batch = None
        self._weight = np.zeros((0, 3))
        self._pixel = np.zeros(0, dtype=np.int64)
        self._keys = np.zeros((0, 0), dtype=np.int64)
        self._cursor = 0

    def pending(self) -> int:
        return 0 if self._batch is None else len(self._batch) - self._cursor

    def push(
        self,
        batch: QueryBatch,
        weight: FloatArray,
        pixel: IntArray,
        keys: Optional[IntArray] = None,
    ) -> None:
        n = len(batch)
        if n == 0:
            return

        weight = np.broadcast_to(weight, (n, 3))
        keys = np.zeros((n, 0), dtype=np.int64) if keys is None else np.asarray(keys)
        if self._batch is None:
            self._batch = batch
            self._weight = weight
            self._pixel = pixel
            self._keys = keys
        else:
            rest = self._batch.take(slice(self._cursor, None))
            self._batch = QueryBatch(
                uv=np.concatenate([rest.uv, batch.uv]),
                sigma=np.concatenate([rest.sigma, batch.sigma]),
                wi=np.concatenate([rest.wi, batch.wi]),
                wo=np.concatenate([rest.wo, batch.wo]),
            )
            self._weight = np.concatenate([self._weight[self._cursor :], weight])
            self._pixel = np.concatenate([self._pixel[self._cursor :], pixel])
            self._keys = np.concatenate([self._keys[self._cursor :], keys])
        self._cursor = 0

        while self.pending() >= self.capacity:
            self._drain(self.capacity)

    def flush(self) -> None:
        while self.pending() > 0:
            self._drain(min(self.capacity, self.pending()))

    def _drain(self, n: int) -> None:
        assert self._batch is not None
        s = slice(self._cursor, self._cursor + n)
        rgb = self.shade(self._batch.take(s), self._keys[s])
        np.add.at(self.out, self._pixel[s], rgb * self._weight[s])
        self._cursor += n
        self.drains += 1
        if self._cursor == len(self._batch):
            self._batch = None
            self._cursor = 0


@dataclass
class RenderOptions:
    batch_capacity: int = 4096
    threads: int = 1
    baseline: bool = False


@dataclass
class Image:
    data: FloatArray

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @classmethod
    def zeros(cls, width: int, height: int) -> "Image":
        return cls(np.zeros((height, width, 3)))


def _render_band(
    scene: Scene, k: int, shade: ShadeFn, capacity: int, band: int
) -> FloatArray:
    cam = scene.camera
    r0 = band * BAND_ROWS
    r1 = min(cam.height, r0 + BAND_ROWS)
    rows, cols = np.mgrid[r0:r1, 0 : cam.width]
    rows = rows.reshape(-1).astype(np.float64)
    cols = cols.reshape(-1).astype(np.float64)
    local_pixel = np.arange(rows.size, dtype=np.int64)

    out = np.zeros((rows.size, 3))
    light_local = scene.plane.to_local(_normalize(scene.light.direction))
    for s in range(scene.spp):
        rng = np.random.default_rng([scene.seed, band, s])
        buffer = QueryBuffer(shade, out, capacity)
        if scene.spp == 1:
            jitter = np.full((rows.size, 2), 0.5)
        else:
            jitter = rng.uniform(0.0, 1.0, size=(rows.size, 2))
        px = cols + jitter[:, 0]
        py = rows + jitter[:, 1]

        hits = trace_plane(scene, px, py)
        idx = np.flatnonzero(hits.hit)
        uv = hits.uv[idx]
        sigma = pixel_footprint_sigma_batch(scene, px[idx], py[idx], uv, k)
        wo = scene.plane.to_local(hits.view[idx])[:, :2]
        wi = np.broadcast_to(light_local[:2], wo.shape).copy()

        keys = np.zeros((idx.size, 4), dtype=np.int64)
        keys[:, 0] = rows[idx]
        keys[:, 1] = cols[idx]
        keys[:, 2] = s
        buffer.push(
            QueryBatch(uv=uv, sigma=sigma, wi=wi, wo=wo),
            scene.light.irradiance,
            local_pixel[idx],
            keys,
        )
        if scene.indirect and idx.size > 0:
            bounce, pdf = sample_cosine(rng, idx.size)
            cos = np.sqrt(np.maximum(0.0, 1.0 - np.sum(bounce * bounce, axis=1)))
            weight = scene.env_radiance[None, :] * (cos / pdf)[:, None]
            indirect = QueryBatch(uv=uv, sigma=sigma, wi=bounce, wo=wo)
            bounce_keys = keys.copy()
            bounce_keys[:, 3] = 1
            buffer.push(indirect, weight, local_pixel[idx], bounce_keys)
        buffer.flush()

    return (out / scene.spp).reshape(r1 - r0, cam.width, 3)


def _render(scene: Scene, k: int, shade: ShadeFn, options: RenderOptions) -> Image:
    scene.validate()
    n_bands = (scene.camera.height + BAND_ROWS - 1) // BAND_ROWS

    def work(band: int) -> FloatArray:
        return _render_band(scene, k, shade, options.batch_capacity, band)

    # bands are independent and seeded by index, so thread count never changes the image
    if options.threads > 1:
        with ThreadPoolExecutor(max_workers=options.threads) as pool:
            bands = list(pool.map(work, range(n_bands)))
    else:
        bands = [work(b) for b in range(n_bands)]
    return Image(np.concatenate(bands, axis=0))


def render(
    scene: Scene, mat: MbtfMaterial, options: Optional[RenderOptions] = None
) -> Image:
    """
    Renders the plane shaded with `mat`: direct light times the material, plus one
    cosine-sampled bounce toward the environment when the scene enables it.
    """
    options = opt_or(options, RenderOptions())
    baseline = options.baseline

    def shade(batch: QueryBatch, keys: IntArray) -> FloatArray:
        return evaluate_batch(mat, batch, baseline=baseline)

    with timed("render"):
        return _render(scene, mat.k, shade, options)


def render_reference(
    scene: Scene,
    hf: Heightfield,
    k: int,
    options: Optional[RenderOptions] = None,
    oracle: Optional[OracleOptions] = None,
) -> Image:
    """
    The same image shaded by the heightfield oracle at each sample's kernel size.

    The oracle's random footprint positions are drawn from a generator seeded on the
    scene seed and the query's pixel sample, so the image does not depend on
    `batch_capacity`. Queries are shaded one at a time, which makes this much slower
    than `render`.
    """
    options = opt_or(options, RenderOptions())
    oracle = opt_or(oracle, OracleOptions())

    def shade(batch: QueryBatch, keys: IntArray) -> FloatArray:
        out = np.empty((len(batch), 3))
        for n, key in enumerate(keys):
            rng = np.random.default_rng([scene.seed, *key.tolist()])
            one = slice(n, n + 1)
            out[n] = mbtf_oracle_batch(
                hf,
                batch.uv[one],
                batch.sigma[one],
                batch.wi[one],
                batch.wo[one],
                rng,
                oracle,
            )[0]
        return out

    with timed("reference render"):
        return _render(scene, k, shade, options)


def lod_sweep_scenes(scene: Scene, n: int) -> List[Scene]:
    """
    `n` copies of the scene with the camera at 1, 2, 4, ... times its distance from the
    look-at point.
    """
    out: List[Scene] = []
    for i in range(n):
        cam = scene.camera
        position = cam.look_at + (cam.position - cam.look_at) * 2.0**i
        moved = dataclasses.replace(cam, position=position)
        out.append(dataclasses.replace(scene, camera=moved))
    return out


def swatch_queries(
    level: float, resolution: int, wi: Sequence[float], wo: Sequence[float]
) -> QueryBatch:
    """
    Queries at the pixel centers of a `resolution`² image of one tile, all with kernel
    size 2^-level and the same directions.
    """
    centers = (np.arange(resolution) + 0.5) / resolution
    u, v = np.meshgrid(centers, centers)
    n = resolution * resolution
    return QueryBatch(
        uv=np.stack([u.reshape(-1), v.reshape(-1)], axis=1),
        sigma=np.full(n, 2.0**-level),
        wi=np.tile(np.asarray(wi, dtype=np.float64), (n, 1)),
        wo=np.tile(np.asarray(wo, dtype=np.float64), (n, 1)),
    )


def swatch_image(rgb: FloatArray, resolution: int) -> Image:
    # swatch rows run along v upward; images store the top row first
    return Image(rgb.reshape(resolution, resolution, 3)[::-1].copy())


def image_mse(a: Image, b: Image) -> float:
    if a.data.shape != b.data.shape:
        raise ShapeMismatchError(
            "images differ in size", a=a.data.shape, b=b.data.shape
        )
    d = a.data - b.data
    return float(np.mean(d * d))


def linear_to_srgb(c: FloatArray) -> FloatArray:
    c = np.clip(c, 0.0, 1.0)
    return np.where(c <= 0.0031308, 12.92 * c, 1.055 * np.power(c, 1.0 / 2.4) - 0.055)


def to_srgb8(img: Image) -> ByteArray:
    return np.round(linear_to_srgb(img.data) * 255.0).astype(np.uint8)


def write_pfm(img: Image, path: PathLike) -> None:
    """
    Little-endian color PFM; rows are stored bottom to top.
    """
    header = f"PF\n{img.width} {img.height}\n-1.0\n".encode("ascii")
    body = np.ascontiguousarray(img.data[::-1], dtype="<f4").tobytes()
    try:
        with open(path, "wb") as f:
            f.write(header)
            f.write(body)
    except OSError as e:
        raise InputError("could not write image", path=os.fspath(path)) from e


def read_pfm(path: PathLike) -> Image:
    try:
        with open(path, "rb") as f:
            raw = f.read()
    except OSError as e:
        raise InputError("could not read image", path=os.fspath(path)) from e

    parts = raw.split(b"\n", 3)
    if len(parts) < 4 or parts[0] not in (b"PF", b"Pf"):
        raise FormatError("not a PFM file", path=os.fspath(path))
    try:
        width, height = (int(x) for x in parts[1].split())
        scale = float(parts[2])
    except ValueError as e:
        raise FormatError("bad PFM header", path=os.fspath(path)) from e

    channels = 3 if parts[0] == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    expected = width * height * channels * 4
    if len(parts[3]) != expected:
        raise TruncatedFileError(
            "PFM data has the wrong size",
            path=os.fspath(path),
            expected=expected,
            actual=len(parts[3]),
        )

    data = np.frombuffer(parts[3], dtype=dtype).reshape(height, width, channels)
    data = data[::-1].astype(np.float64)
    if channels == 1:
        data = np.repeat(data, 3, axis=2)
    return Image(data)


def write_png(img: Image, path: PathLike) -> None:
    try:
        PILImage.fromarray(to_srgb8(img)).save(os.fspath(path), format="PNG")
    except OSError as e:
        raise InputError("could not write image", path=os.fspath(path)) from e


def image_export(img: Image, path: PathLike, fmt: str = "") -> None:
    """
    Writes `img` as PFM (linear float) or PNG (clamped, sRGB-encoded). An empty `fmt`
    is taken from the file extension.
    """
    if not np.all(np.isfinite(img.data)):
        raise InvariantError("image has non-finite pixels", path=os.fspath(path))

    fmt = (fmt or os.path.splitext(os.fspath(path))[1].lstrip(".")).lower()
    if fmt == "pfm":
        write_pfm(img, path)
    elif fmt == "png":
        write_png(img, path)
    else:
        raise InputError("unknown image format", path=os.fspath(path), format=fmt)
