"""
The deployable neural material: a feature pyramid, an optional neural-offset module
and an MLP decoder.

    evaluate(u, sigma, wi, wo) = decoder(pyramid(u + offset(u, wo), sigma), wi, wo)

Outputs are linear RGB reflectance (radiance per unit irradiance) and never negative.
"""

import numpy as np

from ..binfile import ByteReader, ByteWriter, atomic_write
from ..mlp import (
    Mlp,
    MlpCache,
    MlpGrads,
    decoder_dims,
    mlp_backward_batch,
    mlp_forward_batch,
    mlp_init,
    offset_mlp_dims,
)
from ..offset import (
    Direction,
    OffsetCache,
    OffsetModule,
    apply_offset_batch,
    check_directions,
    direction_z,
    offset_backward_batch,
)
from ..prelude import *
from ..pyramid import (
    NeuralPyramid,
    trilinear_backward_batch,
    trilinear_lookup_batch,
)
from ..texture import UV, FeatureTexture

DEFAULT_K = 9
DEFAULT_CHANNELS = 7
TEXTURE_INIT_STD = 0.01

MAGIC = b"NMAT"
FORMAT_VERSION = 1
FLAG_HAS_OFFSET = 1


@dataclass
class Provenance:
    iterations: int = 0
    dataset_sha256: bytes = bytes(32)


@dataclass
class MbtfMaterial:
    pyramid: NeuralPyramid
    decoder: Mlp
    offset: Optional[OffsetModule] = None
    provenance: Provenance = dataclasses.field(default_factory=Provenance)

    def __post_init__(self) -> None:
        if self.decoder.layer_dims != decoder_dims(self.pyramid.channels):
            raise ContractViolation(
                "decoder does not match the pyramid",
                expected=decoder_dims(self.pyramid.channels),
                actual=self.decoder.layer_dims,
            )
        if not self.decoder.final_relu:
            raise ContractViolation("decoder must clamp its output")

        if self.offset is not None and self.offset.texture.resolution != 2**self.k:
            raise ContractViolation(
                "offset texture must match the finest pyramid level",
                expected=2**self.k,
                actual=self.offset.texture.resolution,
            )

    @property
    def k(self) -> int:
        return self.pyramid.k

    @property
    def channels(self) -> int:
        return self.pyramid.channels

    @property
    def offset_channels(self) -> int:
        return self.offset.channels if self.offset is not None else 0

    @property
    def has_offset(self) -> bool:
        return self.offset is not None

    @classmethod
    def zeros(
        cls, k: int, channels: int, offset_channels: int, *, with_offset: bool = True
    ) -> "MbtfMaterial":
        return cls(
            pyramid=NeuralPyramid.zeros(k, channels),
            decoder=Mlp.zeros(decoder_dims(channels), final_relu=True),
            offset=OffsetModule.zeros(k, offset_channels) if with_offset else None,
        )

    @classmethod
    def init(
        cls,
        k: int,
        channels: int,
        offset_channels: int,
        seed: int,
        *,
        with_offset: bool = True,
        texture_std: float = TEXTURE_INIT_STD,
    ) -> "MbtfMaterial":
        """
        Random initialization: textures normal(0, `texture_std`), fan-in uniform MLP
        weights. Parameters are rounded to float32 so that saving is lossless.
        """
        rng = np.random.default_rng([seed, 0])
        pyramid = NeuralPyramid.random_normal(k, channels, rng, texture_std)
        decoder = mlp_init(decoder_dims(channels), final_relu=True, seed=seed)
        offset = None
        if with_offset:
            offset = OffsetModule.init(
                k, offset_channels, seed + 1, rng, texture_std=texture_std
            )
        mat = cls(pyramid=pyramid, decoder=decoder, offset=offset)
        mat.round_to_float32()
        return mat

    @classmethod
    def init_for_training(
        cls,
        k: int,
        channels: int,
        offset_channels: int,
        seed: int,
        target_mean: Sequence[float],
        *,
        with_offset: bool = True,
    ) -> "MbtfMaterial":
        """
        Where a fit starts: `init`, except that the decoder outputs `target_mean` for
        every query and the offset network predicts a ray depth of 0 everywhere. Both
        last layers start with zero weights; the textures and hidden layers are random.

        A dataset of one constant color therefore starts at zero loss and zero gradient.
        """
        mat = cls.init(k, channels, offset_channels, seed, with_offset=with_offset)
        mat.decoder.set_constant_output(np.maximum(np.asarray(target_mean), 0.0))
        if mat.offset is not None:
            mat.offset.mlp.set_constant_output([0.0])
        mat.round_to_float32()
        return mat

    def copy(self) -> "MbtfMaterial":
        return MbtfMaterial(
            pyramid=self.pyramid.copy(),
            decoder=self.decoder.copy(),
            offset=self.offset.copy() if self.offset is not None else None,
            provenance=dataclasses.replace(self.provenance),
        )

    def with_textures(
        self, pyramid: NeuralPyramid, offset_texture: Optional[FeatureTexture]
    ) -> "MbtfMaterial":
        """
        A view with replaced textures that shares the MLPs with this material.
        """
        offset = None
        if self.offset is not None:
            assert offset_texture is not None
            offset = self.offset.with_texture(offset_texture)
        return MbtfMaterial(
            pyramid=pyramid,
            decoder=self.decoder,
            offset=offset,
            provenance=self.provenance,
        )

    def without_offset(self) -> "MbtfMaterial":
        return MbtfMaterial(
            pyramid=self.pyramid,
            decoder=self.decoder,
            offset=None,
            provenance=self.provenance,
        )

    def param_blocks(self) -> List[Tuple[str, FloatArray]]:
        """
        Every trainable array under a stable name. The arrays are the live parameters.
        """
        blocks: List[Tuple[str, FloatArray]] = []
        for s, level in enumerate(self.pyramid.levels):
            blocks.append((f"pyramid.{s}", level.data))
        blocks.extend(self.decoder.blocks("decoder"))
        if self.offset is not None:
            blocks.append(("offset.texture", self.offset.texture.data))
            blocks.extend(self.offset.mlp.blocks("offset.mlp"))
        return blocks

    def param_counts(self) -> Dict[str, int]:
        counts = {
            "decoder": self.decoder.param_count(),
            "offset": self.offset.mlp.param_count() if self.offset is not None else 0,
            "pyramid texels": self.pyramid.param_count(),
            "offset texels": (
                self.offset.texture.data.size if self.offset is not None else 0
            ),
        }
        return counts

    def round_to_float32(self) -> None:
        for _, a in self.param_blocks():
            a[...] = a.astype(np.float32)

    def is_finite(self) -> bool:
        return all(bool(np.all(np.isfinite(a))) for _, a in self.param_blocks())


@dataclass(frozen=True)
class Query:
    p: UV
    sigma: float
    wi: Direction
    wo: Direction


@dataclass
class QueryBatch:
    """
    N queries as parallel arrays: `uv` (N, 2), `sigma` (N,), `wi` and `wo` (N, 2) in
    projected-hemisphere form.
    """

    uv: FloatArray
    sigma: FloatArray
    wi: FloatArray
    wo: FloatArray

    def __len__(self) -> int:
        return self.uv.shape[0]

    @classmethod
    def from_queries(cls, queries: Sequence[Query]) -> "QueryBatch":
        return cls(
            uv=np.array([q.p for q in queries], dtype=np.float64).reshape(-1, 2),
            sigma=np.array([q.sigma for q in queries], dtype=np.float64),
            wi=np.array([(q.wi.x, q.wi.y) for q in queries]).reshape(-1, 2),
            wo=np.array([(q.wo.x, q.wo.y) for q in queries]).reshape(-1, 2),
        )

    @classmethod
    def empty(cls) -> "QueryBatch":
        return cls(np.zeros((0, 2)), np.zeros(0), np.zeros((0, 2)), np.zeros((0, 2)))

    def take(self, index: Any) -> "QueryBatch":
        return QueryBatch(
            uv=self.uv[index],
            sigma=self.sigma[index],
            wi=self.wi[index],
            wo=self.wo[index],
        )

    def validate(self) -> None:
        n = len(self)
        if (
            self.sigma.shape != (n,)
            or self.wi.shape != (n, 2)
            or self.wo.shape != (n, 2)
        ):
            raise ContractViolation(
                "query arrays disagree in length",
                uv=self.uv.shape,
                sigma=self.sigma.shape,
                wi=self.wi.shape,
                wo=self.wo.shape,
            )
        check_directions(self.wi, "wi")
        check_directions(self.wo, "wo")
        if not np.all(np.isfinite(self.uv)):
            raise ContractViolation("query position is not finite")
        if np.any(~(self.sigma > 0)) or not np.all(np.isfinite(self.sigma)):
            raise ContractViolation("kernel size must be positive and finite")


@dataclass
class EvalCache:
    batch: QueryBatch
    lookup_uv: FloatArray
    offset_cache: Optional[OffsetCache]
    decoder_cache: MlpCache


def forward_batch(
    mat: MbtfMaterial, batch: QueryBatch, *, baseline: bool = False
) -> Tuple[FloatArray, EvalCache]:
    batch.validate()
    offset_cache: Optional[OffsetCache] = None
    if mat.offset is not None and not baseline:
        lookup_uv, offset_cache = apply_offset_batch(mat.offset, batch.uv, batch.wo)
    else:
        lookup_uv = batch.uv

    features = trilinear_lookup_batch(mat.pyramid, lookup_uv, batch.sigma)
    x = np.concatenate([features, batch.wi, batch.wo], axis=1)
    rgb, decoder_cache = mlp_forward_batch(mat.decoder, x)
    return rgb, EvalCache(
        batch=batch,
        lookup_uv=lookup_uv,
        offset_cache=offset_cache,
        decoder_cache=decoder_cache,
    )


@dataclass
class MaterialGrads:
    pyramid: List[FloatArray]
    decoder: MlpGrads
    offset_texture: Optional[FloatArray]
    offset_mlp: Optional[MlpGrads]

    @classmethod
    def zeros_like(cls, mat: MbtfMaterial) -> "MaterialGrads":
        return cls(
            pyramid=[np.zeros_like(level.data) for level in mat.pyramid.levels],
            decoder=MlpGrads.zeros_like(mat.decoder),
            offset_texture=(
                np.zeros_like(mat.offset.texture.data)
                if mat.offset is not None
                else None
            ),
            offset_mlp=(
                MlpGrads.zeros_like(mat.offset.mlp) if mat.offset is not None else None
            ),
        )

    def blocks(self) -> List[Tuple[str, FloatArray]]:
        """
        Same names and order as `MbtfMaterial.param_blocks`.
        """
        blocks: List[Tuple[str, FloatArray]] = []
        for s, g in enumerate(self.pyramid):
            blocks.append((f"pyramid.{s}", g))
        blocks.extend(self.decoder.blocks("decoder"))
        if self.offset_texture is not None and self.offset_mlp is not None:
            blocks.append(("offset.texture", self.offset_texture))
            blocks.extend(self.offset_mlp.blocks("offset.mlp"))
        return blocks

    def add_(self, other: "MaterialGrads") -> None:
        for (_, a), (_, b) in zip(self.blocks(), other.blocks()):
            a += b


def backward_batch(
    mat: MbtfMaterial, cache: EvalCache, upstream: FloatArray, grads: MaterialGrads
) -> None:
    """
    Accumulates the gradient of `sum(upstream * rgb)` into `grads`. `mat` must be the
    material `cache` came from.
    """
    d_x = mlp_backward_batch(mat.decoder, cache.decoder_cache, upstream, grads.decoder)
    d_features = d_x[:, : mat.channels]
    coord = trilinear_backward_batch(
        mat.pyramid, cache.lookup_uv, cache.batch.sigma, d_features, grads.pyramid
    )
    if cache.offset_cache is not None:
        assert mat.offset is not None
        offset_backward_batch(
            mat.offset,
            cache.offset_cache,
            coord,
            grads.offset_texture,
            grads.offset_mlp,
        )


def evaluate_batch(
    mat: MbtfMaterial, batch: QueryBatch, *, baseline: bool = False
) -> FloatArray:
    """
    (N, 3) RGB reflectance for N queries. Each row is bit-identical to evaluating its
    query alone.
    """
    rgb, _ = forward_batch(mat, batch, baseline=baseline)
    return rgb


def evaluate(mat: MbtfMaterial, q: Query) -> FloatArray:
    return evaluate_batch(mat, QueryBatch.from_queries([q]))[0]


def evaluate_baseline(mat: MbtfMaterial, q: Query) -> FloatArray:
    return evaluate_batch(mat, QueryBatch.from_queries([q]), baseline=True)[0]


def sample_cosine(rng: np.random.Generator, n: int) -> Tuple[FloatArray, FloatArray]:
    """
    `n` cosine-weighted hemisphere directions as uniform points on the unit disk, with
    their densities `z / π` per steradian.
    """
    radius = np.sqrt(rng.uniform(0.0, 1.0, size=n))
    phi = rng.uniform(0.0, 2.0 * np.pi, size=n)
    d = np.stack([radius * np.cos(phi), radius * np.sin(phi)], axis=1)
    return d, direction_z(d) / np.pi


def cosine_pdf(wi: Direction) -> float:
    return wi.z / math.pi


def sample_outgoing(rng: np.random.Generator) -> Tuple[Direction, float]:
    d, pdf = sample_cosine(rng, 1)
    return Direction(float(d[0, 0]), float(d[0, 1])), float(pdf[0])


def _write_mlp(w: ByteWriter, m: Mlp, what: str) -> None:
    w.u32(len(m.layer_dims))
    for n in m.layer_dims:
        w.u32(n)
    for i, (weight, bias) in enumerate(zip(m.weights, m.biases)):
        w.f32_array(weight, f"{what}.w{i}")
        w.f32_array(bias, f"{what}.b{i}")


def _read_mlp(
    r: ByteReader, what: str, expected_dims: List[int], final_relu: bool
) -> Mlp:
    n = r.u32(f"{what} layer count")
    dims = [r.u32(f"{what} layer dims") for _ in range(n)]
    if dims != expected_dims:
        raise FormatError(
            "unexpected network architecture",
            path=r.path,
            network=what,
            expected=expected_dims,
            actual=dims,
        )

    weights: List[FloatArray] = []
    biases: List[FloatArray] = []
    for i, (a, b) in enumerate(zip(dims, dims[1:])):
        weights.append(r.f32_array(a * b, f"{what}.w{i}").reshape(a, b))
        biases.append(r.f32_array(b, f"{what}.b{i}"))
    return Mlp(dims, weights, biases, final_relu=final_relu)


def _read_texture(r: ByteReader, res: int, c: int, what: str) -> FeatureTexture:
    return FeatureTexture(r.f32_array(res * res * c, what).reshape(res, res, c))


def save_material(mat: MbtfMaterial, path: PathLike) -> None:
    """
    Writes a `.neumat` file. Parameters are stored as float32; the file is replaced
    atomically.
    """
    if not mat.is_finite():
        raise NonFiniteValueError("material has non-finite parameters")

    with atomic_write(path) as f:
        w = ByteWriter(f)
        w.raw(MAGIC)
        w.u32(FORMAT_VERSION)
        w.u32(mat.k)
        w.u32(mat.channels)
        w.u32(mat.offset_channels)
        w.u32(FLAG_HAS_OFFSET if mat.offset is not None else 0)
        w.u64(mat.provenance.iterations)
        w.raw(mat.provenance.dataset_sha256)

        _write_mlp(w, mat.decoder, "decoder")
        if mat.offset is not None:
            _write_mlp(w, mat.offset.mlp, "offset.mlp")
            w.f32_array(mat.offset.texture.data, "offset.texture")
        for s, level in enumerate(mat.pyramid.levels):
            w.f32_array(level.data, f"pyramid.{s}")

    LOG.debug("saved material to %s", path)


def load_material(path: PathLike) -> MbtfMaterial:
    """
    Reads a `.neumat` file written by `save_material`.

    Raises a `FormatError` subclass on bad magic, version mismatch, truncation or
    non-finite values; no partially loaded material is returned.
    """
    try:
        f = open(path, "rb")
    except OSError as e:
        raise InputError("could not open material", path=os.fspath(path)) from e

    with f:
        r = ByteReader(f, path)
        r.magic(MAGIC)
        r.version(FORMAT_VERSION)
        k = r.u32("k")
        c = r.u32("channels")
        c2 = r.u32("offset channels")
        flags = r.u32("flags")
        if k > 16 or c < 1 or (flags & ~FLAG_HAS_OFFSET) != 0:
            raise FormatError(
                "implausible material header", path=r.path, k=k, c=c, flags=flags
            )

        has_offset = bool(flags & FLAG_HAS_OFFSET)
        if has_offset and c2 < 1:
            raise FormatError("offset module without channels", path=r.path)

        iterations = r.u64("iterations")
        dataset_sha256 = r.read_exact(32, "dataset hash")

        decoder = _read_mlp(r, "decoder", decoder_dims(c), final_relu=True)
        offset = None
        if has_offset:
            dims = offset_mlp_dims(c2)
            offset_mlp = _read_mlp(r, "offset.mlp", dims, final_relu=False)
            offset_texture = _read_texture(r, 2**k, c2, "offset.texture")
            offset = OffsetModule(offset_texture, offset_mlp)

        levels = [_read_texture(r, 2**s, c, f"pyramid.{s}") for s in range(k + 1)]
        r.expect_eof()

    return MbtfMaterial(
        pyramid=NeuralPyramid(levels),
        decoder=decoder,
        offset=offset,
        provenance=Provenance(iterations=iterations, dataset_sha256=dataset_sha256),
    )
