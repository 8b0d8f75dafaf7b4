"""
End-to-end fitting of a material to a query dataset.

Every step samples a batch with replacement and evaluates the material through blurred
views of its textures. The mean squared error is backpropagated into every parameter
before one Adam update. The blur shrinks with a half-life until it drops below a tenth
of a texel.
"""

from concurrent.futures import Executor, ThreadPoolExecutor, as_completed

import numpy as np

from ..binfile import ByteReader, ByteWriter, atomic_write
from ..datagen import QueryDataset, records_to_queries
from ..material import (
    DEFAULT_CHANNELS,
    MaterialGrads,
    MbtfMaterial,
    QueryBatch,
    backward_batch,
    evaluate_batch,
    forward_batch,
    load_material,
    save_material,
)
from ..prelude import *
from ..pyramid import NeuralPyramid
from ..texture import FeatureTexture, blur_array, blur_backward, kernel_support

BLUR_CUTOFF = 0.1
RELATIVE_ERROR_FLOOR = 1e-3

OPT_MAGIC = b"NOPT"
OPT_VERSION = 1


@dataclass
class TrainConfig:
    batch_size: int = 2**14
    iterations: int = 30000
    learning_rate: float = 1e-3
    blur_sigma_init: float = 8.0
    blur_half_life: float = 3333.0
    seed: int = 0
    baseline_only: bool = False
    channels: int = DEFAULT_CHANNELS
    offset_channels: int = DEFAULT_CHANNELS
    checkpoint_every: int = 0
    log_every: int = 100
    threads: int = 1
    deterministic: bool = False

    def validate(self) -> None:
        positive = {
            "batch_size": self.batch_size,
            "channels": self.channels,
            "offset_channels": self.offset_channels,
            "blur_half_life": self.blur_half_life,
            "threads": self.threads,
            "log_every": self.log_every,
        }
        for name, value in positive.items():
            if not value > 0:
                raise ConfigError("must be positive", key=name, value=value)

        non_negative = {
            "iterations": self.iterations,
            "learning_rate": self.learning_rate,
            "blur_sigma_init": self.blur_sigma_init,
            "checkpoint_every": self.checkpoint_every,
            "seed": self.seed,
        }
        for name, value in non_negative.items():
            if not value >= 0:
                raise ConfigError("must not be negative", key=name, value=value)


def loss(pred: Sequence[float], target: Sequence[float]) -> float:
    """
    Mean over the RGB channels of the squared difference.
    """
    d = np.asarray(pred, dtype=np.float64) - np.asarray(target, dtype=np.float64)
    return float(np.mean(d * d))


def batch_loss(pred: FloatArray, target: FloatArray) -> float:
    d = pred - target
    return float(np.mean(d * d))


def blur_sigma(
    t: float, sigma_init: float = 8.0, half_life: float = 3333.0
) -> float:
    """
    `sigma_init · 2^(-t / half_life)` texels, or 0 once that falls below 0.1.
    """
    if t < 0:
        raise ContractViolation("iteration must not be negative", t=t)
    sigma = sigma_init * 2.0 ** (-t / half_life)
    return sigma if sigma >= BLUR_CUTOFF else 0.0


class Adam:
    """
    Adam with bias correction, one moment pair per named parameter block.
    """

    lr: float
    beta1: float
    beta2: float
    epsilon: float
    m: Dict[str, FloatArray]
    v: Dict[str, FloatArray]
    t: int

    def __init__(
        self,
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        epsilon: float = 1e-8,
    ) -> None:
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.m = {}
        self.v = {}
        self.t = 0

    def step(
        self,
        params: List[Tuple[str, FloatArray]],
        grads: List[Tuple[str, FloatArray]],
    ) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        step_size = self.lr / bc1

        for (name, p), (grad_name, g) in zip(params, grads):
            assert name == grad_name, (name, grad_name)
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)

            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)

            p -= step_size * m / (np.sqrt(v * (1.0 / bc2)) + self.epsilon)


def save_optimizer(opt: Adam, path: PathLike) -> None:
    with atomic_write(path) as f:
        w = ByteWriter(f)
        w.raw(OPT_MAGIC)
        w.u32(OPT_VERSION)
        w.u64(opt.t)
        w.u32(len(opt.m))
        for name in opt.m:
            w.string(name)
            w.u64(opt.m[name].size)
            w.f64_array(opt.m[name], f"{name}.m")
            w.f64_array(opt.v[name], f"{name}.v")


def load_optimizer(
    opt: Adam, path: PathLike, params: List[Tuple[str, FloatArray]]
) -> None:
    """
    Restores step count and moments into `opt`. Every block must match a parameter of
    the same name and size.
    """
    shapes = {name: p.shape for name, p in params}
    try:
        f = open(path, "rb")
    except OSError as e:
        raise InputError("could not open optimizer state", path=os.fspath(path)) from e

    with f:
        r = ByteReader(f, path)
        r.magic(OPT_MAGIC)
        r.version(OPT_VERSION)
        t = r.u64("step")
        n_blocks = r.u32("block count")
        m: Dict[str, FloatArray] = {}
        v: Dict[str, FloatArray] = {}
        for _ in range(n_blocks):
            name = r.string("block name")
            count = r.u64("element count")
            if name not in shapes or math.prod(shapes[name]) != count:
                raise FormatError(
                    "optimizer block does not match the material",
                    path=r.path,
                    block=name,
                    count=count,
                )
            m[name] = r.f64_array(count, f"{name}.m").reshape(shapes[name])
            v[name] = r.f64_array(count, f"{name}.v").reshape(shapes[name])
        r.expect_eof()

    opt.t = t
    opt.m = m
    opt.v = v


def blurred_view(
    mat: MbtfMaterial, sigma_blur: float
) -> Tuple[MbtfMaterial, List[bool], bool]:
    """
    The material seen through blurred textures. Levels smaller than the kernel support
    stay raw. Returns the view and which textures were blurred (pyramid levels, offset).
    """
    if sigma_blur <= 0:
        return mat, [False] * (mat.k + 1), False

    support = kernel_support(sigma_blur)
    levels: List[FeatureTexture] = []
    blurred: List[bool] = []
    for level in mat.pyramid.levels:
        if level.resolution >= support:
            levels.append(FeatureTexture(blur_array(level.data, sigma_blur)))
            blurred.append(True)
        else:
            levels.append(level)
            blurred.append(False)

    offset_texture = None
    offset_blurred = False
    if mat.offset is not None:
        offset_texture = mat.offset.texture
        if offset_texture.resolution >= support:
            offset_texture = FeatureTexture(blur_array(offset_texture.data, sigma_blur))
            offset_blurred = True

    view = mat.with_textures(NeuralPyramid(levels), offset_texture)
    return view, blurred, offset_blurred


@dataclass
class _Shard:
    sq_error: float
    grads: MaterialGrads


def _shard_gradients(
    view: MbtfMaterial, batch: QueryBatch, targets: FloatArray, scale: float
) -> _Shard:
    pred, cache = forward_batch(view, batch)
    diff = pred - targets
    grads = MaterialGrads.zeros_like(view)
    backward_batch(view, cache, 2.0 * scale * diff, grads)
    return _Shard(sq_error=float(np.sum(diff * diff)), grads=grads)


def compute_gradients(
    mat: MbtfMaterial,
    batch: QueryBatch,
    targets: FloatArray,
    sigma_blur: float = 0.0,
    *,
    pool: Optional[Executor] = None,
    shards: int = 1,
    deterministic: bool = True,
) -> Tuple[float, MaterialGrads]:
    """
    Batch loss and its gradient with respect to every parameter of `mat`.

    With a pool, the batch is split into `shards` contiguous pieces evaluated
    concurrently. Deterministic mode sums the shard gradients in shard order; otherwise
    they are summed as they finish.
    """
    n = len(batch)
    if n == 0:
        raise ContractViolation("batch must not be empty")

    view, blurred, offset_blurred = blurred_view(mat, sigma_blur)
    scale = 1.0 / (3 * n)

    bounds = np.linspace(0, n, max(1, min(shards, n)) + 1).astype(np.int64)
    pieces = [slice(int(a), int(b)) for a, b in zip(bounds, bounds[1:])]

    if pool is None or len(pieces) == 1:
        results = [
            _shard_gradients(view, batch.take(s), targets[s], scale) for s in pieces
        ]
    else:
        futures = [
            pool.submit(_shard_gradients, view, batch.take(s), targets[s], scale)
            for s in pieces
        ]
        if deterministic:
            results = [f.result() for f in futures]
        else:
            results = [f.result() for f in as_completed(futures)]

    total = results[0]
    for other in results[1:]:
        total.grads.add_(other.grads)
        total.sq_error += other.sq_error

    grads = total.grads
    for s, was_blurred in enumerate(blurred):
        if was_blurred:
            grads.pyramid[s] = blur_backward(grads.pyramid[s], sigma_blur)
    if offset_blurred and grads.offset_texture is not None:
        grads.offset_texture = blur_backward(grads.offset_texture, sigma_blur)

    return total.sq_error * scale, grads


def train_step(
    mat: MbtfMaterial,
    batch: QueryBatch,
    targets: FloatArray,
    opt: Adam,
    t: int,
    config: TrainConfig,
    *,
    pool: Optional[Executor] = None,
) -> float:
    """
    One Adam update of every parameter of `mat`, in place. Returns the batch loss.
    """
    sigma = blur_sigma(t, config.blur_sigma_init, config.blur_half_life)
    batch_loss_value, grads = compute_gradients(
        mat,
        batch,
        targets,
        sigma,
        pool=pool,
        shards=config.threads,
        deterministic=config.deterministic,
    )
    if not math.isfinite(batch_loss_value):
        raise TrainingDivergedError(
            "training loss is not finite",
            iteration=t,
            batch_size=len(batch),
            target_mean=float(np.mean(targets)),
            target_max=float(np.max(targets)),
            blur_sigma=sigma,
        )

    opt.step(mat.param_blocks(), grads.blocks())
    # parameters live in float32, so a checkpoint holds them exactly
    mat.round_to_float32()
    if not mat.is_finite():
        raise TrainingDivergedError(
            "parameters are not finite after the update", iteration=t
        )
    return batch_loss_value


def _record_chunks(
    records: Union[QueryDataset, Iterable[FloatArray]], chunk_records: int
) -> Iterable[FloatArray]:
    if not isinstance(records, QueryDataset):
        return records
    all_records = records.records
    return (
        all_records[i : i + chunk_records]
        for i in range(0, len(records), chunk_records)
    )


def dataset_mse(
    mat: MbtfMaterial,
    records: Union[QueryDataset, Iterable[FloatArray]],
    *,
    chunk_records: int = 65536,
) -> float:
    """
    Mean squared error of the material over every record, on raw (unblurred) textures.
    """
    total = 0.0
    count = 0
    for chunk in _record_chunks(records, chunk_records):
        pred = evaluate_batch(mat, records_to_queries(chunk))
        d = pred - chunk[:, 7:10]
        total += float(np.sum(d * d))
        count += chunk.shape[0]

    if count == 0:
        raise InputError("dataset has no records")
    return total / (3 * count)


def dataset_max_relative_error(
    mat: MbtfMaterial,
    records: Union[QueryDataset, Iterable[FloatArray]],
    *,
    chunk_records: int = 65536,
) -> float:
    """
    Largest per-channel `|prediction - target| / target` over every record. Targets
    below `RELATIVE_ERROR_FLOOR` are compared against the floor instead.
    """
    worst = 0.0
    count = 0
    for chunk in _record_chunks(records, chunk_records):
        pred = evaluate_batch(mat, records_to_queries(chunk))
        target = chunk[:, 7:10]
        scale = np.maximum(np.abs(target), RELATIVE_ERROR_FLOOR)
        worst = max(worst, float(np.max(np.abs(pred - target) / scale)))
        count += chunk.shape[0]

    if count == 0:
        raise InputError("dataset has no records")
    return worst


@dataclass
class LevelError:
    level: int
    sigma: float
    mse: float
    count: int


def dataset_mse_by_level(
    mat: MbtfMaterial, dataset: QueryDataset, levels: Optional[Sequence[int]] = None
) -> List[LevelError]:
    """
    Dataset MSE with records binned by the pyramid level nearest to their kernel size.
    Levels without records report NaN.
    """
    wanted = list(range(mat.k + 1)) if levels is None else list(levels)
    for level in wanted:
        if not 0 <= level <= mat.k:
            raise ConfigError("level is outside the pyramid", level=level, k=mat.k)

    records = dataset.records
    nearest = np.clip(np.rint(-np.log2(records[:, 2])), 0, mat.k).astype(np.int64)
    out: List[LevelError] = []
    for level in wanted:
        selected = records[nearest == level]
        mse = dataset_mse(mat, [selected]) if len(selected) > 0 else math.nan
        out.append(
            LevelError(level=level, sigma=2.0**-level, mse=mse, count=len(selected))
        )
    return out


@dataclass
class TrainResult:
    material: MbtfMaterial
    losses: List[float]
    final_mse: float


def _batch_indices(seed: int, t: int, n: int, batch_size: int) -> IntArray:
    # one generator per iteration, so a resumed run draws the same batches
    return np.random.default_rng([seed, 1, t]).integers(0, n, size=batch_size)


def checkpoint_paths(path: PathLike) -> Tuple[str, str]:
    p = os.fspath(path)
    return p, p + ".nopt"


def train(
    dataset: QueryDataset,
    config: TrainConfig,
    *,
    log_path: Optional[PathLike] = None,
    checkpoint_path: Optional[PathLike] = None,
    resume: Optional[PathLike] = None,
    dataset_sha256: bytes = bytes(32),
) -> TrainResult:
    """
    Fits a new material (or continues the checkpoint at `resume`) to `dataset`.

    Writes one `iteration<TAB>loss<TAB>blur_sigma` line per iteration to `log_path`,
    and a checkpoint plus optimizer sidecar every `checkpoint_every` iterations.
    Results are deterministic for a given seed when `threads` is 1 or `deterministic`
    is set.
    """
    config.validate()
    n = len(dataset)
    if n == 0:
        raise InputError("dataset has no records")

    queries = dataset.queries
    queries.validate()
    targets = dataset.targets

    opt = Adam(lr=config.learning_rate)
    if resume is not None:
        mat_path, opt_path = checkpoint_paths(resume)
        mat = load_material(mat_path)
        if mat.k != dataset.k:
            raise ShapeMismatchError(
                "checkpoint does not match the dataset",
                material_k=mat.k,
                dataset_k=dataset.k,
            )
        load_optimizer(opt, opt_path, mat.param_blocks())
        LOG.info("resuming from %s at iteration %d", mat_path, opt.t)
    else:
        mat = MbtfMaterial.init_for_training(
            dataset.k,
            config.channels,
            config.offset_channels,
            config.seed,
            np.mean(targets, axis=0),
            with_offset=not config.baseline_only,
        )

    start = opt.t
    losses: List[float] = []
    log_file = None
    if log_path is not None:
        log_file = open(log_path, "a" if resume is not None else "w", encoding="utf-8")

    pool = None
    if config.threads > 1:
        pool = ThreadPoolExecutor(max_workers=config.threads)
    try:
        for t in range(start, config.iterations):
            idx = _batch_indices(config.seed, t, n, config.batch_size)
            value = train_step(
                mat, queries.take(idx), targets[idx], opt, t, config, pool=pool
            )
            losses.append(value)
            sigma = blur_sigma(t, config.blur_sigma_init, config.blur_half_life)

            if log_file is not None:
                log_file.write(f"{t}\t{value:.9g}\t{sigma:.6g}\n")
            if (t + 1) % config.log_every == 0:
                LOG.info("iteration %d: loss %.6g, blur %.3g", t + 1, value, sigma)

            if (
                checkpoint_path is not None
                and config.checkpoint_every > 0
                and (t + 1) % config.checkpoint_every == 0
            ):
                if log_file is not None:
                    log_file.flush()
                write_checkpoint(mat, opt, checkpoint_path, t + 1, dataset_sha256)
    finally:
        if pool is not None:
            pool.shutdown()
        if log_file is not None:
            log_file.close()

    mat.provenance.iterations = max(config.iterations, start)
    mat.provenance.dataset_sha256 = dataset_sha256
    final = dataset_mse(mat, dataset)
    LOG.info("final dataset MSE: %.6g", final)
    return TrainResult(material=mat, losses=losses, final_mse=final)


def write_checkpoint(
    mat: MbtfMaterial,
    opt: Adam,
    path: PathLike,
    iterations: int,
    dataset_sha256: bytes,
) -> None:
    mat_path, opt_path = checkpoint_paths(path)
    snapshot = mat.copy()
    snapshot.provenance.iterations = iterations
    snapshot.provenance.dataset_sha256 = dataset_sha256
    save_material(snapshot, mat_path)
    save_optimizer(opt, opt_path)
    LOG.info("checkpoint at iteration %d written to %s", iterations, mat_path)
