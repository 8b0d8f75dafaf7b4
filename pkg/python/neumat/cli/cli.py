"""
The `neumat` executable: dataset generation, training, rendering, evaluation and
inspection of neural materials.
"""

import logging

import numpy as np

from .. import command, tabular
from ..command import CmdError, Extra
from ..datagen import (
    DEFAULT_ORACLE_SAMPLES,
    DEFAULT_PER_TEXEL,
    PRESETS,
    DatasetWriter,
    Heightfield,
    OracleOptions,
    dataset_flags,
    dataset_read,
    iter_query_chunks,
    load_heightfield_png,
    mbtf_oracle_batch,
    per_texel_in_range,
    per_texel_warning,
    preset_heightfield,
    read_dataset_header,
    record_count,
)
from ..material import (
    DEFAULT_CHANNELS,
    DEFAULT_K,
    MbtfMaterial,
    evaluate_batch,
    load_material,
    save_material,
)
from ..offset import Direction, write_offset_visualization
from ..prelude import *
from ..renderer import (
    RenderOptions,
    Scene,
    image_export,
    image_mse,
    load_scene,
    lod_sweep_scenes,
    render,
    render_reference,
    swatch_image,
    swatch_queries,
)
from ..trainer import (
    TrainConfig,
    dataset_max_relative_error,
    dataset_mse,
    dataset_mse_by_level,
    train,
)

PROGRAM = "neumat"


@dataclass
class GenerateOptions:
    k: int = DEFAULT_K
    per_texel: int = DEFAULT_PER_TEXEL
    seed: int = 0
    oracle: OracleOptions = dataclasses.field(default_factory=OracleOptions)
    threads: int = 1

    def validate(self) -> None:
        if self.k < 0:
            raise ConfigError("k must be non-negative", k=self.k)
        if self.per_texel < 1:
            raise ConfigError("per_texel must be positive", per_texel=self.per_texel)
        if self.oracle.n_samples < 1:
            raise ConfigError("samples must be positive", samples=self.oracle.n_samples)
        if self.threads < 1:
            raise ConfigError("threads must be positive", threads=self.threads)


def generate_dataset(hf: Heightfield, path: PathLike, options: GenerateOptions) -> int:
    """
    Streams `4^k · per_texel` oracle queries into a `.mbtfq` file. Returns the number
    of records written.
    """
    options.validate()
    flags = dataset_flags(options.oracle)
    with DatasetWriter(path, options.k, flags) as writer:
        for records in iter_query_chunks(
            hf,
            options.k,
            options.per_texel,
            options.seed,
            options.oracle,
            threads=options.threads,
        ):
            writer.write(records)
        return writer.count


def _heightfield_source(
    preset: Optional[str],
    heightfield: Optional[pathlib.Path],
    albedo: Optional[pathlib.Path],
    height_scale: float,
    roughness: Optional[float],
    resolution: int,
    *,
    required: bool,
) -> Optional[Heightfield]:
    if preset is not None and heightfield is not None:
        raise CmdError("--preset and --heightfield are mutually exclusive")

    if preset is not None:
        if preset not in PRESETS:
            raise CmdError(f"unknown preset: {preset} (choices: {', '.join(PRESETS)})")
        hf = preset_heightfield(preset, resolution)
        if roughness is not None:
            hf.roughness = np.full(hf.heights.shape, roughness)
        return hf

    if heightfield is not None:
        _require_file(heightfield, "heightfield")
        if albedo is not None:
            _require_file(albedo, "albedo")
        return load_heightfield_png(
            heightfield, albedo, height_scale=height_scale, roughness=roughness
        )

    if albedo is not None:
        raise CmdError("--albedo requires --heightfield")
    if required:
        raise CmdError("one of --preset or --heightfield is required")
    return None


def _require_file(path: PathLike, what: str) -> None:
    if not os.path.isfile(path):
        raise InputError(f"{what} not found", path=os.fspath(path))


def _require_output_dir(path: PathLike) -> None:
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise InputError("output directory does not exist", path=os.fspath(path))


def _parse_direction(s: str, what: str) -> Tuple[float, float]:
    parts = s.replace(",", " ").split()
    try:
        x, y = (float(p) for p in parts)
    except ValueError:
        raise CmdError(f"{what} must be two numbers like 0.5,0: {s!r}")

    if not (math.isfinite(x) and math.isfinite(y)) or x * x + y * y > 1.0:
        raise CmdError(f"{what} must lie in the unit disk: {s!r}")
    return x, y


def _suffixed(path: pathlib.Path, suffix: str) -> pathlib.Path:
    return path.with_name(path.stem + suffix + path.suffix)


def _oracle_options(samples: int, jitter_deg: float, indirect: bool) -> OracleOptions:
    return OracleOptions(jitter_deg=jitter_deg, indirect=indirect, n_samples=samples)


def cmd_generate(
    *,
    out: Annotated[pathlib.Path, Extra(short="-o", help="output .mbtfq file")],
    preset: Annotated[
        Optional[str], Extra(help=f"built-in surface: {', '.join(PRESETS)}")
    ] = None,
    heightfield: Annotated[
        Optional[pathlib.Path], Extra(help="grayscale PNG of heights")
    ] = None,
    albedo: Annotated[Optional[pathlib.Path], Extra(help="sRGB PNG of albedo")] = None,
    height_scale: Annotated[
        float, Extra(help="height of a full-white texel, in tile units")
    ] = 0.05,
    roughness: Annotated[
        Optional[float], Extra(help="adds a specular lobe of this roughness")
    ] = None,
    resolution: Annotated[int, Extra(help="preset heightfield resolution")] = 256,
    k: Annotated[int, Extra(help="finest pyramid level, 2^k texels per side")] = (
        DEFAULT_K
    ),
    per_texel: Annotated[int, Extra(help="queries per finest-level texel")] = (
        DEFAULT_PER_TEXEL
    ),
    samples: Annotated[int, Extra(help="oracle samples per query")] = (
        DEFAULT_ORACLE_SAMPLES
    ),
    jitter_deg: Annotated[float, Extra(help="light cone half-angle")] = 5.0,
    indirect: Annotated[bool, Extra(help="add one bounce of indirect light")],
    force: Annotated[bool, Extra(help="skip the per-texel range warning")],
    seed: int = 0,
    threads: Annotated[int, Extra(help="worker threads")] = 1,
) -> None:
    """
    Generate a training dataset from a heightfield.
    """
    options = GenerateOptions(
        k=k,
        per_texel=per_texel,
        seed=seed,
        oracle=_oracle_options(samples, jitter_deg, indirect),
        threads=threads,
    )
    options.validate()
    _require_output_dir(out)
    hf = _heightfield_source(
        preset, heightfield, albedo, height_scale, roughness, resolution, required=True
    )
    assert hf is not None

    if not force and not per_texel_in_range(per_texel):
        LOG.warning(per_texel_warning(per_texel))

    LOG.info(
        "generating %s at k=%d", pluralize(record_count(k, per_texel), "record"), k
    )
    with timed("generate") as watch:
        count = generate_dataset(hf, out, options)

    print(f"wrote {pluralize(count, 'record')} to {out} in {watch.elapsed_secs:.2f}s")


def cmd_train(
    dataset: pathlib.Path,
    *,
    out: Annotated[pathlib.Path, Extra(short="-o", help="output .neumat file")],
    iterations: Annotated[int, Extra(name="--iters", help="training iterations")] = (
        TrainConfig.iterations
    ),
    batch_size: int = TrainConfig.batch_size,
    learning_rate: float = TrainConfig.learning_rate,
    channels: Annotated[int, Extra(help="pyramid feature channels")] = (
        DEFAULT_CHANNELS
    ),
    offset_channels: Annotated[int, Extra(help="offset texture channels")] = (
        DEFAULT_CHANNELS
    ),
    blur_sigma: Annotated[float, Extra(help="initial blur, in texels")] = (
        TrainConfig.blur_sigma_init
    ),
    blur_half_life: Annotated[float, Extra(help="iterations per halving")] = (
        TrainConfig.blur_half_life
    ),
    baseline: Annotated[bool, Extra(help="train without the neural offset")],
    log: Annotated[
        Optional[pathlib.Path], Extra(help="per-iteration loss log (TSV)")
    ] = None,
    checkpoint_every: Annotated[
        int, Extra(help="write `out` and its optimizer state this often")
    ] = 0,
    resume: Annotated[
        Optional[pathlib.Path], Extra(help="checkpoint to continue from")
    ] = None,
    seed: int = 0,
    threads: Annotated[int, Extra(help="worker threads")] = 1,
    deterministic: Annotated[bool, Extra(help="ordered gradient reduction")],
) -> None:
    """
    Train a neural material on a dataset.
    """
    config = TrainConfig(
        batch_size=batch_size,
        iterations=iterations,
        learning_rate=learning_rate,
        blur_sigma_init=blur_sigma,
        blur_half_life=blur_half_life,
        seed=seed,
        baseline_only=baseline,
        channels=channels,
        offset_channels=offset_channels,
        checkpoint_every=checkpoint_every,
        threads=threads,
        deterministic=deterministic,
    )
    config.validate()
    _require_file(dataset, "dataset")
    if resume is not None:
        _require_file(resume, "checkpoint")
    _require_output_dir(out)
    if log is not None:
        _require_output_dir(log)

    ds = dataset_read(dataset)
    LOG.info("training on %s (k=%d)", pluralize(len(ds), "record"), ds.k)
    with timed("train") as watch:
        result = train(
            ds,
            config,
            log_path=log,
            checkpoint_path=out if checkpoint_every > 0 else None,
            resume=resume,
            dataset_sha256=sha256_file(dataset),
        )
    save_material(result.material, out)

    print(f"final dataset MSE: {result.final_mse:.9g}")
    print(f"wrote {out} in {watch.elapsed_secs:.2f}s")


def cmd_render(
    scene: pathlib.Path,
    *,
    out: Annotated[
        pathlib.Path, Extra(short="-o", help="output image, .pfm or .png")
    ] = pathlib.Path("render.pfm"),
    reference: Annotated[bool, Extra(help="also render the heightfield oracle")],
    preset: Annotated[Optional[str], Extra(help="reference surface preset")] = None,
    heightfield: Annotated[
        Optional[pathlib.Path], Extra(help="reference heightfield PNG")
    ] = None,
    albedo: Optional[pathlib.Path] = None,
    height_scale: float = 0.05,
    roughness: Optional[float] = None,
    resolution: int = 256,
    k: Annotated[
        Optional[int], Extra(help="pyramid depth when the scene has no material")
    ] = None,
    samples: Annotated[int, Extra(help="oracle samples per query")] = 16,
    lod_sweep: Annotated[
        int, Extra(help="render this many images at doubling distances")
    ] = 0,
    baseline: Annotated[bool, Extra(help="shade without the neural offset")],
    batch_capacity: int = 4096,
    spp: Annotated[Optional[int], Extra(help="overrides the scene's spp")] = None,
    seed: Annotated[Optional[int], Extra(help="overrides the scene's seed")] = None,
    threads: Annotated[int, Extra(help="worker threads")] = 1,
) -> None:
    """
    Render a scene file to PFM or PNG.
    """
    _require_file(scene, "scene")
    _require_output_dir(out)
    if lod_sweep < 0:
        raise ConfigError("lod_sweep must be non-negative", lod_sweep=lod_sweep)

    base = load_scene(scene)
    if spp is not None:
        base = dataclasses.replace(base, spp=spp)
    if seed is not None:
        base = dataclasses.replace(base, seed=seed)
    base.validate()

    mat: Optional[MbtfMaterial] = None
    if base.material:
        _require_file(base.material, "material")
        mat = load_material(base.material)
    elif not reference:
        raise InputError("scene names no material", path=os.fspath(scene))

    hf = None
    if reference:
        hf = _heightfield_source(
            preset,
            heightfield,
            albedo,
            height_scale,
            roughness,
            resolution,
            required=True,
        )

    ref_k = mat.k if mat is not None else opt_or(k, DEFAULT_K)
    options = RenderOptions(
        batch_capacity=batch_capacity, threads=threads, baseline=baseline
    )
    oracle = OracleOptions(n_samples=samples, indirect=base.indirect)

    if lod_sweep > 0:
        jobs = [
            (s, _suffixed(out, f"_lod{i}"))
            for i, s in enumerate(lod_sweep_scenes(base, lod_sweep))
        ]
    else:
        jobs = [(base, out)]

    for s, path in jobs:
        _render_one(s, path, mat, hf, ref_k, options, oracle)


def _render_one(
    scene: Scene,
    path: pathlib.Path,
    mat: Optional[MbtfMaterial],
    hf: Optional[Heightfield],
    k: int,
    options: RenderOptions,
    oracle: OracleOptions,
) -> None:
    neural = None
    if mat is not None:
        neural = render(scene, mat, options)
        image_export(neural, path)
        print(f"wrote {path}")

    if hf is not None:
        ref = render_reference(scene, hf, k, options, oracle)
        ref_path = _suffixed(path, "_ref") if neural is not None else path
        image_export(ref, ref_path)
        print(f"wrote {ref_path}")
        if neural is not None:
            print(f"image MSE: {image_mse(neural, ref):.9g}")


@dataclass
class EvalRow:
    level: int
    sigma: float
    mse: float


def swatch_mse_by_level(
    mat: MbtfMaterial,
    hf: Heightfield,
    levels: Sequence[int],
    *,
    resolution: int,
    wi: Tuple[float, float],
    wo: Tuple[float, float],
    seed: int,
    oracle: OracleOptions,
) -> List[EvalRow]:
    """
    Image MSE between neural and oracle swatches of one tile, one swatch per level.
    """
    rows: List[EvalRow] = []
    for level in levels:
        q = swatch_queries(level, resolution, wi, wo)
        neural = swatch_image(evaluate_batch(mat, q), resolution)
        rng = np.random.default_rng([seed, level])
        ref_rgb = mbtf_oracle_batch(hf, q.uv, q.sigma, q.wi, q.wo, rng, oracle)
        ref = swatch_image(ref_rgb, resolution)
        rows.append(
            EvalRow(level=level, sigma=2.0**-level, mse=image_mse(neural, ref))
        )
    return rows


def cmd_eval(
    material: pathlib.Path,
    dataset: pathlib.Path,
    *,
    levels: Annotated[
        Optional[List[int]], Extra(help="levels for the table (default: all)")
    ] = None,
    csv: Annotated[Optional[pathlib.Path], Extra(help="write level,sigma,mse")] = None,
    preset: Annotated[Optional[str], Extra(help="reference for image swatches")] = (
        None
    ),
    heightfield: Optional[pathlib.Path] = None,
    albedo: Optional[pathlib.Path] = None,
    height_scale: float = 0.05,
    roughness: Optional[float] = None,
    resolution: int = 256,
    swatch_resolution: int = 64,
    wi: Annotated[str, Extra(help="incoming direction x,y for swatches")] = "0,0",
    wo: Annotated[str, Extra(help="outgoing direction x,y for swatches")] = "0.5,0",
    samples: int = DEFAULT_ORACLE_SAMPLES,
    baseline: Annotated[bool, Extra(help="evaluate without the neural offset")],
    seed: int = 0,
) -> None:
    """
    Report dataset MSE and a per-level error table.
    """
    _require_file(material, "material")
    _require_file(dataset, "dataset")
    if csv is not None:
        _require_output_dir(csv)
    if swatch_resolution < 1:
        raise ConfigError("swatch resolution must be positive")
    wi_xy = _parse_direction(wi, "--wi")
    wo_xy = _parse_direction(wo, "--wo")
    hf = _heightfield_source(
        preset, heightfield, albedo, height_scale, roughness, resolution, required=False
    )

    mat = load_material(material)
    header = read_dataset_header(dataset)
    if header.k != mat.k:
        raise InputError(
            "material and dataset were made for different pyramid depths",
            material_k=mat.k,
            dataset_k=header.k,
        )
    if baseline:
        mat = mat.without_offset()

    wanted = list(levels) if levels else list(range(mat.k + 1))
    for level in wanted:
        if not 0 <= level <= mat.k:
            raise ConfigError("level out of range", level=level, k=mat.k)

    ds = dataset_read(dataset)
    print(f"dataset MSE: {dataset_mse(mat, ds):.9g}")
    print(f"max relative error: {dataset_max_relative_error(mat, ds):.6g}")

    if hf is not None:
        rows = swatch_mse_by_level(
            mat,
            hf,
            wanted,
            resolution=swatch_resolution,
            wi=wi_xy,
            wo=wo_xy,
            seed=seed,
            oracle=OracleOptions(n_samples=samples),
        )
        print("per-level swatch image MSE:")
    else:
        rows = [
            EvalRow(level=e.level, sigma=e.sigma, mse=e.mse)
            for e in dataset_mse_by_level(mat, ds, wanted)
        ]
        print("per-level dataset MSE:")

    table = tabular.Table(numformat="{:.6g}")
    table.header(["level", "sigma", "mse"])
    for row in rows:
        table.row([row.level, row.sigma, row.mse])
    table.flush()

    if csv is not None:
        table.write_csv(csv)


def inspect_report(mat: MbtfMaterial) -> str:
    lines = [
        f"k: {mat.k}",
        f"channels: {mat.channels}",
        f"offset channels: {mat.offset_channels if mat.has_offset else 'none'}",
        f"iterations: {mat.provenance.iterations}",
    ]
    sha = mat.provenance.dataset_sha256
    lines.append(f"dataset sha256: {sha.hex() if any(sha) else 'unknown'}")
    counts = ", ".join(f"{name}={n}" for name, n in mat.param_counts().items())
    lines.append(f"parameters: {counts}")
    lines.append("")

    table = tabular.Table(numformat="{:.4g}")
    table.header(["level", "resolution", "mean", "std", "min", "max"])
    textures = [(str(s), level.data) for s, level in enumerate(mat.pyramid.levels)]
    if mat.offset is not None:
        textures.append(("offset", mat.offset.texture.data))
    for name, data in textures:
        table.row(
            [
                name,
                data.shape[0],
                float(np.mean(data)),
                float(np.std(data)),
                float(np.min(data)),
                float(np.max(data)),
            ]
        )
    lines.extend(table.to_list())
    return "\n".join(lines) + "\n"


def cmd_inspect(
    material: pathlib.Path,
    *,
    offset_vis: Annotated[
        Optional[List[str]], Extra(help="outgoing directions x,y to visualize")
    ] = None,
    offset_scale: Annotated[float, Extra(help="offset to color scale")] = 1.0,
    out_dir: Annotated[pathlib.Path, Extra(help="where offset images go")] = (
        pathlib.Path(".")
    ),
) -> None:
    """
    Print a material's header, parameter counts and texture statistics.
    """
    _require_file(material, "material")
    directions = [_parse_direction(s, "--offset-vis") for s in offset_vis or []]
    if directions and not out_dir.is_dir():
        raise InputError("output directory does not exist", path=os.fspath(out_dir))

    mat = load_material(material)
    print(inspect_report(mat), end="")

    if not directions:
        return
    if mat.offset is None:
        raise InputError("material has no offset module", path=os.fspath(material))

    for x, y in directions:
        path = out_dir / f"offset_{x:g}_{y:g}.png"
        write_offset_visualization(path, mat.offset, Direction(x, y), offset_scale)
        print(f"wrote {path}")


def build_group() -> command.Group:
    group = command.Group(
        help="Neural multi-resolution materials with learned offsets.", program=PROGRAM
    )
    group.add2("generate", cmd_generate, less_logging=False)
    group.add2("train", cmd_train, less_logging=False)
    group.add2("render", cmd_render, less_logging=False)
    group.add2("eval", cmd_eval)
    group.add2("inspect", cmd_inspect)
    return group


def init_logging(level: int) -> None:
    logging.basicConfig(
        format="%(asctime)s %(levelname)s %(name)s: %(message)s", stream=sys.stderr
    )
    LOG.setLevel(level)


def main(argv: Optional[List[str]] = None) -> None:
    if argv is None:
        argv = sys.argv
    command.dispatch(build_group(), argv=argv, log_init=init_logging)
