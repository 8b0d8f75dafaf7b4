from .renderer import (
    BAND_ROWS,
    FOOTPRINT_SCALE,
    SCENE_KEYS,
    Camera,
    Image,
    Light,
    Plane,
    PlaneHits,
    QueryBuffer,
    RenderOptions,
    Scene,
    image_export,
    image_mse,
    linear_to_srgb,
    load_scene,
    lod_sweep_scenes,
    pixel_footprint_sigma,
    pixel_footprint_sigma_batch,
    read_pfm,
    render,
    render_reference,
    swatch_image,
    swatch_queries,
    to_srgb8,
    trace_plane,
    write_pfm,
    write_png,
)

__all__ = [
    "BAND_ROWS",
    "FOOTPRINT_SCALE",
    "SCENE_KEYS",
    "Camera",
    "Image",
    "Light",
    "Plane",
    "PlaneHits",
    "QueryBuffer",
    "RenderOptions",
    "Scene",
    "image_export",
    "image_mse",
    "linear_to_srgb",
    "load_scene",
    "lod_sweep_scenes",
    "pixel_footprint_sigma",
    "pixel_footprint_sigma_batch",
    "read_pfm",
    "render",
    "render_reference",
    "swatch_image",
    "swatch_queries",
    "to_srgb8",
    "trace_plane",
    "write_pfm",
    "write_png",
]
