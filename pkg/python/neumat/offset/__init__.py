from .offset import (
    DIRECTION_TOLERANCE,
    Z_MIN,
    Direction,
    OffsetCache,
    OffsetModule,
    apply_offset,
    apply_offset_batch,
    check_directions,
    direction_z,
    offset_backward,
    offset_backward_batch,
    offset_field,
    offset_from_depth,
    offset_from_depth_batch,
    offset_scale,
    offset_visualization,
    ray_depth,
    ray_depth_batch,
    texel_centers,
    write_offset_visualization,
)

__all__ = [
    "DIRECTION_TOLERANCE",
    "Z_MIN",
    "Direction",
    "OffsetCache",
    "OffsetModule",
    "apply_offset",
    "apply_offset_batch",
    "check_directions",
    "direction_z",
    "offset_backward",
    "offset_backward_batch",
    "offset_field",
    "offset_from_depth",
    "offset_from_depth_batch",
    "offset_scale",
    "offset_visualization",
    "ray_depth",
    "ray_depth_batch",
    "texel_centers",
    "write_offset_visualization",
]
