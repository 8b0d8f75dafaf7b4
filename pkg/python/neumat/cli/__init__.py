from .cli import (
    GenerateOptions,
    build_group,
    cmd_eval,
    cmd_generate,
    cmd_inspect,
    cmd_render,
    cmd_train,
    generate_dataset,
    inspect_report,
    main,
    swatch_mse_by_level,
)

__all__ = [
    "GenerateOptions",
    "build_group",
    "cmd_eval",
    "cmd_generate",
    "cmd_inspect",
    "cmd_render",
    "cmd_train",
    "generate_dataset",
    "inspect_report",
    "main",
    "swatch_mse_by_level",
]
