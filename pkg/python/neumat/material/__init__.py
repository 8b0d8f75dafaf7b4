from .material import (
    DEFAULT_CHANNELS,
    DEFAULT_K,
    FORMAT_VERSION,
    TEXTURE_INIT_STD,
    EvalCache,
    MaterialGrads,
    MbtfMaterial,
    Provenance,
    Query,
    QueryBatch,
    backward_batch,
    cosine_pdf,
    evaluate,
    evaluate_baseline,
    evaluate_batch,
    forward_batch,
    load_material,
    sample_cosine,
    sample_outgoing,
    save_material,
)

__all__ = [
    "DEFAULT_CHANNELS",
    "DEFAULT_K",
    "FORMAT_VERSION",
    "TEXTURE_INIT_STD",
    "EvalCache",
    "MaterialGrads",
    "MbtfMaterial",
    "Provenance",
    "Query",
    "QueryBatch",
    "backward_batch",
    "cosine_pdf",
    "evaluate",
    "evaluate_baseline",
    "evaluate_batch",
    "forward_batch",
    "load_material",
    "sample_cosine",
    "sample_outgoing",
    "save_material",
]
