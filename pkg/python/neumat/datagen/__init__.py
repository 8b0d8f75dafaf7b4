from .datagen import (
    CHUNK_RECORDS,
    DEFAULT_ORACLE_SAMPLES,
    DEFAULT_PER_TEXEL,
    FLAG_INDIRECT,
    FLAG_SYNTHETIC,
    PRESETS,
    RECOMMENDED_PER_TEXEL,
    DatasetHeader,
    DatasetWriter,
    Heightfield,
    Hit,
    HitBatch,
    OracleOptions,
    QueryDataset,
    btf_eval_oracle,
    btf_eval_oracle_batch,
    dataset_flags,
    dataset_iter,
    dataset_read,
    dataset_write,
    heightfield_intersect,
    intersect_batch,
    iter_query_chunks,
    load_heightfield_png,
    mbtf_oracle,
    mbtf_oracle_batch,
    per_texel_in_range,
    per_texel_warning,
    preset_heightfield,
    read_dataset_header,
    record_count,
    records_to_queries,
    sample_queries,
    srgb_to_linear,
    validate_records,
)

__all__ = [
    "CHUNK_RECORDS",
    "DEFAULT_ORACLE_SAMPLES",
    "DEFAULT_PER_TEXEL",
    "FLAG_INDIRECT",
    "FLAG_SYNTHETIC",
    "PRESETS",
    "RECOMMENDED_PER_TEXEL",
    "DatasetHeader",
    "DatasetWriter",
    "Heightfield",
    "Hit",
    "HitBatch",
    "OracleOptions",
    "QueryDataset",
    "btf_eval_oracle",
    "btf_eval_oracle_batch",
    "dataset_flags",
    "dataset_iter",
    "dataset_read",
    "dataset_write",
    "heightfield_intersect",
    "intersect_batch",
    "iter_query_chunks",
    "load_heightfield_png",
    "mbtf_oracle",
    "mbtf_oracle_batch",
    "per_texel_in_range",
    "per_texel_warning",
    "preset_heightfield",
    "read_dataset_header",
    "record_count",
    "records_to_queries",
    "sample_queries",
    "srgb_to_linear",
    "validate_records",
]
