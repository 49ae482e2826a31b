"""moeforge: dynamic expert clustering, low-rank compression and hierarchical
routing for mixture-of-experts models, with communication and memory
simulators. Thin wrapper over the C++ core."""

from moeforge._core import (
    GroupAssignment,
    QuantBlock,
    adjusted_rand_index,
    cluster_planted_bank,
    compression_ratio,
    cosine_similarity,
    default_config_json,
    dequantize_group,
    effective_compression_ratio,
    fp16_round_trip,
    frobenius_rel_error,
    fused_similarity,
    quantize_group,
    recluster_interval,
    routing_cost,
    should_recluster,
    singular_values,
    temperature_at,
    train_from_json,
    truncated_svd,
    zipf_load_covs,
)

__all__ = [
    "GroupAssignment",
    "QuantBlock",
    "adjusted_rand_index",
    "cluster_planted_bank",
    "compression_ratio",
    "cosine_similarity",
    "default_config_json",
    "dequantize_group",
    "effective_compression_ratio",
    "fp16_round_trip",
    "frobenius_rel_error",
    "fused_similarity",
    "quantize_group",
    "recluster_interval",
    "routing_cost",
    "should_recluster",
    "singular_values",
    "temperature_at",
    "train_from_json",
    "truncated_svd",
    "zipf_load_covs",
]

__version__ = "0.1.0"
