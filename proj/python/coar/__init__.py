"""Python access to the coar toy layerwise-context library."""

from ._coar import (
    Backbone,
    Bank,
    CorruptCheckpoint,
    InvalidArgument,
    NumericFailure,
    UnsupportedVersion,
    audit_table,
    context_param_count,
    gradcheck,
    kl_divergence,
    lora_param_estimate,
)

__all__ = [
    "Backbone",
    "Bank",
    "CorruptCheckpoint",
    "InvalidArgument",
    "NumericFailure",
    "UnsupportedVersion",
    "audit_table",
    "context_param_count",
    "gradcheck",
    "kl_divergence",
    "lora_param_estimate",
]
