"""Bridge from masked event-trigger instances to a logits candidates file."""

from .core import (
    ExportJob,
    HashFiller,
    MaskedRecord,
    SchemaError,
    ValidationReport,
    export_logits,
    read_masked_instances,
    validate,
)

__all__ = [
    "ExportJob",
    "HashFiller",
    "MaskedRecord",
    "SchemaError",
    "ValidationReport",
    "export_logits",
    "read_masked_instances",
    "validate",
]
