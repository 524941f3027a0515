"""Corruption robustness benchmark for person re-identification."""
from __future__ import annotations

from .const import DOMAIN, VERSION
from .corruptions import CorruptionSpec, CorruptionType, apply_corruption, list_corruptions
from .errors import DataError, InvariantError, ToolkitError, UsageError
from .metrics import ImageMeta, MetricSummary, evaluate
from .protocol import (
    CorruptionPlan,
    EvalEmbeddings,
    EvalReport,
    build_plan,
    materialize,
    run_eval,
    run_sweep,
    sample_plan,
)

__all__ = [
    "DOMAIN",
    "VERSION",
    "CorruptionPlan",
    "CorruptionSpec",
    "CorruptionType",
    "DataError",
    "EvalEmbeddings",
    "EvalReport",
    "ImageMeta",
    "InvariantError",
    "MetricSummary",
    "ToolkitError",
    "UsageError",
    "apply_corruption",
    "build_plan",
    "evaluate",
    "list_corruptions",
    "materialize",
    "run_eval",
    "run_sweep",
    "sample_plan",
]
