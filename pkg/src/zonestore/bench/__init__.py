"""Benchmark harness: workloads, metrics, experiment runners and the CLI."""

from .metrics import RunMetrics
from .runner import (Harness, RecoveryPoint, ValidationError, data_capacity, linear_fit,
                     object_cost, run_churn, run_fill, run_read, run_recovery_bench)
from .workload import (FixedSize, LogNormalSize, Op, OpStream, PayloadPool, ShadowMap,
                       WorkloadConfig, generate)

__all__ = ["FixedSize", "Harness", "LogNormalSize", "Op", "OpStream", "PayloadPool",
           "RecoveryPoint", "RunMetrics", "ShadowMap", "ValidationError", "WorkloadConfig",
           "data_capacity", "generate", "linear_fit", "object_cost", "run_churn", "run_fill",
           "run_read", "run_recovery_bench"]
