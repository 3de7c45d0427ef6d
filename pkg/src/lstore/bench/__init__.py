"""Micro-benchmark harness: mixed point-update transactions plus analytical scans."""

from .report import report_emit
from .workload import RunReport, WorkloadConfig, run_workload

__all__ = ["RunReport", "WorkloadConfig", "report_emit", "run_workload"]
