"""Iterative repair-and-validation harness for automated bug fixing."""

from .bench import BenchSummary, TaskInstance, load_tasks, run_bench, summarize_outcomes
from .orchestrator import IrvConfig, ProblemSummary, RunOutcome, RunReport, run_irv
from .workspace import (
    DiffDocument,
    Snapshot,
    Workspace,
    compute_diff,
    open_workspace,
    restore_snapshot,
    take_snapshot,
)

__version__ = "0.1.0"

__all__ = [
    "BenchSummary",
    "DiffDocument",
    "IrvConfig",
    "ProblemSummary",
    "RunOutcome",
    "RunReport",
    "Snapshot",
    "TaskInstance",
    "Workspace",
    "compute_diff",
    "load_tasks",
    "open_workspace",
    "restore_snapshot",
    "run_bench",
    "run_irv",
    "summarize_outcomes",
    "take_snapshot",
    "__version__",
]
