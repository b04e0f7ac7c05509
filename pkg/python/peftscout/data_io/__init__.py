"""Synthetic tasks, backbone checkpoints, and the files a run writes."""

from . import tasks
from . import checkpoint
from . import excel_writer
from . import export
from .tasks import SplitData, SyntheticTask, generate_task

__all__ = [
    "checkpoint",
    "excel_writer",
    "export",
    "tasks",
    "SplitData",
    "SyntheticTask",
    "generate_task",
]
