"""Export search traces and run summaries to files."""

import json
from pathlib import Path
from typing import Any, Dict, Iterable, List, Sequence, Tuple, Union

from ..search import SearchTrace
from ..utilities.utils import atomic_write_text

STEP_HEADER = ("step", "train_loss", "val_loss", "beta", "expected_params")
TRIGGER_HEADER = ("z", "step", "R_z", "removed", "Y_z", "fixed")


def _fmt(value: Any) -> str:
    """Format a CSV cell; floats use their shortest round-trip representation."""
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ";".join(str(v) for v in value)
    return str(value)


def csv_text(header: Sequence[str], rows: Iterable[Sequence[Any]]) -> str:
    """CSV document with a header line and LF line endings."""
    lines = [",".join(header)]
    lines.extend(",".join(_fmt(cell) for cell in row) for row in rows)
    return "\n".join(lines) + "\n"


def emit_trace(trace: SearchTrace, directory: Union[str, Path]) -> Tuple[Path, Path]:
    """Write the step and trigger records of a search trace as CSV files.

    Site ids in the ``removed`` and ``fixed`` columns are separated by ``;``.

    :param trace: Search trace.
    :param directory: Output directory (created if needed).

    :return: Paths of the step file and the trigger file.
    """
    directory = Path(directory)
    steps = [
        (r.step, r.train_loss, r.val_loss, r.beta, r.expected_params) for r in trace.steps
    ]
    triggers = [
        (r.z, r.step, r.reduction, r.removed, r.fix_count, r.fixed) for r in trace.triggers
    ]
    fsteps = atomic_write_text(directory / "trace_steps.csv", csv_text(STEP_HEADER, steps))
    ftrig = atomic_write_text(
        directory / "trace_triggers.csv", csv_text(TRIGGER_HEADER, triggers)
    )
    return fsteps, ftrig


def write_summary(summary: Dict[str, Any], fname: Union[str, Path]) -> Path:
    """Write a run summary as JSON with sorted keys.

    :param summary: JSON-serializable summary.
    :param fname: File name.

    :return: Path of the written file.
    """
    return atomic_write_text(fname, json.dumps(summary, indent=2, sort_keys=True) + "\n")


def write_table(
    header: Sequence[str], rows: List[Sequence[Any]], fname: Union[str, Path]
) -> Path:
    """Write rows as CSV file (used for sweep results)."""
    return atomic_write_text(fname, csv_text(header, rows))
