"""Plot search traces to image files."""

from pathlib import Path
from typing import Union

from matplotlib.backends.backend_agg import FigureCanvasAgg as FigureCanvas
from matplotlib.figure import Figure
import numpy as np

from .search import SearchTrace


def plot_trace(
    trace: SearchTrace, budget: float, fname: Union[str, Path], dpi: int = 100
) -> Path:
    """Plot expected parameters against the budget, stability, and the triggers.

    :param trace: Search trace.
    :param budget: Absolute parameter budget, drawn as horizontal line.
    :param fname: Output file; the suffix is forced to ``.png``.
    :param dpi: Resolution.

    :return: Path of the written image.
    """
    fname = Path(fname).with_suffix(".png")
    fname.parent.mkdir(parents=True, exist_ok=True)

    fig = Figure(figsize=(9, 5), dpi=dpi)
    FigureCanvas(fig)
    axes = fig.add_subplot(111)

    steps = np.array([r.step for r in trace.steps])
    expected = np.array([r.expected_params for r in trace.steps])
    beta = np.array([r.beta for r in trace.steps])

    axes.plot(steps, expected, color="tab:blue", label="Expected parameters")
    axes.axhline(budget, color="k", linestyle="--", linewidth=1, label="Budget")
    for it, trig in enumerate(trace.triggers):
        axes.axvline(
            trig.step,
            color="tab:red",
            alpha=0.3,
            linewidth=0.8,
            label="Trigger" if it == 0 else None,
        )
    axes.set_xlabel("Step")
    axes.set_ylabel("Parameters")

    ax_beta = axes.twinx()
    ax_beta.plot(steps, beta, color="tab:orange", linewidth=0.8, label="Stability")
    ax_beta.set_ylim(0, 1.05)
    ax_beta.set_ylabel("Stability")

    handles, labels = axes.get_legend_handles_labels()
    handles_b, labels_b = ax_beta.get_legend_handles_labels()
    axes.legend(handles + handles_b, labels + labels_b, loc="upper right")

    fig.tight_layout()
    fig.savefig(fname)
    return fname
