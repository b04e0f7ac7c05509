"""Write Excel files from sweep results."""

from datetime import datetime
from pathlib import Path
from typing import Any, List, Sequence, Union

import xlsxwriter

FIXED_CREATED = datetime(2000, 1, 1)

# number formats per column name, everything else is written as is
NUM_FORMATS = {
    "budget_ratio": "0.0000",
    "param_ratio": "0.0000",
    "gamma": "0.00",
    "tau": "0.00",
    "test_accuracy": "0.000",
    "val_accuracy": "0.000",
    "total_params": "0",
}


def sweep_workbook_writer(
    header: Sequence[str], rows: List[Sequence[Any]], fname: Union[str, Path]
) -> Path:
    """Write sweep results into an Excel workbook, one row per grid point.

    :param header: Column names.
    :param rows: Rows of values, aligned with ``header``.
    :param fname: File name; the suffix is forced to ``.xlsx``.

    :return: Path of the written workbook.
    """
    fname = Path(fname).with_suffix(".xlsx").absolute()  # ensure correct format
    fname.parent.mkdir(parents=True, exist_ok=True)

    wb = xlsxwriter.Workbook(str(fname))
    # fixed creation date, same rows give the same bytes
    wb.set_properties({"created": FIXED_CREATED})
    ws = wb.add_worksheet("sweep")

    # formats
    fmt_title = wb.add_format({"bold": True, "font_size": 14})
    fmt_hdr = wb.add_format({"bold": True, "italic": True, "bottom": True})
    fmts = {name: wb.add_format({"num_format": num}) for name, num in NUM_FORMATS.items()}

    ws.write(0, 0, "Search sweep", fmt_title)

    hdr_row = 2
    for col, name in enumerate(header):
        ws.write(hdr_row, col, name, fmt_hdr)
        ws.set_column(col, col, max(10, len(name) + 2))

    for it, row in enumerate(rows):
        for col, value in enumerate(row):
            fmt = fmts.get(header[col])
            if fmt is None:
                ws.write(hdr_row + 1 + it, col, value)
            else:
                ws.write(hdr_row + 1 + it, col, value, fmt)

    ws.freeze_panes(hdr_row + 1, 0)
    wb.close()
    return fname
