"""Result tables from EvalRows: a wide CSV and a Markdown grid with column maxima in bold."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path

from .metrics import EvalRow

METRIC_TITLES = {"miou": "mIoU", "mboundary_iou": "mBoundary IoU"}


class MissingCellsError(ValueError):
    def __init__(self, missing):
        self.missing = list(missing)
        names = "; ".join(", ".join(f"{k}={v}" for k, v in cell) for cell in self.missing)
        super().__init__(f"{len(self.missing)} report cell(s) have no EvalRow: {names}")


@dataclass
class ReportLayout:
    """Which EvalRow fields index table rows and column groups.

    ``values`` optionally fixes the expected values (and their order) for any
    key; keys without an entry take the values seen in the rows, in order of
    first appearance. ``baselines`` are external reference numbers rendered
    verbatim: dicts with ``label``, ``iou``, ``boundary_iou`` and ``source``.
    """

    row_keys: tuple = ("train_area", "model", "test_area")
    col_keys: tuple = ("loss",)
    metrics: tuple = ("miou", "mboundary_iou")
    values: dict = field(default_factory=dict)
    baselines: list = field(default_factory=list)

    @classmethod
    def from_dict(cls, d: dict) -> "ReportLayout":
        d = dict(d)
        for k in ("row_keys", "col_keys", "metrics"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def _ordered_values(rows, key, fixed):
    if key in fixed:
        return list(fixed[key])
    seen = []
    for r in rows:
        v = getattr(r, key)
        if v not in seen:
            seen.append(v)
    return seen


@dataclass
class ReportTable:
    layout: ReportLayout
    row_index: list   # tuples of row-key values
    col_index: list   # tuples of col-key values
    cells: dict       # (row tuple, col tuple) -> EvalRow

    def value(self, r, c, metric) -> float:
        return getattr(self.cells[(r, c)], metric)

    def column_max(self, c, metric) -> float:
        return max(self.value(r, c, metric) for r in self.row_index)


def build_table(rows, layout: ReportLayout) -> ReportTable:
    rows = list(rows)
    row_vals = [_ordered_values(rows, k, layout.values) for k in layout.row_keys]
    col_vals = [_ordered_values(rows, k, layout.values) for k in layout.col_keys]
    row_index = list(itertools.product(*row_vals))
    col_index = list(itertools.product(*col_vals))
    cells = {}
    for r in rows:
        rk = tuple(getattr(r, k) for k in layout.row_keys)
        ck = tuple(getattr(r, k) for k in layout.col_keys)
        if (rk, ck) in cells:
            raise ValueError(f"duplicate EvalRow for cell {rk} / {ck}")
        cells[(rk, ck)] = r
    missing = []
    for rk in row_index:
        for ck in col_index:
            if (rk, ck) not in cells:
                missing.append(tuple(zip(layout.row_keys, rk)) + tuple(zip(layout.col_keys, ck)))
    if missing:
        raise MissingCellsError(missing)
    return ReportTable(layout, row_index, col_index, cells)


def _col_label(ck) -> str:
    return "/".join(str(v) for v in ck)


def to_csv(table: ReportTable, path) -> None:
    lay = table.layout
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(lay.row_keys) + [f"{m}|{_col_label(c)}" for m in lay.metrics for c in table.col_index])
        for rk in table.row_index:
            vals = [repr(float(table.value(rk, c, m))) for m in lay.metrics for c in table.col_index]
            w.writerow(list(rk) + vals)


def to_markdown(table: ReportTable, title: str = "Results") -> str:
    lay = table.layout
    head = list(lay.row_keys) + [f"{METRIC_TITLES.get(m, m)} {_col_label(c)}"
                                 for m in lay.metrics for c in table.col_index]
    lines = [f"## {title}", "", "| " + " | ".join(head) + " |",
             "|" + "|".join(["---"] * len(lay.row_keys) + ["---:"] * (len(head) - len(lay.row_keys))) + "|"]
    maxima = {(m, c): table.column_max(c, m) for m in lay.metrics for c in table.col_index}
    for rk in table.row_index:
        cells = [str(v) for v in rk]
        for m in lay.metrics:
            for c in table.col_index:
                v = table.value(rk, c, m)
                txt = f"{v:.3f}"
                cells.append(f"**{txt}**" if v == maxima[(m, c)] else txt)
        lines.append("| " + " | ".join(cells) + " |")
    if lay.baselines:
        lines += ["", "## Benchmark comparison", "", "| Model | IoU | mBoundary IoU | Source |",
                  "|---|---:|---:|---|"]
        for b in lay.baselines:
            lines.append(f"| {b['label']} | {b.get('iou', '-')} | {b.get('boundary_iou', '-')} | {b.get('source', '')} |")
    return "\n".join(lines) + "\n"


def emit_report(rows, layout: ReportLayout | None = None, out_prefix=None, title="Results"):
    """Build the table and, if ``out_prefix`` is given, write ``<prefix>.csv`` and ``<prefix>.md``.

    Returns (table, markdown text).
    """
    layout = layout or ReportLayout()
    table = build_table(rows, layout)
    md = to_markdown(table, title)
    if out_prefix is not None:
        out_prefix = Path(out_prefix)
        out_prefix.parent.mkdir(parents=True, exist_ok=True)
        to_csv(table, out_prefix.with_suffix(".csv"))
        out_prefix.with_suffix(".md").write_text(md)
    return table, md


def rows_from(rows) -> list[EvalRow]:
    return [r for r in rows if isinstance(r, EvalRow)]
