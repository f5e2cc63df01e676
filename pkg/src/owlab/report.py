"""Tabular run reports and figure rendering.

Every command emits its tables twice: CSV for machines and an aligned
markdown table for people.  Float cells serialize through ``repr`` so a
re-run with an identical config reproduces every byte of the CSV, and
parsing a report back yields exactly the table that was written.  Files
are written atomically (temp file + rename) so a crashed run never
leaves a half-written report behind.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import re
import tempfile
from dataclasses import dataclass, field

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be pinned first)

_INT_RE = re.compile(r"[+-]?\d+\Z")
_FLOAT_HINT = re.compile(r"[.eE]|inf|nan")


@dataclass
class ReportTable:
    """Named columns, rows of scalar cells, footnote lines.

    Cells may be bool, int, float, or str.  Row order and column order
    are part of the table's identity: serialization never reorders.
    """

    name: str
    columns: list[str]
    rows: list[list] = field(default_factory=list)
    footnotes: list[str] = field(default_factory=list)

    def __post_init__(self):
        for row in self.rows:
            self._check_row(row)

    def _check_row(self, row):
        if len(row) != len(self.columns):
            raise ValueError(
                f"row has {len(row)} cells, table {self.name!r} has "
                f"{len(self.columns)} columns")
        for cell in row:
            if not isinstance(cell, (bool, int, float, str)):
                raise TypeError(f"unsupported cell type {type(cell).__name__}")

    def add_row(self, *cells):
        row = list(cells)
        self._check_row(row)
        self.rows.append(row)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# table: {self.name}\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for row in self.rows:
            writer.writerow([_serialize(cell) for cell in row])
        for note in self.footnotes:
            buf.write(f"# {note}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ReportTable":
        name = "table"
        footnotes = []
        data_lines = []
        for line in text.splitlines():
            if line.startswith("# table: "):
                name = line[len("# table: "):]
            elif line.startswith("# "):
                footnotes.append(line[2:])
            elif line:
                data_lines.append(line)
        if not data_lines:
            raise ValueError("no header row in report CSV")
        parsed = list(csv.reader(data_lines))
        columns = parsed[0]
        rows = [[_parse(cell) for cell in row] for row in parsed[1:]]
        return cls(name, columns, rows, footnotes)

    def to_markdown(self) -> str:
        cells = [[_serialize(c) for c in row] for row in self.rows]
        widths = [len(c) for c in self.columns]
        for row in cells:
            widths = [max(w, len(c)) for w, c in zip(widths, row)]
        def fmt(row):
            return "| " + " | ".join(c.ljust(w) for c, w in zip(row, widths)) + " |"
        lines = [f"## {self.name}", ""]
        lines.append(fmt(self.columns))
        lines.append("|" + "|".join("-" * (w + 2) for w in widths) + "|")
        lines.extend(fmt(row) for row in cells)
        if self.footnotes:
            lines.append("")
            lines.extend(f"_{note}_" for note in self.footnotes)
        return "\n".join(lines) + "\n"


def _serialize(cell) -> str:
    if isinstance(cell, bool):
        return "true" if cell else "false"
    if isinstance(cell, float):
        # float() strips numpy scalar wrappers so repr stays plain
        return repr(float(cell))
    return str(cell)


def _parse(cell: str):
    if cell == "true":
        return True
    if cell == "false":
        return False
    if _INT_RE.match(cell):
        return int(cell)
    if _FLOAT_HINT.search(cell):
        try:
            return float(cell)
        except ValueError:
            pass
    return cell


def config_sha256(config: dict) -> str:
    """Hash of the canonical JSON form (sorted keys, no whitespace)."""
    canon = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def standard_footnotes(config: dict) -> list[str]:
    return [f"config sha256: {config_sha256(config)}",
            f"seed: {config.get('seed')}"]


def atomic_write_bytes(path, data: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def write_report(table: ReportTable, out_dir, basename: str) -> tuple[str, str]:
    """Write ``basename.csv`` and ``basename.md``; returns both paths."""
    csv_path = os.path.join(out_dir, f"{basename}.csv")
    md_path = os.path.join(out_dir, f"{basename}.md")
    atomic_write_text(csv_path, table.to_csv())
    atomic_write_text(md_path, table.to_markdown())
    return csv_path, md_path


def read_report(path) -> ReportTable:
    with open(path, encoding="utf-8") as fh:
        return ReportTable.from_csv(fh.read())


def save_figure(fig, path) -> None:
    """Render to PNG through an in-memory buffer, then atomic rename."""
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=120, bbox_inches="tight")
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def line_figure(x, series: dict, title: str, xlabel: str, ylabel: str):
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for label, ys in series.items():
        ax.plot(x, ys, marker="o", markersize=3, linewidth=1.2, label=label)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    ax.grid(True, alpha=0.3)
    ax.legend(fontsize=8)
    return fig


def histogram_figure(groups: dict, title: str, xlabel: str, bins: int = 40):
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for label, values in groups.items():
        ax.hist(values, bins=bins, alpha=0.55, label=label)
    ax.set_title(title)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("count")
    ax.legend(fontsize=8)
    return fig


def scatter_figure(points, labels, title: str):
    """2-D scatter of the first two coordinates, one color per label."""
    fig, ax = plt.subplots(figsize=(5.2, 5.0))
    import numpy as np

    pts = np.asarray(points)
    labs = np.asarray(labels)
    for value in np.unique(labs):
        sel = labs == value
        ax.scatter(pts[sel, 0], pts[sel, 1], s=8, alpha=0.6, label=str(value))
    ax.set_title(title)
    ax.set_xlabel("dim 0")
    ax.set_ylabel("dim 1")
    ax.legend(fontsize=8, title="class")
    return fig
