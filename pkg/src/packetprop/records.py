"""Experiment records and deterministic CSV/report output."""

from __future__ import annotations

import csv
import io
import os
from dataclasses import dataclass, field


def fmt(value) -> str:
    """12 significant digits for floats, plain str otherwise."""
    if isinstance(value, bool):
        return str(value)
    if isinstance(value, float):
        return f"{value:.12g}"
    return str(value)


@dataclass
class ExperimentRecord:
    """Named results: parameter echo, scalar map, table rows, pass/fail checks."""

    name: str
    params: dict = field(default_factory=dict)
    scalars: dict = field(default_factory=dict)
    rows: list = field(default_factory=list)          # list of dicts, uniform keys
    checks: list = field(default_factory=list)        # (label, passed, value, tolerance)

    def add_check(self, label: str, passed: bool, value: float, tol_text: str):
        self.checks.append((label, bool(passed), value, tol_text))

    def all_passed(self) -> bool:
        return all(p for _, p, _, _ in self.checks)

    def table_csv(self) -> str:
        buf = io.StringIO()
        if self.rows:
            writer = csv.writer(buf, lineterminator="\n")
            headers = list(self.rows[0].keys())
            writer.writerow(headers)
            for row in self.rows:
                writer.writerow([fmt(row[h]) for h in headers])
        return buf.getvalue()

    def scalars_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["key", "value"])
        for key in self.params:
            writer.writerow([f"param:{key}", fmt(self.params[key])])
        for key in self.scalars:
            writer.writerow([key, fmt(self.scalars[key])])
        for label, passed, value, tol in self.checks:
            writer.writerow([f"check:{label}", f"{'pass' if passed else 'FAIL'} value={fmt(value)} tol={tol}"])
        return buf.getvalue()

    def summary_lines(self) -> list[str]:
        lines = [f"== {self.name} =="]
        if self.params:
            lines.append("params: " + ", ".join(f"{k}={fmt(v)}" for k, v in self.params.items()))
        for key, val in self.scalars.items():
            lines.append(f"  {key} = {fmt(val)}")
        for label, passed, value, tol in self.checks:
            lines.append(f"  [{'PASS' if passed else 'FAIL'}] {label}: value={fmt(value)} tol={tol}")
        return lines


def write_plot_series(path: str, xs, ys, xlabel: str = "x", ylabel: str = "y"):
    """Two-column x/y series digestible by any plotting tool."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow([xlabel, ylabel])
        for x, y in zip(xs, ys):
            writer.writerow([fmt(float(x)), fmt(float(y))])


def emit_report(records: list[ExperimentRecord], outdir: str) -> list[str]:
    """Write summary text plus per-experiment scalar/table CSVs; returns paths."""
    if not records:
        raise ValueError("need at least one record")
    os.makedirs(outdir, exist_ok=True)
    paths = []
    summary = []
    for rec in records:
        summary.extend(rec.summary_lines())
        base = os.path.join(outdir, rec.name)
        spath = base + "_scalars.csv"
        with open(spath, "w", newline="") as fh:
            fh.write(rec.scalars_csv())
        paths.append(spath)
        tpath = base + "_table.csv"
        with open(tpath, "w", newline="") as fh:
            fh.write(rec.table_csv())
        paths.append(tpath)
    spath = os.path.join(outdir, "summary.txt")
    with open(spath, "w") as fh:
        fh.write("\n".join(summary) + "\n")
    paths.append(spath)
    return paths


def read_scalars_csv(path: str) -> dict:
    out = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if row and row[0] != "key":
                out[row[0]] = row[1]
    return out
