"""Report serialization and the on-disk result layout.

Layout under an output directory::

    <out>/<scenario>/<variant>/rep<i>.csv   per-tick series, one row per tick
    <out>/<scenario>/<variant>/rep<i>.json  full nested report
    <out>/summary.csv                       one summary row per run

Every file is written to a temporary sibling and renamed into place, so a
failure never leaves a partial file behind.
"""

import csv
import io
import json
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from .engine import MetricsReport

SERIES_COLUMNS = ("time_s", "latency_ms", "pdr_pct", "reliability_pct", "att_min", "nci_pct")
SUMMARY_COLUMNS = ("scenario", "variant", "rep") + MetricsReport.SUMMARY_FIELDS[2:]


def atomic_write(path, data):
    """Write ``data`` (str or bytes) to ``path`` via temp file + rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _cell(x):
    """CSV cell text: repr for floats, empty for missing values."""
    if x is None:
        return ""
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return "" if math.isnan(x) else repr(x)
    if isinstance(x, (np.integer, np.bool_)):
        return str(x.item())
    return str(x)


def _plain(x):
    """JSON-safe value: NaN becomes null, numpy scalars and arrays become Python."""
    if isinstance(x, dict):
        return {str(k): _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    if isinstance(x, np.ndarray):
        return [_plain(v) for v in x.tolist()]
    if isinstance(x, (np.floating, float)):
        x = float(x)
        return None if math.isnan(x) or math.isinf(x) else x
    if isinstance(x, (np.integer, np.bool_)):
        return x.item()
    return x


def csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(v) for v in row])
    return buf.getvalue()


def report_to_dict(report):
    d = report.summary()
    d["extras"] = dict(report.extras)
    d["series"] = {k: report.series[k] for k in SERIES_COLUMNS if k in report.series}
    return _plain(d)


def report_to_json(report):
    return json.dumps(report_to_dict(report), indent=1, allow_nan=False) + "\n"


def report_from_json(text):
    d = json.loads(text)
    series = {k: np.array([np.nan if v is None else v for v in vals], dtype=float) for k, vals in d.pop("series").items()}
    extras = d.pop("extras")
    return MetricsReport(**d, series=series, extras=extras)


def series_to_csv(report):
    cols = [report.series[k] for k in SERIES_COLUMNS]
    return csv_text(SERIES_COLUMNS, zip(*cols))


def summary_row(report, rep):
    s = report.summary()
    return [s["scenario"], s["variant"], rep] + [s[k] for k in SUMMARY_COLUMNS[3:]]


def summary_to_csv(entries):
    """``entries`` is a sequence of ``(report, rep)`` pairs."""
    return csv_text(SUMMARY_COLUMNS, (summary_row(r, i) for r, i in entries))


def write_reports(out, entries, fmt="csv"):
    """Write per-run files plus ``summary.csv``; returns the written paths.

    ``entries`` holds ``(report, rep)`` pairs. ``fmt`` picks the per-run
    file type; the summary is always CSV.
    """
    if fmt not in ("csv", "json"):
        raise ValueError("fmt must be 'csv' or 'json'")
    out = Path(out)
    entries = list(entries)
    paths = []
    for report, rep in entries:
        path = out / report.scenario / report.variant / f"rep{rep}.{fmt}"
        atomic_write(path, series_to_csv(report) if fmt == "csv" else report_to_json(report))
        paths.append(path)
    path = out / "summary.csv"
    atomic_write(path, summary_to_csv(entries))
    paths.append(path)
    return paths


def ablation_to_csv(table):
    rows = list(table.rows())
    header = list(rows[0]) if rows else ["scenario", "variant", "n"]
    return csv_text(header, ([r[k] for k in header] for r in rows))
