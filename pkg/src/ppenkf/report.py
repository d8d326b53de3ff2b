"""Result tables: per-experiment records, aggregates and rank tables in CSV
or JSON with stable column order and 6-significant-digit numbers."""
from __future__ import annotations

import csv
import io
import json
import math
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

from .core import ValidationError

RECORD_COLUMNS = ("method", "n_e", "corr_len", "seed", "rmse", "std", "status", "wall_time")
_INT_COLUMNS = {"n_e", "seed"}
_STR_COLUMNS = {"method", "status", "scenario"}


def format_value(v) -> str:
    if v is None:
        return "nan"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, int):
        return str(v)
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6g}"
    return str(v)


def _json_value(v):
    if isinstance(v, float):
        return None if math.isnan(v) else float(f"{v:.6g}")
    return v


def _parse_value(col: str, text: str):
    if col in _STR_COLUMNS:
        return text
    if col in _INT_COLUMNS:
        return int(text)
    try:
        return int(text) if text.lstrip("-").isdigit() else float(text)
    except ValueError:
        return text


def table_to_csv(rows: Sequence[dict], columns: Sequence[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([format_value(r.get(c)) for c in columns])
    return buf.getvalue()


def table_to_json(rows: Sequence[dict], columns: Sequence[str], kind: str) -> str:
    doc = {"kind": kind, "columns": list(columns),
           "rows": [{c: _json_value(r.get(c)) for c in columns} for r in rows]}
    return json.dumps(doc, indent=2, ensure_ascii=False) + "\n"


def emit_report(records: Sequence[dict], path, fmt: str = "csv",
                columns: Sequence[str] = RECORD_COLUMNS, kind: str = "records") -> Path:
    """Write rows to ``path`` (suffix replaced by the format) and return it."""
    if not records:
        raise ValidationError("no records to write")
    if fmt not in ("csv", "json"):
        raise ValidationError(f"unknown report format {fmt!r}")
    p = Path(path).with_suffix("." + fmt)
    text = table_to_csv(records, columns) if fmt == "csv" else table_to_json(records, columns, kind)
    p.parent.mkdir(parents=True, exist_ok=True)
    with open(p, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return p


def read_report(path) -> list[dict]:
    """Parse a CSV or JSON table written by :func:`emit_report`."""
    p = Path(path)
    text = p.read_text(encoding="utf-8")
    if p.suffix == ".json":
        doc = json.loads(text)
        return [{k: (float("nan") if v is None else v) for k, v in r.items()} for r in doc["rows"]]
    rows = list(csv.DictReader(io.StringIO(text)))
    return [{k: _parse_value(k, v) for k, v in r.items()} for r in rows]


def load_schema() -> dict:
    return json.loads(resources.files("ppenkf").joinpath("schemas/report.schema.json").read_text("utf-8"))


# ------------------------------------------------------------ aggregation

def _mean(vals: Iterable[float]) -> float:
    v = [x for x in vals if not math.isnan(x)]
    return sum(v) / len(v) if v else float("nan")


def aggregate_records(records: Sequence[dict]) -> list[dict]:
    """Mean RMSE and STD per (method, n_e, corr_len) over successful runs."""
    groups: dict = {}
    for r in records:
        groups.setdefault((r["method"], r["n_e"], r["corr_len"]), []).append(r)
    out = []
    for (m, n, cl), rs in groups.items():
        ok = [r for r in rs if r["status"] == "ok"]
        out.append({"method": m, "n_e": n, "corr_len": cl,
                    "n_ok": len(ok), "n_failed": len(rs) - len(ok),
                    "mean_rmse": _mean(r["rmse"] for r in ok),
                    "mean_std": _mean(r["std"] for r in ok)})
    return out


AGGREGATE_COLUMNS = ("method", "n_e", "corr_len", "n_ok", "n_failed", "mean_rmse", "mean_std")
RANK_COLUMNS = ("method", "tracer_avg_rank", "well_avg_rank")
CORRELATION_COLUMNS = ("scenario", "method", "seed", "correlation_rmse")
