"""CSV and JSON readers and writers for traces, reports and sweeps.

Floats are written with ``repr`` so files round-trip exactly and reruns are
byte-identical.
"""
from __future__ import annotations

import csv
import io
import json
import math
from collections import OrderedDict
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .estimator import TrackingReport
from .trajectory_sim import MeasurementTrace, TraceTruth

TRACES_LONG = "traces.csv"
TRUTH = "truth.csv"


class RecordError(ValueError):
    """Malformed or missing input file."""


def _num(x) -> str:
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return repr(x)


def _csv_text(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow(row)
    return buf.getvalue()


def _write(path: Path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8", newline="")
    return path


# -- traces ------------------------------------------------------------------------


def traces_long_csv(traces: Sequence[MeasurementTrace]) -> str:
    rows = (
        (tr.trace_id, _num(t), _num(p))
        for tr in traces
        for t, p in zip(tr.times, tr.angles)
    )
    return _csv_text(["trace_id", "t_us", "phi_rad"], rows)


def trace_csv(trace: MeasurementTrace) -> str:
    return _csv_text(["t_us", "phi_rad"], ((_num(t), _num(p)) for t, p in zip(trace.times, trace.angles)))


def truth_csv(traces: Sequence[MeasurementTrace]) -> str:
    """Sidecar with the generative spin components and surviving atom number."""
    rows = []
    for tr in traces:
        if tr.truth is None:
            continue
        tt = tr.truth
        rows.extend(
            (tr.trace_id, _num(t), _num(y), _num(z), _num(a))
            for t, y, z, a in zip(tr.times, tt.fy, tt.fz, tt.atoms)
        )
    return _csv_text(["trace_id", "t_us", "Fy", "Fz", "atoms"], rows)


def write_traces(out_dir: Path, traces: Sequence[MeasurementTrace], layout: str = "long") -> list[Path]:
    """Write traces as one long file or one file per trace, plus the truth sidecar."""
    out_dir = Path(out_dir)
    written = []
    if layout == "long":
        written.append(_write(out_dir / TRACES_LONG, traces_long_csv(traces)))
    elif layout == "files":
        for tr in traces:
            written.append(_write(out_dir / f"trace_{tr.trace_id:05d}.csv", trace_csv(tr)))
    else:
        raise ValueError(f"unknown trace layout {layout!r}")
    if any(tr.truth is not None for tr in traces):
        written.append(_write(out_dir / TRUTH, truth_csv(traces)))
    return written


def _read_rows(path: Path, required: Sequence[str]) -> list[dict]:
    """Rows of a CSV file with the ``required`` columns parsed as numbers."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in required if c not in (reader.fieldnames or [])]
        if missing:
            raise RecordError(f"{path}: missing columns {missing}")
        rows = list(reader)
    for line, r in enumerate(rows, start=2):
        for c in required:
            try:
                r[c] = float(r[c])
            except (TypeError, ValueError):
                raise RecordError(f"{path}:{line}: {c}={r[c]!r} is not a number") from None
    return rows


def read_traces(source: Path) -> list[MeasurementTrace]:
    """Traces from a directory (long file or per-trace files) or a long CSV."""
    source = Path(source)
    if source.is_dir():
        long_path = source / TRACES_LONG
        truth_path = source / TRUTH
        if long_path.exists():
            traces = _read_long(long_path)
        else:
            files = sorted(source.glob("trace_*.csv"))
            if not files:
                raise RecordError(f"no trace files in {source}")
            traces = []
            for f in files:
                rows = _read_rows(f, ["t_us", "phi_rad"])
                tid = int(f.stem.split("_")[-1])
                traces.append(MeasurementTrace(
                    [r["t_us"] for r in rows], [r["phi_rad"] for r in rows], trace_id=tid,
                ))
    elif source.exists():
        traces = _read_long(source)
        truth_path = source.with_name(TRUTH)
    else:
        raise RecordError(f"{source} does not exist")
    if not traces:
        raise RecordError(f"{source} holds no traces")
    if truth_path.exists():
        attach_truth(traces, truth_path)
    return traces


def _read_long(path: Path) -> list[MeasurementTrace]:
    rows = _read_rows(path, ["trace_id", "t_us", "phi_rad"])
    grouped: "OrderedDict[int, tuple[list, list]]" = OrderedDict()
    for r in rows:
        t, p = grouped.setdefault(int(r["trace_id"]), ([], []))
        t.append(r["t_us"])
        p.append(r["phi_rad"])
    return [MeasurementTrace(t, p, trace_id=tid) for tid, (t, p) in grouped.items()]


def attach_truth(traces: Sequence[MeasurementTrace], path: Path) -> None:
    rows = _read_rows(path, ["trace_id", "t_us", "Fy", "Fz"])
    grouped: dict[int, list] = {}
    for r in rows:
        grouped.setdefault(int(r["trace_id"]), []).append(r)
    for tr in traces:
        rs = grouped.get(tr.trace_id)
        if rs is None or len(rs) != len(tr):
            continue
        atoms = np.array([float(r.get("atoms") or "nan") for r in rs])
        tr.truth = TraceTruth(
            fy=np.array([r["Fy"] for r in rs]),
            fz=np.array([r["Fz"] for r in rs]),
            atoms=atoms,
            atoms_drawn=float(atoms[0]),
            omega=float("nan"),
            phi0=float("nan"),
        )
    # benchmarks need the atom column; drop partial truth rather than mix sources
    if any(tr.truth is None or np.isnan(tr.truth.atoms).any() for tr in traces):
        for tr in traces:
            tr.truth = None


# -- reports ---------------------------------------------------------------------


def report_csv(report: TrackingReport) -> str:
    rows = (
        (_num(p.t_e), _num(p.var_rho), _num(p.var_psi), _num(p.sql), _num(p.poisson),
         _num(p.db_rho), _num(p.db_psi), p.n_traces)
        for p in report.points
    )
    return _csv_text(["t_e_us", "var_rho", "var_psi", "sql", "poisson", "db_rho", "db_psi", "n_traces"], rows)


def residuals_csv(report: TrackingReport) -> str:
    rows = (
        (int(tid), _num(p.t_e), _num(r[0]), _num(r[1]))
        for p in report.points
        for tid, r in zip(p.trace_ids, p.residuals)
    )
    return _csv_text(["trace_id", "t_e_us", "Fcal_y", "Fcal_z"], rows)


def report_summary(report: TrackingReport) -> dict:
    steady = report.steady_state()
    return {
        "delta_t_us": report.delta_t,
        "db_psi_steady": steady["db_psi_steady"],
        "db_rho_steady": steady["db_rho_steady"],
        "steady_points": steady["n_points"],
        "sql_crossing_us": report.sql_crossing(),
        "failed_traces": report.failed_traces,
        "benchmark_source": report.benchmark_source,
        "n_points": len(report.points),
    }


def json_text(data) -> str:
    return json.dumps(data, indent=2, sort_keys=True, allow_nan=True) + "\n"


def read_points_csv(path: Path) -> list[tuple[float, float]]:
    """Calibration input ``N_A,value``."""
    rows = _read_rows(Path(path), ["N_A", "value"])
    return [(r["N_A"], r["value"]) for r in rows]


def write_text(path: Path, text: str) -> Path:
    return _write(path, text)
