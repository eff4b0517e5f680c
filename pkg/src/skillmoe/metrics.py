"""Diagnostics over gate traces and subspaces, and whole-file metric emission."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path

import numpy as np

from .trainer import SkillPolicy


def _argmax_seq(seq) -> np.ndarray:
    a = np.asarray(seq)
    if a.ndim == 2:
        return np.argmax(a, axis=1)  # first maximum wins: lower index on ties
    return a.astype(np.int64)


def flip_rate(seq) -> float:
    """Fraction of consecutive steps whose gate argmax changes.

    ``seq`` is either an argmax sequence or a (T, K) array of gates.
    """
    a = _argmax_seq(seq)
    if len(a) < 2:
        raise ValueError("flip_rate needs a sequence of length >= 2")
    return float(np.count_nonzero(a[1:] != a[:-1]) / (len(a) - 1))


def mean_segment_length(seq) -> float:
    a = _argmax_seq(seq)
    if len(a) < 1:
        raise ValueError("mean_segment_length needs a nonempty sequence")
    runs = 1 + np.count_nonzero(a[1:] != a[:-1])
    return len(a) / runs


def _check_orthonormal(B: np.ndarray, name: str) -> None:
    err = np.abs(B.T @ B - np.eye(B.shape[1])).max() if B.size else 0.0
    if err > 1e-6:
        raise ValueError(f"principal_angles: {name} is not orthonormal (max deviation {err:.2e})")


def principal_angles(B1, B2) -> np.ndarray:
    """Canonical angles in radians, ascending."""
    B1 = np.atleast_2d(np.asarray(B1, dtype=np.float64))
    B2 = np.atleast_2d(np.asarray(B2, dtype=np.float64))
    if B1.shape[0] != B2.shape[0]:
        raise ValueError("principal_angles: ambient dimensions differ")
    _check_orthonormal(B1, "B1")
    _check_orthonormal(B2, "B2")
    sv = np.linalg.svd(B1.T @ B2, compute_uv=False)
    return np.sort(np.arccos(np.clip(sv, 0.0, 1.0)))


def trace_fraction_inside(M: np.ndarray, G: np.ndarray) -> float:
    """Share of trace(M) (M symmetric PSD) lying in the column span of orthonormal G."""
    tot = np.trace(M)
    if tot <= 0:
        return 0.0
    return float(np.trace(G.T @ M @ G) / tot)


def deployed_param_counts(policy: SkillPolicy) -> dict[str, int]:
    """Parameters used at deployment; the posterior/usage amortizers only serve training."""
    return {c: policy.param_count(c) for c in ("basis", "router", "experts")}


def active_param_count(policy: SkillPolicy, trace) -> tuple[int, float]:
    """(total, expected active) parameters over a trace of per-step active sets."""
    counts = deployed_param_counts(policy)
    shared = counts["basis"] + counts["router"]
    per_expert = counts["experts"] / policy.dims.K
    total = shared + counts["experts"]
    sizes = [len(S) for S in trace]
    if not sizes:
        return total, float(shared)
    if max(sizes) == policy.dims.K and min(sizes) == policy.dims.K:
        return total, float(total)
    return total, shared + per_expert * float(np.mean(sizes))


# -- emission -------------------------------------------------------------------------
def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def _header(rows: list[dict], header: list[str] | None) -> list[str]:
    if header is None:
        if not rows:
            raise ValueError("emit_metrics: empty rows need an explicit header")
        header = list(rows[0].keys())
    for i, r in enumerate(rows):
        if list(r.keys()) != list(header):
            raise ValueError(f"emit_metrics: row {i} has columns {list(r.keys())}, expected {header}")
    return list(header)


def emit_metrics(rows: list[dict], path: str | Path, fmt: str = "csv", header: list[str] | None = None) -> None:
    """Write all rows at once (never appends). CSV uses RFC-4180 quoting and CRLF."""
    rows = list(rows)
    path = Path(path)
    if fmt == "csv":
        cols = _header(rows, header)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\r\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in cols])
        text = buf.getvalue()
    elif fmt == "jsonl":
        if rows:
            _header(rows, header)
        text = "".join(json.dumps({k: _jsonable(v) for k, v in r.items()}) + "\n" for r in rows)
    else:
        raise ValueError(f"unknown metrics format {fmt!r}")
    try:
        with open(path, "w", newline="") as f:
            f.write(text)
    except OSError as e:
        raise ValueError(f"cannot write metrics to {path}: {e}") from None


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    return v


def read_metrics(path: str | Path, fmt: str = "csv") -> tuple[list[str], list[dict]]:
    """Inverse of :func:`emit_metrics`; CSV values come back as strings."""
    with open(path, newline="") as f:
        if fmt == "csv":
            r = csv.reader(f)
            header = next(r)
            return header, [dict(zip(header, row)) for row in r]
        rows = [json.loads(line) for line in f if line.strip()]
        return (list(rows[0].keys()) if rows else []), rows
