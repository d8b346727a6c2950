"""CSV / JSON writers with stable column order and exact float formatting."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1

HISTORY_COLUMNS = ["call", "y_raw", "y", "best", "tr_length", "retrains", "loss_lip", "loss_z", "loss_recon",
                   "loss_kl", "loss_surr", "loss_total", "pearson"]
LOSS_TRACE_COLUMNS = ["retrain", "calls", "epoch", "lip", "z", "recon", "kl", "surr", "total", "lipschitz"]
CORRELATION_COLUMNS = ["retrain", "calls", "when", "mu_dz", "var_dz", "mu_dy", "var_dy", "pearson", "n_pairs",
                       "p10", "q1", "median", "q3", "p90"]


def fmt(v) -> str:
    """Shortest round-tripping text for numbers; empty for missing values."""
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        v = float(v)
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_csv(path, rows: list[dict], columns: list[str]) -> None:
    """Header plus one line per row; keys missing from a row are written empty."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([fmt(r.get(c)) for c in columns])


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _clean(o):
    if isinstance(o, dict):
        return {str(k): _clean(v) for k, v in o.items()}
    if isinstance(o, (list, tuple)):
        return [_clean(v) for v in o]
    if isinstance(o, np.ndarray):
        return _clean(o.tolist())
    if isinstance(o, (np.bool_,)):
        return bool(o)
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, (float, np.floating)):
        o = float(o)
        return o if math.isfinite(o) else None
    return o


def write_json(path, obj) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=False) + "\n")


def read_json(path):
    return json.loads(Path(path).read_text())
