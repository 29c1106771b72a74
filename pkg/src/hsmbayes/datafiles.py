"""Dataset CSV files (header ``group_id,x,y``) and small JSON helpers."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .core import DataSet, GroupedData

DATASET_HEADER = ("group_id", "x", "y")


def fmt(v: float) -> str:
    """17 significant digits: enough to round-trip any double."""
    return format(float(v), ".17g")


def write_dataset_csv(path: str | Path, data: GroupedData | DataSet) -> None:
    grouped = data if isinstance(data, GroupedData) else GroupedData.single(data)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DATASET_HEADER)
        for g in grouped:
            for a, b in zip(g.x, g.y):
                w.writerow([g.id, fmt(a), fmt(b)])


def read_dataset_csv(path: str | Path) -> GroupedData:
    """Groups appear in order of first occurrence; point order is preserved."""
    cols: dict[str, tuple[list[float], list[float]]] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        r = csv.reader(fh)
        header = tuple(next(r, ()))
        if header != DATASET_HEADER:
            raise ValueError(f"{path}: expected header {','.join(DATASET_HEADER)}, got {','.join(header)}")
        for lineno, row in enumerate(r, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 columns")
            gx, gy = cols.setdefault(row[0], ([], []))
            gx.append(float(row[1]))
            gy.append(float(row[2]))
    if not cols:
        raise ValueError(f"{path}: no data rows")
    return GroupedData(tuple(DataSet(k, np.array(v[0]), np.array(v[1])) for k, v in cols.items()))


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=1, sort_keys=True) + "\n", encoding="utf-8")


def write_text(path: str | Path, text: str) -> None:
    Path(path).write_text(text, encoding="utf-8")


def write_samples_csv(path: str | Path, names, samples: np.ndarray, log_weights: np.ndarray | None = None) -> None:
    samples = np.asarray(samples, dtype=float).reshape(len(samples), -1)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(list(names) + (["log_weight"] if log_weights is not None else []))
        for k, row in enumerate(samples):
            vals = [fmt(v) for v in row]
            if log_weights is not None:
                vals.append(fmt(log_weights[k]))
            w.writerow(vals)
