"""Accuracy, confusion matrices and the per-epoch metrics file."""

from __future__ import annotations

import csv
import math
from dataclasses import astuple, dataclass, fields

import numpy as np

from .tensor import ShapeError


def predictions(lp) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. ties go to the smallest class
    return np.argmax(np.asarray(lp), axis=-1)


def accuracy(lp, labels) -> float:
    pred = predictions(lp)
    labels = np.asarray(labels)
    if pred.shape != labels.shape:
        raise ShapeError(f"{pred.shape[0]} predictions vs {labels.shape} labels")
    if labels.size == 0:
        return 0.0
    return float(np.mean(pred == labels))


def confusion_matrix(lp, labels, n_classes: int | None = None) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    lp = np.asarray(lp)
    labels = np.asarray(labels)
    pred = predictions(lp)
    if pred.shape != labels.shape:
        raise ShapeError(f"{pred.shape[0]} predictions vs {labels.shape} labels")
    C = n_classes or lp.shape[-1]
    cm = np.zeros((C, C), dtype=np.int64)
    np.add.at(cm, (labels, pred), 1)
    return cm


@dataclass
class MetricsRow:
    epoch: int
    variant: str
    g: int
    n_dwt: int
    loss_s: float
    loss_t: float
    loss_total: float
    source_acc: float
    target_acc: float

    def __post_init__(self):
        for name in ("source_acc", "target_acc"):
            v = getattr(self, name)
            if not (math.isnan(v) or 0.0 <= v <= 1.0):
                raise ValueError(f"{name}={v} outside [0, 1]")


FIELDS = [f.name for f in fields(MetricsRow)]
_TYPES = {f.name: f.type for f in fields(MetricsRow)}


def _fmt(v):
    # repr round-trips floats exactly
    return repr(float(v)) if isinstance(v, float) else str(v)


class MetricsWriter:
    """Appends rows to a CSV file, flushing after each one."""

    def __init__(self, path, append: bool = False):
        self.path = path
        exists = append and _has_content(path)
        self._fh = open(path, "a" if append else "w", newline="")
        self._writer = csv.writer(self._fh)
        if not exists:
            self._writer.writerow(FIELDS)
            self._fh.flush()

    def write(self, row: MetricsRow):
        self._writer.writerow([_fmt(v) for v in astuple(row)])
        self._fh.flush()

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _has_content(path) -> bool:
    try:
        with open(path) as fh:
            return bool(fh.read(1))
    except FileNotFoundError:
        return False


def read_metrics(path) -> list[MetricsRow]:
    conv = {"int": int, "str": str, "float": float}
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != FIELDS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        for rec in reader:
            rows.append(MetricsRow(**{k: conv[_TYPES[k]](rec[k]) for k in FIELDS}))
    return rows
