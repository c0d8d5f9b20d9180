"""Evaluation and structured result output."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass

import numpy as np

from .accounting import comm_bytes, comm_ratio  # noqa: F401  re-exported

COLUMNS = ("round", "level", "params", "acc_top1", "bytes_up", "bytes_down", "cum_macs", "seconds")
_FLOATS = ("acc_top1", "seconds")


@dataclass
class RoundRecord:
    """One row per (round, capability level). Level 0 is the aggregated global model."""

    round: int
    level: int
    params: int
    acc_top1: float
    bytes_up: int
    bytes_down: int
    cum_macs: int
    seconds: float
    # in-memory only, not emitted
    ratio: float = 1.0
    transfers: int = 0

    def row(self) -> dict:
        return {c: getattr(self, c) for c in COLUMNS}


def evaluate_top1(model, dataset, batch_size: int = 256) -> float:
    """Fraction of samples whose argmax logit (lowest index on ties) equals the label."""
    from .network import predict

    if model.spec.classes != dataset.classes:
        raise ValueError(f"model predicts {model.spec.classes} classes, dataset has {dataset.classes}")
    feats = dataset.features.astype(model.dtype, copy=False)
    logits = predict(model, feats, batch_size)
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))


def _fmt(col, value):
    if col in _FLOATS:
        return "nan" if math.isnan(value) else f"{value:.6f}"
    return str(int(value))


def emit(records, path, fmt: str = "csv") -> None:
    if fmt == "csv":
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(COLUMNS)
            for r in records:
                w.writerow([_fmt(c, v) for c, v in r.row().items()])
    elif fmt in ("jsonl", "json-lines"):
        with open(path, "w") as f:
            for r in records:
                row = {c: (float(_fmt(c, v)) if c in _FLOATS else int(v)) for c, v in r.row().items()}
                f.write(json.dumps(row) + "\n")
    else:
        raise ValueError(f"unknown metrics format {fmt!r}")


def read_records(path, fmt: str = "csv") -> list[RoundRecord]:
    rows = []
    with open(path, newline="") as f:
        if fmt == "csv":
            rows = list(csv.DictReader(f))
        else:
            rows = [json.loads(line) for line in f if line.strip()]
    out = []
    for row in rows:
        kw = {c: (float(row[c]) if c in _FLOATS else int(row[c])) for c in COLUMNS}
        out.append(RoundRecord(**kw))
    return out
