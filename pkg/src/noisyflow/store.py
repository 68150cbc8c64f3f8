"""Line-delimited feature store: ``sample_id,label,v1 v2 ... v_d[,extra]``.

An empty label field means "unknown". Comment lines start with ``#`` and
carry provenance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .flows import FlowFileError, _data_lines, _write_lines


@dataclass
class FeatureTable:
    ids: list[str]
    X: np.ndarray
    labels: np.ndarray          # -1 = unknown
    extra: list[str] | None = None

    def __len__(self) -> int:
        return len(self.ids)


def save_features(path: str | Path, ids: Sequence[str], X: np.ndarray, labels: Sequence[int] | None = None,
                  extra: Sequence[str] | None = None, header: Sequence[str] = ()) -> None:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(ids) != X.shape[0]:
        raise ValueError("ids and feature matrix disagree")

    def line(i):
        lab = "" if labels is None or labels[i] < 0 else str(int(labels[i]))
        row = f"{ids[i]},{lab}," + " ".join(repr(float(v)) for v in X[i])
        return row if extra is None else f"{row},{extra[i]}"

    _write_lines(path, (line(i) for i in range(len(ids))), header)


def load_features(path: str | Path, with_extra: bool = False) -> FeatureTable:
    ids, rows, labels, extra = [], [], [], []
    width = 4 if with_extra else 3
    dim = None
    for line_no, line in _data_lines(path):
        fields = line.split(",")
        if len(fields) != width:
            raise FlowFileError(line_no, f"expected {width} comma-separated fields, got {len(fields)}")
        sid, lab, vec = fields[:3]
        try:
            values = [float(v) for v in vec.split()]
        except ValueError:
            raise FlowFileError(line_no, "feature values must be numbers") from None
        if not values or not all(math.isfinite(v) for v in values):
            raise FlowFileError(line_no, "feature vector empty or non-finite")
        if dim is None:
            dim = len(values)
        elif len(values) != dim:
            raise FlowFileError(line_no, f"feature dimension {len(values)} != {dim}")
        if lab == "":
            labels.append(-1)
        elif lab in ("0", "1"):
            labels.append(int(lab))
        else:
            raise FlowFileError(line_no, f"label must be 0, 1 or empty, got {lab!r}")
        ids.append(sid)
        rows.append(values)
        if with_extra:
            extra.append(fields[3])
    X = np.array(rows, dtype=np.float64).reshape(len(rows), dim or 0)
    return FeatureTable(ids, X, np.array(labels, dtype=np.int64), extra if with_extra else None)
