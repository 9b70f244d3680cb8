"""Time series container and the CSV/JSON artifact formats."""

from __future__ import annotations

import csv
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

OPTIONAL_COLUMNS = ("x_ff", "x_fn", "x_nn", "stderr", "xdot")


@dataclass
class Trajectory:
    """Samples of the forwarding fraction, one per slot (or integrator step)."""

    t: np.ndarray
    x_f: np.ndarray
    x_ff: np.ndarray | None = None
    x_fn: np.ndarray | None = None
    x_nn: np.ndarray | None = None
    stderr: np.ndarray | None = None
    xdot: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.t = np.asarray(self.t)
        self.x_f = np.asarray(self.x_f, dtype=float)
        if self.t.shape != self.x_f.shape:
            raise ValueError("t and x_f must have the same length")
        if self.t.size > 1 and np.any(np.diff(self.t) <= 0):
            raise ValueError("time index must be strictly increasing")
        for name in OPTIONAL_COLUMNS:
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=float)
                if v.shape != self.x_f.shape:
                    raise ValueError(f"{name} length does not match x_f")
                setattr(self, name, v)

    def __len__(self):
        return self.x_f.size

    @property
    def final(self) -> float:
        return float(self.x_f[-1])

    def columns(self) -> list[str]:
        return ["slot", "x_f"] + [c for c in OPTIONAL_COLUMNS if getattr(self, c) is not None]

    def to_csv(self, path) -> None:
        cols = self.columns()
        data = [self.t, self.x_f] + [getattr(self, c) for c in cols[2:]]
        integral_t = np.issubdtype(self.t.dtype, np.integer)

        def write(fh):
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(cols)
            for row in zip(*data):
                t0 = int(row[0]) if integral_t else repr(float(row[0]))
                w.writerow([t0] + [repr(float(v)) for v in row[1:]])

        atomic_write(path, write)

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], rows[1:]
        if header[:2] != ["slot", "x_f"]:
            raise ValueError(f"unexpected trajectory header {header}")
        cols = {h: [r[i] for r in body] for i, h in enumerate(header)}
        t_raw = cols.pop("slot")
        try:
            t = np.array([int(v) for v in t_raw])
        except ValueError:
            t = np.array([float(v) for v in t_raw])
        kw = {k: np.array(v, dtype=float) for k, v in cols.items()}
        return cls(t=t, **kw)


def atomic_write(path, writer) -> None:
    """Write via a temp file in the target directory, then rename into place.

    ``writer`` is either a string or a callable taking the open text handle.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            if callable(writer):
                writer(fh)
            else:
                fh.write(writer)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        v = float(obj)
        return v if np.isfinite(v) else None
    if isinstance(obj, float) and not np.isfinite(obj):
        return None
    return obj


def write_json(path, payload) -> None:
    atomic_write(path, json.dumps(_jsonable(payload), indent=2, sort_keys=True) + "\n")


def read_json(path):
    with open(path) as fh:
        return json.load(fh)
