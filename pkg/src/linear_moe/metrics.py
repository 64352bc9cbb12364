"""Line-delimited JSON metrics and two-column curve files."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .errors import NonFiniteError


@dataclass(frozen=True)
class MetricsRecord:
    step: int
    loss: float
    aux_loss: float
    tokens_per_sec: float
    peak_state_elements: int
    comm_bytes: int

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, float) and not math.isfinite(value):
                raise NonFiniteError(f"metrics: {f.name} is {value} at step {self.step}")

    def to_json(self) -> str:
        return json.dumps(asdict(self))

    @classmethod
    def from_json(cls, line: str) -> "MetricsRecord":
        d = json.loads(line)
        return cls(int(d["step"]), float(d["loss"]), float(d["aux_loss"]), float(d["tokens_per_sec"]),
                   int(d["peak_state_elements"]), int(d["comm_bytes"]))


class MetricsWriter:
    """Appends records to a JSONL file; steps must increase."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.path.write_text("")
        self.records: list[MetricsRecord] = []

    def write(self, record: MetricsRecord) -> None:
        if self.records and record.step <= self.records[-1].step:
            raise ValueError(f"metrics step {record.step} does not follow {self.records[-1].step}")
        self.records.append(record)
        with open(self.path, "a") as fh:
            fh.write(record.to_json() + "\n")


def read_metrics(path) -> list[MetricsRecord]:
    return [MetricsRecord.from_json(line) for line in Path(path).read_text().splitlines() if line.strip()]


def write_curve(path, xs, ys, header: tuple[str, str] = ("x", "y")) -> Path:
    """Whitespace-separated ``x y`` rows under a ``#`` header line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    rows = [f"# {header[0]} {header[1]}"] + [f"{_fmt(x)} {_fmt(y)}" for x, y in zip(xs, ys)]
    path.write_text("\n".join(rows) + "\n")
    return path


def _fmt(v) -> str:
    return str(int(v)) if isinstance(v, (int, np.integer)) else repr(float(v))


def read_curve(path) -> tuple[list[float], list[float]]:
    xs, ys = [], []
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        x, y = line.split()
        xs.append(float(x))
        ys.append(float(y))
    return xs, ys
