"""Forward-only scaling benchmark: chunked LSM mixer versus causal softmax attention.

Every sequence length is run with the same total number of tokens (batch =
budget // length), so time per token isolates how cost grows with length.
Memory is reported as the decode-time element count: a fixed ``d x d``
state per head for the LSM, a key/value cache for attention.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .config import BenchConfig, resolve_out
from .metrics import write_curve
from .mixer import MixerWeights
from .tensor import Rng, Tensor

COLUMNS = ("mixer", "length", "batch", "seconds", "time_per_token", "memory_elements")


@dataclass(frozen=True)
class BenchRow:
    mixer: str
    length: int
    batch: int
    seconds: float
    time_per_token: float
    memory_elements: int


def memory_elements(weights: MixerWeights, length: int) -> int:
    d, H = weights.head_dim, weights.num_heads
    if weights.kind == "N":
        return 2 * length * H * d
    return H * d * (d + (1 if weights.spec.use_normalizer else 0))


def time_forward(weights: MixerWeights, x: Tensor, chunk_size: int, repeats: int) -> float:
    """Median wall time of ``repeats`` forward passes (after one warm-up)."""
    weights(x, chunk_size)
    times = []
    for _ in range(repeats):
        start = time.perf_counter()
        weights(x, chunk_size)
        times.append(time.perf_counter() - start)
    return float(np.median(times))


def run_bench(cfg: BenchConfig) -> list[BenchRow]:
    mixers = {
        cfg.lsm: MixerWeights.random("L", cfg.hidden, cfg.num_heads, cfg.lsm, seed=cfg.seed),
        "attention": MixerWeights.random("N", cfg.hidden, cfg.num_heads, seed=cfg.seed),
    }
    rng = Rng(cfg.seed).child("bench")
    rows = []
    for n in cfg.lengths:
        batch = cfg.token_budget // n
        x = Tensor(rng.normal((batch, n, cfg.hidden)))
        for name, w in mixers.items():
            seconds = time_forward(w, x, cfg.chunk_size, cfg.repeats)
            rows.append(BenchRow(name, n, batch, seconds, seconds / (batch * n), memory_elements(w, n)))
    return rows


def growth(rows: list[BenchRow], mixer: str) -> float:
    """Time-per-token at the longest length divided by that at the shortest."""
    mine = sorted((r for r in rows if r.mixer == mixer), key=lambda r: r.length)
    return mine[-1].time_per_token / mine[0].time_per_token


def write_table(path, rows: list[BenchRow]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = ["\t".join(COLUMNS)]
    for r in rows:
        d = asdict(r)
        lines.append("\t".join(repr(d[c]) if isinstance(d[c], float) else str(d[c]) for c in COLUMNS))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_table(path) -> list[BenchRow]:
    lines = Path(path).read_text().splitlines()
    if tuple(lines[0].split("\t")) != COLUMNS:
        raise ValueError(f"{path}: unexpected header")
    out = []
    for line in lines[1:]:
        m, n, b, s, t, e = line.split("\t")
        out.append(BenchRow(m, int(n), int(b), float(s), float(t), int(e)))
    return out


def bench(cfg: BenchConfig, out_dir=None) -> tuple[list[BenchRow], dict[str, Path]]:
    rows = run_bench(cfg)
    out = Path(out_dir) if out_dir is not None else resolve_out(cfg.out_dir)
    files = {"table": write_table(out / "scaling.tsv", rows)}
    for mixer in (cfg.lsm, "attention"):
        mine = [r for r in rows if r.mixer == mixer]
        files[f"time_{mixer}"] = write_curve(out / f"time_per_token_{mixer}.txt", [r.length for r in mine],
                                             [r.time_per_token for r in mine], ("length", "seconds_per_token"))
        files[f"memory_{mixer}"] = write_curve(out / f"memory_{mixer}.txt", [r.length for r in mine],
                                               [r.memory_elements for r in mine], ("length", "elements"))
    return rows, files
