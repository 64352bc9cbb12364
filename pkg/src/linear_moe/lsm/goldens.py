"""Golden output fixtures for the sequential recurrence.

One JSON file per ``(instance, seed)`` under ``linear_moe/goldens/``::

    {
      "format": "linear-moe-golden/1",
      "instance": "gla",
      "seed": 0,
      "n": 32, "d_k": 8, "d_v": 8,
      "output": [[...d_v floats...], ...N rows...]
    }

Inputs are regenerated from the seed by :func:`golden_inputs`, so a file only
stores the output. Floats are written with ``repr`` precision and round-trip
exactly. Regenerate with ``python -m linear_moe.lsm.goldens``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from ..tensor import Rng, Tensor
from .recurrent import lsm_forward_sequential
from .spec import INSTANCES, LsmSpec, random_gates

FORMAT = "linear-moe-golden/1"
GOLDEN_DIR = Path(__file__).resolve().parent.parent / "goldens"
GOLDEN_SEEDS = (0, 1)
GOLDEN_N = 32
GOLDEN_D = 8


def golden_inputs(name: str, seed: int, n: int = GOLDEN_N, d: int = GOLDEN_D):
    rng = Rng(seed).child("golden", name)
    spec = LsmSpec.create(name, d, rng=rng)
    Q, K, V = (Tensor(rng.normal((n, d))) for _ in range(3))
    gates = random_gates(spec, n, rng)
    return Q, K, V, gates, spec


def golden_output(name: str, seed: int) -> np.ndarray:
    Q, K, V, gates, spec = golden_inputs(name, seed)
    return lsm_forward_sequential(Q, K, V, gates, spec).numpy()


def golden_path(name: str, seed: int, root: Path = GOLDEN_DIR) -> Path:
    return root / f"{name}_seed{seed}.json"


def write_golden(name: str, seed: int, root: Path = GOLDEN_DIR) -> Path:
    out = golden_output(name, seed)
    record = {"format": FORMAT, "instance": name, "seed": seed, "n": out.shape[0],
              "d_k": GOLDEN_D, "d_v": out.shape[1], "output": out.tolist()}
    path = golden_path(name, seed, root)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(record) + "\n")
    return path


def read_golden(name: str, seed: int, root: Path = GOLDEN_DIR) -> np.ndarray:
    record = json.loads(golden_path(name, seed, root).read_text())
    if record.get("format") != FORMAT:
        raise ValueError(f"unsupported golden format {record.get('format')!r}")
    return np.asarray(record["output"], dtype=np.float64)


def main() -> None:
    for name in INSTANCES:
        for seed in GOLDEN_SEEDS:
            print(write_golden(name, seed))


if __name__ == "__main__":
    main()
