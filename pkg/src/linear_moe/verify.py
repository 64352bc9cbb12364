"""Oracle verification suites behind ``linear-moe verify``.

Each suite compares a fast path with its reference implementation and
returns one :class:`Check` per comparison. A suite that raises is reported
as a failed check, never skipped.
"""

from __future__ import annotations

import json
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .attention import softmax_attention_parallel
from .lsm import INSTANCES, LsmSpec, lsm_forward_chunked, lsm_forward_sequential, random_gates, set_fault
from .lsm.chunked import KNOWN_FAULTS
from .mixer import MixerWeights
from .model import Model, ModelConfig, lm_loss, model_forward, pack_sequences
from .moe import MoeConfig, MoeLayer, moe_forward, moe_forward_dense
from .parallel import RankGroup, hybrid_sp_forward, sp_attention_allgather, sp_forward_masked, sp_forward_nomask, tp_shard_check
from .parallel.sp import nomask_reference
from .tensor import Rng, Tape, Tensor, finite_diff_grad, grad_of, relative_error

REPORT_FORMAT = "linear-moe-verify/1"


@dataclass(frozen=True)
class Check:
    suite: str
    name: str
    passed: bool
    error: float | None = None
    tolerance: float | None = None
    detail: str = ""


@dataclass
class SuiteResult:
    name: str
    checks: list[Check] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def passed(self) -> bool:
        return bool(self.checks) and all(c.passed for c in self.checks)


@dataclass
class VerifyReport:
    suites: list[SuiteResult]
    fault: str | None = None

    @property
    def passed(self) -> bool:
        return all(s.passed for s in self.suites)

    def failures(self) -> list[Check]:
        return [c for s in self.suites for c in s.checks if not c.passed]

    def to_dict(self) -> dict:
        return {
            "format": REPORT_FORMAT,
            "passed": self.passed,
            "fault": self.fault,
            "suites": [{"name": s.name, "passed": s.passed, "seconds": round(s.seconds, 3),
                        "checks": [asdict(c) for c in s.checks]} for s in self.suites],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


class _Recorder:
    def __init__(self, suite: str):
        self.suite = suite
        self.checks: list[Check] = []

    def close(self, name: str, error: float, tolerance: float) -> None:
        self.checks.append(Check(self.suite, name, bool(error < tolerance), float(error), tolerance))

    def exact(self, name: str, ok: bool, detail: str = "") -> None:
        self.checks.append(Check(self.suite, name, bool(ok), detail=detail))


def _max_abs(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def _lsm_inputs(name: str, n: int, d: int, seed: int = 0):
    rng = Rng(seed).child("verify", name)
    spec = LsmSpec.create(name, d, rng=rng)
    Q, K, V = (Tensor(rng.normal((n, d))) for _ in range(3))
    return Q, K, V, random_gates(spec, n, rng), spec


# ---------------------------------------------------------------------------
# suites
# ---------------------------------------------------------------------------
def suite_chunked(rec: _Recorder) -> None:
    for name in INSTANCES:
        for n, d in ((7, 4), (32, 8)):
            Q, K, V, gates, spec = _lsm_inputs(name, n, d)
            ref = lsm_forward_sequential(Q, K, V, gates, spec).data
            for c in sorted({1, 3, 8, n}):
                out = lsm_forward_chunked(Q, K, V, gates, spec, c).data
                rec.close(f"{name} N={n} d={d} C={c}", _max_abs(out, ref), 1e-10)


def suite_sp(rec: _Recorder) -> None:
    X = Tensor(Rng(1).normal((32, 8)))
    for name in INSTANCES:
        w = MixerWeights.random("L", 8, 2, name, seed=2)
        ref = w(T.reshape(X, (1, 32, 8)), 8).data[0]
        for t in (1, 2, 4, 8):
            out = np.concatenate([o.data for o in sp_forward_masked(RankGroup(t), X, w, 4)])
            rec.close(f"masked {name} T={t}", _max_abs(out, ref), 1e-10)
    w = MixerWeights.random("L", 8, 2, "bla", seed=2)
    ref = nomask_reference(X, w).data
    for t in (1, 2, 4, 8):
        out = np.concatenate([o.data for o in sp_forward_nomask(RankGroup(t), X, w)])
        rec.close(f"nomask bla T={t}", _max_abs(out, ref), 1e-10)
    wa = MixerWeights.random("N", 8, 2, seed=3)
    ref = wa(T.reshape(X, (1, 32, 8))).data[0]
    for t in (2, 4):
        out = np.concatenate([o.data for o in sp_attention_allgather(RankGroup(t), X, wa)])
        rec.close(f"attention T={t}", _max_abs(out, ref), 1e-10)
    cfg = ModelConfig(hidden=8, ffn_dim=6, num_heads=2, num_layers=4, num_experts=4, num_active=2,
                      vocab_size=16, lsm="gla", pattern="LNLN", chunk_size=3)
    model = Model.init(cfg, seed=4)
    packed = pack_sequences([[1, 2, 3, 4, 5], [6, 7, 8], [9, 10, 11, 12, 13, 14, 15, 1, 2, 3, 4, 5], [2, 4, 6, 8]])
    ref = model_forward(model, packed).data
    for t in (2, 4):
        out = np.concatenate([lg.data for lg, _ in hybrid_sp_forward(RankGroup(t), model, packed)])
        rec.close(f"hybrid LNLN T={t}", _max_abs(out, ref), 1e-9)


def suite_tp(rec: _Recorder) -> None:
    X = Tensor(Rng(5).normal((12, 8)))
    for name in ("bla", "retnet", "gla", "deltanet", "mamba2", "rwkv6"):
        w = MixerWeights.random("L", 8, 4, name, seed=6)
        for t in (1, 2, 4):
            report = tp_shard_check(w, X, t, 4)
            if t == 1:
                rec.exact(f"{name} T=1 exact", report.max_abs_deviation == 0.0, f"{report.max_abs_deviation:.3g}")
            else:
                rec.close(f"{name} T={t}", report.max_abs_deviation, 1e-10)
    for t in (2, 4):
        rec.close(f"attention T={t}", tp_shard_check(MixerWeights.random("N", 8, 4, seed=6), X, t).max_abs_deviation, 1e-10)


def suite_moe(rec: _Recorder) -> None:
    X = Tensor(Rng(7).normal((64, 8)))
    for E in (1, 4, 8):
        for k in sorted({1, 2, E} & set(range(1, E + 1))):
            layer = MoeLayer.init(MoeConfig(E, k, 8, 6), Rng(E * 10 + k))
            sparse, _ = moe_forward(X, layer)
            rec.close(f"dense E={E} k={k}", _max_abs(sparse.data, moe_forward_dense(X, layer).data), 1e-10)


def suite_grad(rec: _Recorder) -> None:
    n, d = 5, 3
    for name in INSTANCES:
        Q, K, V, gates, spec = _lsm_inputs(name, n, d, seed=8)
        keys = sorted(gates)
        w = Tensor(Rng(9).normal((n, d)))

        def loss(q, k, v, *g, spec=spec, keys=keys, w=w):
            return (lsm_forward_chunked(q, k, v, dict(zip(keys, g)), spec, 2) * w).sum()

        inputs = [Q, K, V] + [gates[k] for k in keys]
        analytic = grad_of(loss, *inputs)
        worst = 0.0
        for i, x in enumerate(inputs):
            def f(xi, i=i, inputs=inputs, loss=loss):
                args = list(inputs)
                args[i] = xi
                return loss(*args)
            worst = max(worst, relative_error(analytic[i], finite_diff_grad(f, x, 1e-6).data))
        rec.close(f"lsm {name}", worst, 1e-4)

    layer = MoeLayer.init(MoeConfig(4, 2, 4, 3), Rng(10))
    Xm = Tensor(Rng(11).normal((6, 4)))
    fm = lambda x: (moe_forward(x, layer)[0] ** 2).sum()  # noqa: E731
    rec.close("moe", relative_error(grad_of(fm, Xm)[0], finite_diff_grad(fm, Xm, 1e-6).data), 1e-4)

    q, k, v = (Tensor(Rng(12 + i).normal((5, 4))) for i in range(3))
    fa = lambda x: (softmax_attention_parallel(x, k, v) ** 2).sum()  # noqa: E731
    rec.close("attention", relative_error(grad_of(fa, q)[0], finite_diff_grad(fa, q, 1e-6).data), 1e-4)

    model = Model.init(ModelConfig(hidden=8, ffn_dim=6, num_heads=2, num_layers=2, num_experts=4, num_active=2,
                                   vocab_size=16, lsm="gla", pattern="LN", chunk_size=3), seed=13)
    packed = pack_sequences([[1, 2, 3, 4, 5, 6], [7, 8, 9, 10]])

    def model_loss(params):
        logits, aux = model.with_params(params).forward(packed)
        return lm_loss(logits, packed.labels, aux, 0.01)

    leaves = {n_: Tensor(p.data, requires_grad=True) for n_, p in model.params.items()}
    with Tape() as tape:
        out = model_loss(leaves)
    tape.backward(out)
    rng, eps, worst = Rng(14), 1e-6, 0.0
    for name_, p in model.params.items():
        u = rng.normal(p.shape)
        plus = model_loss(dict(model.params, **{name_: Tensor(p.data + eps * u)})).item()
        minus = model_loss(dict(model.params, **{name_: Tensor(p.data - eps * u)})).item()
        numeric = (plus - minus) / (2 * eps)
        analytic = float(np.sum(leaves[name_].grad * u))
        worst = max(worst, abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-8))
    rec.close("model LN end-to-end", worst, 1e-3)


def suite_packing(rec: _Recorder) -> None:
    docs = [[1, 2, 3, 4, 5], [6, 7, 8], [9, 10, 11, 12, 13], [3, 3]]
    for pattern, lsm in (("LN", "bla"), ("LL", "mamba2"), ("NL", "deltanet")):
        cfg = ModelConfig(hidden=8, ffn_dim=6, num_heads=2, num_layers=2, num_experts=4, num_active=2,
                          vocab_size=16, lsm=lsm, pattern=pattern, chunk_size=3, token_shift=True)
        model = Model.init(cfg, seed=15)
        packed = pack_sequences(docs)
        logits = model_forward(model, packed).data
        single = np.concatenate([model_forward(model, pack_sequences([d])).data for d in docs])
        rec.close(f"{pattern}/{lsm} packed vs per-document", _max_abs(logits, single), 1e-10)
        perturbed = [list(d) for d in docs]
        perturbed[0] = [15 - t for t in perturbed[0]]
        other = model_forward(model, pack_sequences(perturbed)).data
        start = len(docs[0])
        diff = float(np.max(np.abs(other[start:] - logits[start:])))
        rec.exact(f"{pattern}/{lsm} cross-document sensitivity", diff == 0.0, f"max change {diff:.3g}")


SUITES: dict[str, Callable[[_Recorder], None]] = {
    "chunked": suite_chunked,
    "sp": suite_sp,
    "tp": suite_tp,
    "moe": suite_moe,
    "grad": suite_grad,
    "packing": suite_packing,
}


@contextmanager
def injected_fault(name: str | None):
    if name is None:
        yield
        return
    if name not in KNOWN_FAULTS:
        raise ValueError(f"unknown fault {name!r}; known: {', '.join(KNOWN_FAULTS)}")
    set_fault(name, True)
    try:
        yield
    finally:
        set_fault(name, False)


def run_suite(name: str) -> SuiteResult:
    rec = _Recorder(name)
    start = time.perf_counter()
    try:
        SUITES[name](rec)
    except Exception as err:  # a crashing suite is a failure, not a skip
        rec.exact("suite completed", False, f"{type(err).__name__}: {err}")
    return SuiteResult(name, rec.checks, time.perf_counter() - start)


def run_verify(only: list[str] | None = None, fault: str | None = None) -> VerifyReport:
    names = list(SUITES) if not only else only
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise ValueError(f"unknown suite(s) {unknown}; choose from {list(SUITES)}")
    with injected_fault(fault):
        return VerifyReport([run_suite(n) for n in names], fault)
