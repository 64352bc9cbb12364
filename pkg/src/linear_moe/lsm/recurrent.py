"""Token-by-token recurrence: the reference path for every instance.

Each update rule is written out directly from its defining formula, with no
shared machinery with the chunked kernels, so that chunked outputs can be
checked against it.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tensor as T
from ..errors import DegenerateNormalizerError, NonFiniteError, ShapeError
from ..tensor import Tensor
from .spec import LsmSpec

NORMALIZER_FLOOR = 1e-12


@dataclass(frozen=True)
class MemoryState:
    """Recurrent memory ``M`` (``..., d_k, d_v``), optional normalizer ``z`` and step index."""

    M: Tensor
    z: Tensor | None = None
    step: int = 0

    @classmethod
    def zeros(cls, d_k: int, d_v: int, lead: tuple[int, ...] = (), normalizer: bool = False,
              dtype=np.float64) -> "MemoryState":
        z = T.zeros(lead + (d_k,), dtype) if normalizer else None
        return cls(T.zeros(lead + (d_k, d_v), dtype), z, 0)


@dataclass(frozen=True)
class StepInputs:
    """Query/key/value for one token plus that token's raw gate inputs."""

    q: Tensor
    k: Tensor
    v: Tensor
    gates: dict[str, Tensor]


def feature_map(x: Tensor, kind: str) -> Tensor:
    if kind == "identity":
        return x
    if kind == "elu_plus_one":
        return T.elu(x) + 1.0
    if kind == "squared":
        return T.square(x)
    raise ValueError(f"unknown feature map '{kind}'")


def _lift(param: Tensor, lead: tuple[int, ...], bare: tuple[int, ...]) -> Tensor:
    """Give a static (possibly per-head) parameter the full leading batch shape."""
    target = lead + bare
    if param.shape == target:
        return param
    return T.broadcast_to(param, target)


def _scale(M: Tensor, a: Tensor) -> Tensor:
    """Multiply every entry of each state in the batch by a per-batch scalar."""
    if a.ndim == 0:
        return M * a
    return T.broadcast_to(T.reshape(a, a.shape + (1, 1)), M.shape) * M


def _vec_mat(x: Tensor, M: Tensor) -> Tensor:
    """Row vector times matrix, batched: ``(..., d_k) @ (..., d_k, d_v) -> (..., d_v)``."""
    lead = x.shape[:-1]
    return T.reshape(T.reshape(x, lead + (1, x.shape[-1])) @ M, lead + (M.shape[-1],))


def _check_dims(state: MemoryState, inp: StepInputs, spec: LsmSpec) -> tuple[int, ...]:
    lead = state.M.shape[:-2]
    if state.M.shape[-2:] != (spec.d_k, spec.d_v):
        raise ShapeError(f"recurrent_step: state shape {state.M.shape} does not match d_k={spec.d_k}, d_v={spec.d_v}")
    for name, vec, d in (("q", inp.q, spec.d_k), ("k", inp.k, spec.d_k), ("v", inp.v, spec.d_v)):
        if vec.shape != lead + (d,):
            raise ShapeError(f"recurrent_step: {name} has shape {vec.shape}, expected {lead + (d,)}")
    for key, shape in spec.gate_shapes().items():
        if key not in inp.gates:
            raise ShapeError(f"recurrent_step: {spec.name} needs gate input '{key}'")
        if inp.gates[key].shape != lead + shape:
            raise ShapeError(f"recurrent_step: gate '{key}' has shape {inp.gates[key].shape}, expected {lead + shape}")
    return lead


def recurrent_step(state: MemoryState, inp: StepInputs, spec: LsmSpec) -> tuple[MemoryState, Tensor]:
    """Advance the memory by one token and emit that token's output."""
    lead = _check_dims(state, inp, spec)
    try:
        M, z = _update(state, inp, spec, lead)
        fq = feature_map(inp.q, spec.feature_map)
        o = _vec_mat(fq, M)
        if spec.use_normalizer:
            den = T.sum_(fq * z, axis=-1)
            if np.any(np.abs(den.data) < NORMALIZER_FLOOR):
                raise DegenerateNormalizerError(f"{spec.name}: degenerate normalizer at step {state.step + 1}")
            o = _scale_vec(o, 1.0 / den)
    except NonFiniteError as exc:
        raise NonFiniteError(f"{spec.name}: non-finite state at step {state.step + 1} ({exc})", op=exc.op) from exc
    return MemoryState(M, z, state.step + 1), o


def _update(state: MemoryState, inp: StepInputs, spec: LsmSpec, lead) -> tuple[Tensor, Tensor | None]:
    fam = spec.family
    M, z = state.M, state.z
    g = inp.gates
    p = spec.decay_params
    fk = feature_map(inp.k, spec.feature_map)
    v = inp.v

    if fam in ("bla", "rebased"):
        M = M + T.outer(fk, v)
        z = None if z is None else z + fk
    elif fam == "scalar_decay":
        a = _lift(p["decay"], lead, ())
        M = _scale(M, a) + T.outer(fk, v)
        z = None if z is None else _scale_vec(z, a) + fk
    elif fam in ("gla", "rwkv6", "hgrn2"):
        if fam == "rwkv6":
            a = T.exp(-T.exp(g["w"]))
        else:
            a = T.sigmoid(g["g"])
        key = (1.0 - a) if fam == "hgrn2" else fk
        M = T.scale_rows(M, a) + T.outer(key, v)
        z = None if z is None else a * z + key
    elif fam == "outer_gate":
        A = T.outer(T.sigmoid(g["alpha"]), T.sigmoid(g["beta"]))
        M = A * M + T.outer(fk, v)
    elif fam in ("deltanet", "gated_deltanet"):
        kn = T.l2_normalize(fk)
        a, b = T.sigmoid(g["a"]), T.sigmoid(g["b"])
        projected = T.outer(kn, _vec_mat(kn, M))  # k^T k M
        if fam == "deltanet":
            M = M - _scale(projected, a)
        else:
            M = _scale(M - projected, a)
        M = M + _scale(T.outer(kn, v), b)
    elif fam in ("ttt", "titans", "rwkv7"):
        eta = T.sigmoid(g["b"])
        kn = T.l2_normalize(fk)
        # gradient of 0.5 * ||k M - v||^2 with respect to M
        grad = T.outer(kn, _vec_mat(kn, M) - v)
        if fam == "titans":
            M = _scale(M, T.sigmoid(g["a"]))
        elif fam == "rwkv7":
            M = T.scale_rows(M, T.exp(-T.exp(g["w"])))
        M = M - _scale(grad, eta)
    elif fam == "s4":
        delta = T.softplus(_lift(p["delta"], lead, (spec.d_k,)))
        A = T.exp(_lift(p["A_log"], lead, (spec.d_k, spec.d_v)))
        decay = T.exp(-T.scale_rows(A, delta))
        M = decay * M + T.outer(delta * _lift(p["B"], lead, (spec.d_k,)), v)
    elif fam == "mamba":
        delta = T.softplus(g["delta"])
        A = T.exp(_lift(p["A_log"], lead, (spec.d_k, spec.d_v)))
        decay = T.exp(-T.scale_rows(A, delta))
        M = decay * M + T.outer(delta * fk, v)
    elif fam == "mamba2":
        b = T.softplus(g["delta"])
        a = T.exp(_lift(p["A_log"], lead, ()))
        decay = T.exp(-(a * b))
        M = _scale(M, decay) + _scale(T.outer(fk, v), b)
        z = None if z is None else _scale_vec(z, decay) + _scale_vec(fk, b)
    else:  # pragma: no cover - guarded by LsmSpec validation
        raise ValueError(fam)
    return M, z


def _scale_vec(x: Tensor, a: Tensor) -> Tensor:
    if a.ndim == 0:
        return x * a
    return T.broadcast_to(T.reshape(a, a.shape + (1,)), x.shape) * x


def _token(x: Tensor, s: int, trailing: int) -> Tensor:
    return x[(Ellipsis, s) + (slice(None),) * trailing]


def lsm_forward_sequential(Q: Tensor, K: Tensor, V: Tensor, gates: dict[str, Tensor], spec: LsmSpec,
                           initial_state: MemoryState | None = None, return_state: bool = False):
    """Fold :func:`recurrent_step` over ``N`` tokens starting from the zero state.

    ``Q``/``K`` are ``(..., N, d_k)``, ``V`` is ``(..., N, d_v)``; returns
    ``O`` of shape ``(..., N, d_v)`` (and the final state if requested).
    """
    if Q.ndim < 2 or Q.shape[-2] < 1:
        raise ShapeError(f"lsm_forward_sequential: need at least one token, got Q shape {Q.shape}")
    lead, n = Q.shape[:-2], Q.shape[-2]
    state = initial_state or MemoryState.zeros(spec.d_k, spec.d_v, lead, spec.use_normalizer, Q.dtype)
    shapes = spec.gate_shapes()
    outs = []
    for s in range(n):
        step_gates = {key: _token(gates[key], s, len(shape)) for key, shape in shapes.items() if key in gates}
        inp = StepInputs(_token(Q, s, 1), _token(K, s, 1), _token(V, s, 1), step_gates)
        state, o = recurrent_step(state, inp, spec)
        outs.append(o)
    O = T.stack(outs, axis=-2)
    return (O, state) if return_state else O
