"""Simulated ranks and collective communication.

A rank body is a generator function ``body(ctx)``. It computes locally and
suspends at every collective::

    def body(ctx):
        parts = yield ctx.all_gather(x, layer="l0", payload="state")
        ...
        return result

:meth:`RankGroup.run` drives all bodies cooperatively. A collective completes
once every rank has reached it; mismatched collectives and ranks that finish
while others wait are reported as :class:`CollectiveError`. Collectives are
built from tensor ops, so the autodiff tape sees through them: the backward
pass of an all-gather sums the incoming gradients back onto each rank's
contribution, which is exactly a reduce-scatter.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable, Generator

from .. import tensor as T
from ..errors import CollectiveError, ShapeError
from ..lsm.chunked import Transition, apply_transition
from ..tensor import Rng, Tensor

KINDS = ("all_gather", "reduce_scatter")


@dataclass(frozen=True)
class CommRecord:
    """One collective call. ``elements`` counts every rank's contribution (``T * size``);
    ``received`` is what a single rank receives from its peers."""

    seq: int
    layer: str
    kind: str
    payload: str
    ranks: int
    elements: int
    received: int
    bytes: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass(frozen=True)
class Request:
    kind: str
    value: Tensor
    layer: str
    payload: str
    seq: int
    axis: int = 0


@dataclass
class RankContext:
    rank: int
    size: int
    _seq: int = 0

    def _request(self, kind: str, value: Tensor, layer: str, payload: str, axis: int = 0) -> Request:
        req = Request(kind, value, layer, payload, self._seq, axis)
        self._seq += 1
        return req

    def all_gather(self, value: Tensor, layer: str = "", payload: str = "") -> Request:
        """Resolves to the list of every rank's ``value`` in rank order."""
        return self._request("all_gather", value, layer, payload)

    def reduce_scatter(self, value: Tensor, layer: str = "", payload: str = "", axis: int = 0) -> Request:
        """Resolves to this rank's shard (along ``axis``) of the elementwise sum over ranks."""
        return self._request("reduce_scatter", value, layer, payload, axis)


Body = Callable[[RankContext], Generator[Request, Any, Any]]


def _schedule(order: str | int, size: int, round_no: int) -> list[int]:
    if order == "round_robin":
        return list(range(size))
    if order == "reverse":
        return list(range(size))[::-1]
    if isinstance(order, int):
        return Rng(order).child("schedule", round_no).permutation(size).tolist()
    raise ValueError(f"unknown schedule {order!r}")


@dataclass
class RankGroup:
    """``size`` simulated ranks sharing a communication log."""

    size: int
    bytes_per_element: int = 8
    schedule: str | int = "round_robin"
    comm_log: list[CommRecord] = field(default_factory=list)

    def __post_init__(self):
        if self.size < 1:
            raise ValueError("RankGroup needs at least one rank")

    def run(self, body: Body) -> list[Any]:
        """Run ``body`` on every rank; returns the per-rank return values."""
        gens = [body(RankContext(r, self.size)) for r in range(self.size)]
        pending: dict[int, Request] = {}
        sends: dict[int, Any] = {r: None for r in range(self.size)}
        results: dict[int, Any] = {}
        round_no = 0
        while len(results) < self.size:
            for r in _schedule(self.schedule, self.size, round_no):
                if r in results or r in pending:
                    continue
                try:
                    req = gens[r].send(sends[r])
                except StopIteration as stop:
                    results[r] = stop.value
                    continue
                if not isinstance(req, Request):
                    raise CollectiveError(f"rank {r} yielded {type(req).__name__}, expected a collective request")
                pending[r] = req
            round_no += 1
            if results and pending:
                waiting = sorted(pending)
                req = pending[waiting[0]]
                gone = sorted(set(results))
                raise CollectiveError(
                    f"deadlock: rank(s) {gone} exited while rank(s) {waiting} wait at "
                    f"{req.kind} #{req.seq} (layer {req.layer!r})"
                )
            if len(pending) == self.size:
                outs = self._resolve([pending[r] for r in range(self.size)])
                pending.clear()
                sends = dict(enumerate(outs))
        return [results[r] for r in range(self.size)]

    def _resolve(self, reqs: list[Request]) -> list[Any]:
        first = reqs[0]
        for r, req in enumerate(reqs):
            if (req.kind, req.seq, req.layer, req.payload) != (first.kind, first.seq, first.layer, first.payload):
                raise CollectiveError(
                    f"mismatched collectives: rank 0 is at {first.kind} #{first.seq} ({first.layer}/{first.payload}), "
                    f"rank {r} at {req.kind} #{req.seq} ({req.layer}/{req.payload})"
                )
            if req.value.shape != first.value.shape:
                raise ShapeError(f"{first.kind}: rank {r} sent shape {req.value.shape}, rank 0 sent {first.value.shape}")
        values = [req.value for req in reqs]
        size = first.value.size
        n = self.size
        if first.kind == "all_gather":
            outs = [list(values) for _ in range(n)]
            received = (n - 1) * size
        else:
            outs = reduce_scatter_values(values, first.axis)
            received = (n - 1) * size // n
        self.comm_log.append(CommRecord(len(self.comm_log), first.layer, first.kind, first.payload, n,
                                        n * size, received, n * size * self.bytes_per_element))
        return outs

    # -- log helpers -----------------------------------------------------
    def records(self, kind: str | None = None, payload: str | None = None, layer: str | None = None) -> list[CommRecord]:
        return [r for r in self.comm_log
                if (kind is None or r.kind == kind) and (payload is None or r.payload == payload)
                and (layer is None or r.layer == layer)]

    def export_trace(self, path) -> Path:
        """One JSON record per collective: seq, layer, kind, payload, ranks, elements, received, bytes."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(r.to_json() + "\n" for r in self.comm_log))
        return path


def read_trace(path) -> list[CommRecord]:
    return [CommRecord(**json.loads(line)) for line in Path(path).read_text().splitlines() if line.strip()]


def reduce_scatter_values(values: list[Tensor], axis: int = 0) -> list[Tensor]:
    n = len(values)
    length = values[0].shape[axis]
    if length % n:
        raise ShapeError(f"reduce_scatter: length {length} along axis {axis} is not divisible by {n} ranks")
    total = values[0]
    for v in values[1:]:
        total = total + v
    step = length // n
    index = [slice(None)] * total.ndim
    shards = []
    for r in range(n):
        index[axis] = slice(r * step, (r + 1) * step)
        shards.append(total[tuple(index)])
    return shards


# ---------------------------------------------------------------------------
# rank-body helpers (use with ``yield from``)
# ---------------------------------------------------------------------------
def all_reduce(ctx: RankContext, value: Tensor, layer: str = "", payload: str = ""):
    """Reduce-scatter then all-gather over the flattened value."""
    flat = T.reshape(value, (value.size,))
    shard = yield ctx.reduce_scatter(flat, layer, payload)
    parts = yield ctx.all_gather(shard, layer, payload)
    return T.reshape(T.concat(parts, axis=0), value.shape)


def prefix_sum_states(ctx: RankContext, state: Tensor, transition=None, resets=None, layer: str = ""):
    """Exclusive prefix over ranks: ``sum_{i<t} (transitions between i and t) applied to state_i``.

    ``transition`` is this rank's :class:`~linear_moe.lsm.Transition`; ``None``
    or an identity transition gives the plain sum. ``resets[i]`` marks ranks
    whose span starts a new document, cutting everything before them. Rank 0
    receives ``None`` (the zero state).
    """
    states = yield ctx.all_gather(state, layer, "state")
    values = None
    if transition is not None and transition.kind != "identity":
        values = yield ctx.all_gather(transition.value, layer, "decay")
    return fold_prefix(states[:ctx.rank], transition, values, resets)


def fold_prefix(states, transition=None, values=None, resets=None):
    P = None
    for i, S in enumerate(states):
        if P is None or (resets is not None and resets[i]):
            P = S
        elif values is None:
            P = P + S
        else:
            P = apply_transition(Transition(transition.kind, values[i]), P) + S
    return P

