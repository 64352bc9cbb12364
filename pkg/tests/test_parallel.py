import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from linear_moe import tensor as T
from linear_moe.errors import CollectiveError, ConfigError, ShapeError
from linear_moe.lsm import INSTANCES
from linear_moe.lsm.chunked import Transition
from linear_moe.mixer import MixerWeights
from linear_moe.model import Model, ModelConfig, cross_entropy, model_forward, pack_sequences
from linear_moe.parallel import (
    ParallelConfig,
    RankGroup,
    all_reduce,
    data_sequence_grads,
    distribute,
    hybrid_sp_forward,
    prefix_sum_states,
    read_trace,
    sp_attention_allgather,
    sp_forward_masked,
    sp_forward_nomask,
    split_sequence,
    tp_shard_check,
)
from linear_moe.parallel.sp import nomask_reference
from linear_moe.tensor import Rng, Tensor, grad_of, relative_error


def seq(n, h=8, seed=0):
    return Tensor(Rng(seed).normal((n, h)))


def full_mixer(w, X, chunk_size=4):
    return w(T.reshape(X, (1,) + X.shape), chunk_size).data[0]


def gathered(outs):
    return np.concatenate([o.data for o in outs])


def toy(pattern, lsm="bla", **kw):
    base = dict(hidden=8, ffn_dim=6, num_heads=2, num_layers=len(pattern), num_experts=4, num_active=2,
                vocab_size=16, lsm=lsm, pattern=pattern, chunk_size=3)
    base.update(kw)
    return ModelConfig(**base)


DOCS = [[1, 2, 3, 4, 5], [6, 7, 8], [9, 10, 11, 12, 13, 1, 2], [3, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 1, 2, 3]]


# ---------------------------------------------------------------- collectives
def test_all_gather_example():
    def body(ctx):
        parts = yield ctx.all_gather(Tensor([float(ctx.rank + 1)]))
        return [p.data.tolist() for p in parts]

    assert RankGroup(2).run(body) == [[[1.0], [2.0]], [[1.0], [2.0]]]


def test_reduce_scatter_example():
    vals = [[1.0, 2.0], [3.0, 4.0]]

    def body(ctx):
        shard = yield ctx.reduce_scatter(Tensor(vals[ctx.rank]))
        return shard.data.tolist()

    assert RankGroup(2).run(body) == [[4.0], [6.0]]


def test_reduce_scatter_indivisible():
    def body(ctx):
        yield ctx.reduce_scatter(Tensor([1.0, 2.0, 3.0]))

    with pytest.raises(ShapeError):
        RankGroup(2).run(body)


def test_all_reduce_sums_everywhere():
    def body(ctx):
        out = yield from all_reduce(ctx, Tensor(np.full((2, 2), ctx.rank + 1.0)))
        return out.data

    for out in RankGroup(4).run(body):
        np.testing.assert_array_equal(out, np.full((2, 2), 10.0))


def test_prefix_sum_example():
    states = [1.0, 10.0, 100.0]

    def body(ctx):
        P = yield from prefix_sum_states(ctx, Tensor([states[ctx.rank]]))
        return None if P is None else P.data.tolist()

    assert RankGroup(3).run(body) == [None, [1.0], [11.0]]


def test_prefix_sum_unit_decay_equals_plain():
    states = [np.full((1, 2, 2), float(v)) for v in (1, 2, 3, 4)]

    def run(decayed):
        def body(ctx):
            tr = Transition("scalar", Tensor(np.zeros(1))) if decayed else None  # log-decay 0
            P = yield from prefix_sum_states(ctx, Tensor(states[ctx.rank]), tr)
            return None if P is None else P.data

        return RankGroup(4).run(body)

    plain, decayed = run(False), run(True)
    assert plain[0] is None and decayed[0] is None
    for a, b in zip(plain[1:], decayed[1:]):
        np.testing.assert_array_equal(a, b)


def test_prefix_sum_resets_cut_the_fold():
    def body(ctx):
        P = yield from prefix_sum_states(ctx, Tensor([float(ctx.rank + 1)]), resets=[False, False, True, False])
        return None if P is None else P.item()

    assert RankGroup(4).run(body) == [None, 1.0, 3.0, 3.0]


def test_mismatched_collectives_detected():
    def body(ctx):
        if ctx.rank == 0:
            yield ctx.all_gather(Tensor([1.0]))
        else:
            yield ctx.reduce_scatter(Tensor([1.0, 2.0]))

    with pytest.raises(CollectiveError, match="mismatched"):
        RankGroup(2).run(body)


def test_deadlock_detected():
    def body(ctx):
        if ctx.rank == 1:
            yield ctx.all_gather(Tensor([1.0]))
        return ctx.rank
        yield  # pragma: no cover

    with pytest.raises(CollectiveError, match="deadlock"):
        RankGroup(2).run(body)


def test_shape_mismatch_detected():
    def body(ctx):
        yield ctx.all_gather(Tensor(np.zeros(ctx.rank + 1)))

    with pytest.raises(ShapeError):
        RankGroup(2).run(body)


@pytest.mark.parametrize("schedule", ["reverse", 0, 7, 123])
def test_schedule_does_not_change_results_or_log(schedule):
    X = seq(24)
    w = MixerWeights.random("L", 8, 2, "gla", seed=3)
    ref_group = RankGroup(4)
    ref = gathered(sp_forward_masked(ref_group, X, w, 4))
    group = RankGroup(4, schedule=schedule)
    out = gathered(sp_forward_masked(group, X, w, 4))
    np.testing.assert_array_equal(out, ref)
    assert group.comm_log == ref_group.comm_log


def test_trace_round_trip(tmp_path):
    group = RankGroup(2)
    sp_forward_masked(group, seq(8), MixerWeights.random("L", 8, 2, "retnet"), 4)
    path = group.export_trace(tmp_path / "trace.jsonl")
    assert read_trace(path) == group.comm_log
    assert {r.payload for r in group.comm_log} == {"state", "decay"}


def test_split_sequence():
    assert split_sequence(10, 4) == [(0, 3), (3, 6), (6, 8), (8, 10)]
    with pytest.raises(ShapeError):
        split_sequence(3, 4)


# ---------------------------------------------------------------- sequence parallel LSM
@pytest.mark.parametrize("name", INSTANCES)
def test_masked_sp_matches_single_rank(name):
    X = seq(29)
    w = MixerWeights.random("L", 8, 2, name, seed=1)
    ref = full_mixer(w, X, 4)
    for t in (1, 2, 4, 8):
        out = gathered(sp_forward_masked(RankGroup(t), X, w, 3))
        assert np.max(np.abs(out - ref)) < 1e-9, (name, t)


def test_masked_sp_bla_n64():
    X = seq(64, seed=5)
    w = MixerWeights.random("L", 8, 1, "bla", seed=2, use_normalizer=False)
    ref = full_mixer(w, X, 64)
    for t in (1, 2, 4, 8):
        assert relative_error(gathered(sp_forward_masked(RankGroup(t), X, w, 8)), ref) < 1e-10


def test_nomask_invariant_over_ranks():
    X = seq(32)
    w = MixerWeights.random("L", 8, 2, "bla", seed=1)
    ref = nomask_reference(X, w).data
    for t in (1, 2, 4, 8):
        assert relative_error(gathered(sp_forward_nomask(RankGroup(t), X, w)), ref) < 1e-10


def test_nomask_rejects_decayed_transitions():
    with pytest.raises(ValueError):
        sp_forward_nomask(RankGroup(2), seq(8), MixerWeights.random("L", 8, 2, "gla"))


@settings(max_examples=15, deadline=None)
@given(n=st.integers(8, 40), t=st.sampled_from([1, 2, 3, 4, 8]), seed=st.integers(0, 1000),
       name=st.sampled_from(["bla", "retnet", "gla", "mamba2", "deltanet"]))
def test_masked_sp_invariant_to_rank_count(n, t, seed, name):
    X = seq(n, seed=seed)
    w = MixerWeights.random("L", 8, 2, name, seed=seed)
    ref = full_mixer(w, X, 5)
    assert np.max(np.abs(gathered(sp_forward_masked(RankGroup(t), X, w, 5)) - ref)) < 1e-9


def test_first_rank_ignores_later_inputs():
    w = MixerWeights.random("L", 8, 2, "gla", seed=1)
    X = seq(16)
    Y = Tensor(np.concatenate([X.data[:4], Rng(9).normal((12, 8))]))
    a = sp_forward_masked(RankGroup(4), X, w, 2)[0].data
    b = sp_forward_masked(RankGroup(4), Y, w, 2)[0].data
    np.testing.assert_array_equal(a, b)


# ---------------------------------------------------------------- attention
@pytest.mark.parametrize("t", [2, 4])
def test_attention_sp_matches_single_rank(t):
    X = seq(32, h=4)
    w = MixerWeights.random("N", 4, 1, seed=4)
    out = gathered(sp_attention_allgather(RankGroup(t), X, w))
    assert np.max(np.abs(out - full_mixer(w, X))) < 1e-10


def test_attention_sp_uneven_split_rejected():
    with pytest.raises(ShapeError):
        sp_attention_allgather(RankGroup(4), seq(30), MixerWeights.random("N", 8, 2))


# ---------------------------------------------------------------- communication volume
@pytest.mark.parametrize("t", [2, 4, 8])
def test_lsm_state_traffic_independent_of_length(t):
    d = 8
    w = MixerWeights.random("L", d, 1, "bla", seed=0, use_normalizer=False)
    volumes = set()
    for n in (32, 64, 256):
        group = RankGroup(t)
        sp_forward_masked(group, seq(n, d), w, 16)
        assert [r.payload for r in group.comm_log] == ["state"]
        assert group.comm_log[0].elements == t * d * d
        volumes.add(sum(r.elements for r in group.comm_log))
    assert len(volumes) == 1


def test_attention_kv_traffic_linear_in_length():
    d, t = 4, 4
    w = MixerWeights.random("N", d, 1, seed=0)
    per_token = set()
    for n in (32, 64, 128):
        group = RankGroup(t)
        sp_attention_allgather(group, seq(n, d), w)
        recs = group.records(kind="all_gather")
        assert [r.payload for r in recs] == ["k", "v"]
        assert all(r.elements == n * d and r.received == (t - 1) * n * d // t for r in recs)
        per_token.add(sum(r.elements for r in recs) / n)
    assert per_token == {2 * d}


# ---------------------------------------------------------------- whole model
@pytest.mark.parametrize("pattern,lsm", [("LN", "bla"), ("LNLN", "gla"), ("LLLL", "deltanet"), ("NNNN", "bla")])
@pytest.mark.parametrize("t", [2, 4])
def test_hybrid_sp_matches_single_rank(pattern, lsm, t):
    model = Model.init(toy(pattern, lsm, token_shift=True), seed=2)
    packed = pack_sequences(DOCS)
    ref = model_forward(model, packed).data
    out = np.concatenate([logits.data for logits, _ in hybrid_sp_forward(RankGroup(t), model, packed)])
    assert np.max(np.abs(out - ref)) < 1e-9


def test_hybrid_payloads_follow_layer_kinds():
    packed = pack_sequences(DOCS)
    pure = RankGroup(2)
    hybrid_sp_forward(pure, Model.init(toy("LLLL")), packed)
    assert not pure.records(payload="k") and not pure.records(payload="v")
    attn = RankGroup(2)
    hybrid_sp_forward(attn, Model.init(toy("NNNN")), packed)
    assert not attn.records(payload="state")
    mixed = RankGroup(2)
    hybrid_sp_forward(mixed, Model.init(toy("LN")), packed)
    assert {r.layer for r in mixed.records(payload="state")} == {"layers.0"}
    assert {r.layer for r in mixed.records(payload="k")} == {"layers.1"}


def test_hybrid_with_attention_needs_even_split():
    with pytest.raises(ShapeError):
        hybrid_sp_forward(RankGroup(4), Model.init(toy("LN")), pack_sequences([[1, 2, 3], [4, 5, 6, 7]]))


def test_gradient_through_sp_equals_single_rank():
    model = Model.init(toy("LN", "gla"), seed=1)
    packed = pack_sequences(DOCS)
    names = list(model.params)

    def sp(*ps):
        m = model.with_params(dict(zip(names, ps)))
        logits = T.concat([lg for lg, _ in hybrid_sp_forward(RankGroup(4), m, packed)], axis=0)
        return cross_entropy(logits, packed.labels)

    def single(*ps):
        return cross_entropy(model_forward(model.with_params(dict(zip(names, ps))), packed), packed.labels)

    params = [model.params[n] for n in names]
    for a, b, n in zip(grad_of(sp, *params), grad_of(single, *params), names):
        assert relative_error(a, b) < 1e-9, n


# ---------------------------------------------------------------- tensor parallel
@pytest.mark.parametrize("name", ["bla", "gla", "mamba2", "deltanet"])
def test_tp_single_rank_exact(name):
    report = tp_shard_check(MixerWeights.random("L", 8, 4, name, seed=1), seq(12), 1, 4)
    assert report.max_abs_deviation == 0.0
    assert report.allreduce_elements == 2 * 12 * 8


def test_tp_identity_weights_shards_concatenate():
    h = 8
    eye = np.eye(h)
    w = MixerWeights("N", 2, *(Tensor(eye) for _ in range(4)))
    report = tp_shard_check(w, seq(6), 2)
    np.testing.assert_allclose(np.concatenate(report.shard_outputs, axis=-1), report.output, atol=1e-12)
    assert report.max_abs_deviation < 1e-12


@pytest.mark.parametrize("name", ["bla", "retnet", "gla", "mamba2", "deltanet"])
@pytest.mark.parametrize("t", [2, 4])
def test_tp_random_weights(name, t):
    report = tp_shard_check(MixerWeights.random("L", 8, 4, name, seed=2), seq(12), t, 4)
    assert report.max_abs_deviation < 1e-10


def test_tp_attention():
    assert tp_shard_check(MixerWeights.random("N", 8, 4, seed=2), seq(12), 4).max_abs_deviation < 1e-10


def test_tp_rejects_uneven_heads():
    with pytest.raises(ShapeError):
        tp_shard_check(MixerWeights.random("L", 8, 2, "bla"), seq(4), 4)


# ---------------------------------------------------------------- data + sequence mesh
def test_parallel_config():
    assert ParallelConfig(dp=2, sp=4).world_size == 8
    for bad in (dict(pp=2), dict(ep=2), dict(dp=0)):
        with pytest.raises(ConfigError):
            ParallelConfig(**bad)


def test_data_sequence_gradients_match_mean_loss():
    model = Model.init(toy("LN", "gla"), seed=0)
    shards = [pack_sequences([[1, 2, 3, 4, 5], [6, 7, 8]]), pack_sequences([[9, 1, 2, 3], [4, 5, 6, 7]])]
    result = data_sequence_grads(model, shards, sp=2)
    names = list(model.params)

    def mean_loss(*ps):
        m = model.with_params(dict(zip(names, ps)))
        losses = [cross_entropy(model_forward(m, s), s.labels) for s in shards]
        return (losses[0] + losses[1]) * 0.5

    ref = grad_of(mean_loss, *[model.params[n] for n in names])
    for g, n in zip(ref, names):
        assert relative_error(result.grads[n], g) < 1e-9, n
    assert [r.kind for r in result.dp_log] == ["reduce_scatter", "all_gather"]
    assert len(result.sp_logs) == 2


def test_distribute_preserves_order():
    X = seq(10)
    chunks = distribute(X, 3)
    assert chunks.starts == (0, 4, 7)
    np.testing.assert_array_equal(chunks.gather().data, X.data)
