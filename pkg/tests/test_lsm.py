import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from linear_moe import tensor as T
from linear_moe.errors import ConfigError, DegenerateNormalizerError, ShapeError
from linear_moe.lsm import (
    INSTANCES,
    LsmSpec,
    MemoryState,
    StepInputs,
    causal_mask,
    feature_map,
    lsm_forward_chunked,
    lsm_forward_sequential,
    random_gates,
    recurrent_step,
)
from linear_moe.lsm.goldens import GOLDEN_SEEDS, golden_output, read_golden
from linear_moe.tensor import Rng, Tensor, finite_diff_grad, grad_of, relative_error


def make_inputs(name, n, dk, dv=None, seed=0, lead=(), dtype=np.float64, **spec_kw):
    dv = dk if dv is None else dv
    rng = Rng(seed).child(name)
    spec = LsmSpec.create(name, dk, dv, rng=rng, dtype=dtype, **spec_kw)
    Q = Tensor(rng.normal(lead + (n, dk), dtype=dtype))
    K = Tensor(rng.normal(lead + (n, dk), dtype=dtype))
    V = Tensor(rng.normal(lead + (n, dv), dtype=dtype))
    return Q, K, V, random_gates(spec, n, rng, lead, dtype=dtype), spec


def max_abs(a, b):
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


# ---------------------------------------------------------------- examples
def test_feature_map_examples():
    np.testing.assert_array_equal(feature_map(Tensor([1.0, -1.0]), "identity").data, [1, -1])
    np.testing.assert_array_equal(feature_map(Tensor([0.0, 0.0]), "elu_plus_one").data, [1, 1])
    np.testing.assert_array_equal(feature_map(Tensor([2.0, -3.0]), "squared").data, [4, 9])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(-30, 30), min_size=1, max_size=8))
def test_feature_map_signs(values):
    x = Tensor(values)
    assert np.all(feature_map(x, "elu_plus_one").data > 0)
    assert np.all(feature_map(x, "squared").data >= 0)


def test_causal_mask_examples():
    np.testing.assert_array_equal(causal_mask(1).data, [[1]])
    np.testing.assert_array_equal(causal_mask(2).data, [[1, 0], [1, 1]])
    np.testing.assert_array_equal(causal_mask(3).data.sum(axis=1), [1, 2, 3])
    with pytest.raises(ShapeError):
        causal_mask(0)


def _step(state, spec, k, v, q=None, **gates):
    q = Tensor(np.ones(spec.d_k)) if q is None else q
    return recurrent_step(state, StepInputs(q, Tensor(k), Tensor(v), gates), spec)


def test_bla_then_scalar_decay_example():
    bla = LsmSpec.create("bla", 2, feature_map="identity", use_normalizer=False)
    state, _ = _step(MemoryState.zeros(2, 2), bla, [1.0, 0.0], [0.0, 1.0])
    np.testing.assert_array_equal(state.M.data, [[0, 1], [0, 0]])
    assert state.step == 1

    decay = LsmSpec.create("lightning", 2).with_params(decay=Tensor(0.5))
    state, _ = _step(state, decay, [0.0, 0.0], [0.0, 0.0])
    np.testing.assert_array_equal(state.M.data, [[0, 0.5], [0, 0]])
    assert state.step == 2


def test_fresh_state_is_zero():
    s = MemoryState.zeros(3, 2, normalizer=True)
    assert s.step == 0
    assert not s.M.data.any() and not s.z.data.any()


def test_gla_with_unit_gates_tracks_bla():
    Q, K, V, _, _ = make_inputs("bla", 12, 3)
    bla = LsmSpec.create("bla", 3, feature_map="identity", use_normalizer=False)
    gla = LsmSpec.create("gla", 3)
    ones = {"g": Tensor(np.full((12, 3), 50.0))}  # sigmoid(50) == 1.0 in float64
    _, s_bla = lsm_forward_sequential(Q, K, V, {}, bla, return_state=True)
    o_gla, s_gla = lsm_forward_sequential(Q, K, V, ones, gla, return_state=True)
    np.testing.assert_array_equal(s_gla.M.data, s_bla.M.data)
    np.testing.assert_array_equal(o_gla.data, lsm_forward_sequential(Q, K, V, {}, bla).data)


def test_scalar_decay_of_one_tracks_bla():
    Q, K, V, _, _ = make_inputs("bla", 12, 3)
    bla = LsmSpec.create("bla", 3, feature_map="identity", use_normalizer=False)
    unit = LsmSpec.create("retnet", 3).with_params(decay=Tensor(1.0))
    np.testing.assert_array_equal(lsm_forward_sequential(Q, K, V, {}, unit).data,
                                  lsm_forward_sequential(Q, K, V, {}, bla).data)


def test_mamba2_decay_factor_tends_to_one():
    b = Tensor(np.zeros((1,)))
    gaps = []
    for a_log in (0.0, -5.0, -10.0, -20.0):
        spec = LsmSpec.create("mamba2", 2).with_params(A_log=Tensor(a_log))
        M0 = Tensor(np.ones((2, 2)))
        state, _ = _step(MemoryState(M0), spec, [0.0, 0.0], [0.0, 0.0], delta=b[0])
        gaps.append(abs(1.0 - state.M.data[0, 0]))
    assert gaps == sorted(gaps, reverse=True)
    assert gaps[-1] < 1e-8


def test_deltanet_repeated_pair_projects_key_onto_value():
    spec = LsmSpec.create("deltanet", 4)
    rng = Rng(5)
    k = rng.normal(4)
    k /= np.linalg.norm(k)
    v = rng.normal(4)
    gates = {"a": Tensor(50.0), "b": Tensor(0.3)}
    b = 1.0 / (1.0 + np.exp(-0.3))
    s1, _ = _step(MemoryState.zeros(4, 4), spec, k, v, **gates)
    np.testing.assert_allclose(k @ s1.M.data, b * v, atol=1e-14)
    s2, _ = _step(s1, spec, k, v, **gates)
    np.testing.assert_allclose(k @ s2.M.data, b * v, atol=1e-14)
    np.testing.assert_allclose(s2.M.data, s1.M.data, atol=1e-14)


def test_ttt_step_is_one_descent_step_on_quadratic_loss():
    rng = Rng(6)
    spec = LsmSpec.create("ttt", 3, 2)
    M0 = rng.normal((3, 2))
    k, v, b = rng.normal(3), rng.normal(2), 0.4
    kn = k / np.linalg.norm(k)
    eta = 1.0 / (1.0 + np.exp(-b))

    def loss(M):
        r = T.reshape(Tensor(kn.reshape(1, 3)) @ M, (2,)) - Tensor(v)
        return (r * r).sum() * 0.5

    numeric = finite_diff_grad(loss, Tensor(M0)).data
    analytic = np.outer(kn, kn @ M0 - v)
    np.testing.assert_allclose(numeric, analytic, atol=1e-8)

    state, _ = _step(MemoryState(Tensor(M0)), spec, k, v, b=Tensor(b))
    np.testing.assert_allclose(state.M.data, M0 - eta * analytic, atol=1e-14)


def test_single_token_with_normalizer_returns_value():
    Q, K, V, gates, spec = make_inputs("bla", 1, 4)
    np.testing.assert_allclose(lsm_forward_sequential(Q, K, V, gates, spec).data, V.data, atol=1e-14)


def test_single_token_without_normalizer():
    Q, K, V, gates, spec = make_inputs("bla", 1, 4, use_normalizer=False)
    fq, fk = feature_map(Q, "elu_plus_one").data[0], feature_map(K, "elu_plus_one").data[0]
    np.testing.assert_allclose(lsm_forward_sequential(Q, K, V, gates, spec).data[0],
                               (fq @ fk) * V.data[0], atol=1e-14)


# ---------------------------------------------------------------- errors
def test_degenerate_normalizer_raises():
    spec = LsmSpec.create("bla", 2, feature_map="identity", use_normalizer=True)
    Q = Tensor([[1.0, -1.0]])
    K = Tensor([[1.0, 1.0]])
    V = Tensor([[1.0, 2.0]])
    with pytest.raises(DegenerateNormalizerError, match="degenerate normalizer"):
        lsm_forward_sequential(Q, K, V, {}, spec)
    with pytest.raises(DegenerateNormalizerError, match="degenerate normalizer"):
        lsm_forward_chunked(Q, K, V, {}, spec, chunk_size=1)


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_state_names_instance():
    spec = LsmSpec.create("bla", 2, feature_map="identity", use_normalizer=False)
    big = Tensor(np.full((2, 2), 1e200))
    with pytest.raises(FloatingPointError, match="bla"):
        lsm_forward_sequential(big, big, big, {}, spec)


def test_chunk_size_zero_is_error():
    Q, K, V, gates, spec = make_inputs("bla", 4, 2)
    with pytest.raises(ValueError):
        lsm_forward_chunked(Q, K, V, gates, spec, chunk_size=0)


def test_spec_validation():
    with pytest.raises(ConfigError):
        LsmSpec.create("nope", 2)
    with pytest.raises(ConfigError):
        LsmSpec.create("deltanet", 2, use_normalizer=True)
    with pytest.raises(ConfigError):
        LsmSpec.create("lightning", 2).with_params(decay=Tensor(1.5))
    with pytest.raises(ConfigError):
        LsmSpec.create("s4", 2).with_params(A_log=Tensor(np.zeros((3, 3))))


def test_missing_gate_is_shape_error():
    Q, K, V, _, spec = make_inputs("gla", 3, 2)
    with pytest.raises(ShapeError, match="'g'"):
        lsm_forward_sequential(Q, K, V, {}, spec)


def test_mismatched_state_dims():
    spec = LsmSpec.create("bla", 2)
    with pytest.raises(ShapeError):
        _step(MemoryState.zeros(3, 3), spec, [1.0, 0.0], [0.0, 1.0])


# ---------------------------------------------------------------- goldens
@pytest.mark.parametrize("seed", GOLDEN_SEEDS)
@pytest.mark.parametrize("name", INSTANCES)
def test_golden_vectors(name, seed):
    stored = read_golden(name, seed)
    assert stored.shape == (32, 8)
    assert max_abs(golden_output(name, seed), stored) < 1e-12


# ---------------------------------------------------------------- oracle equivalence
@pytest.mark.parametrize("name", INSTANCES)
def test_chunked_matches_sequential_grid(name):
    for n in (7, 32):
        for dk, dv in ((4, 4), (3, 5)):
            Q, K, V, gates, spec = make_inputs(name, n, dk, dv, seed=n)
            ref = lsm_forward_sequential(Q, K, V, gates, spec).data
            for c in (1, 3, 8, n):
                out = lsm_forward_chunked(Q, K, V, gates, spec, chunk_size=c).data
                assert max_abs(out, ref) < 1e-10, (n, dk, dv, c)


def test_bla_chunked_example():
    Q, K, V, gates, spec = make_inputs("bla", 64, 8)
    ref = lsm_forward_sequential(Q, K, V, gates, spec).data
    for c in (4, 8, 16):
        assert max_abs(lsm_forward_chunked(Q, K, V, gates, spec, c).data, ref) < 1e-10


@pytest.mark.parametrize("name", ["bla", "gla", "retnet", "mamba", "gated_deltanet", "rwkv7"])
def test_chunked_matches_sequential_float32(name):
    Q, K, V, gates, spec = make_inputs(name, 24, 4, dtype=np.float32)
    ref = lsm_forward_sequential(Q, K, V, gates, spec)
    out = lsm_forward_chunked(Q, K, V, gates, spec, chunk_size=5)
    assert out.dtype == np.float32
    assert max_abs(out.data, ref.data) < 1e-4


@pytest.mark.parametrize("name", ["gla", "mamba2", "deltanet", "s4"])
def test_leading_axes_and_head_params(name):
    Q, K, V, gates, spec = make_inputs(name, 9, 3, lead=(2, 3), num_heads=3)
    out = lsm_forward_chunked(Q, K, V, gates, spec, chunk_size=4).data
    ref = lsm_forward_sequential(Q, K, V, gates, spec).data
    assert out.shape == (2, 3, 9, 3)
    assert max_abs(out, ref) < 1e-10
    # each head equals an independent single-head run with that head's parameters
    for h in range(3):
        head_spec = spec.with_params(**{k: Tensor(p.data[h]) for k, p in spec.decay_params.items()})
        sl = lambda x: x[1, h]  # noqa: E731
        single = lsm_forward_sequential(sl(Q), sl(K), sl(V), {k: sl(g) for k, g in gates.items()}, head_spec)
        assert max_abs(single.data, ref[1, h]) < 1e-12


@pytest.mark.parametrize("name", ["bla", "gla", "mamba", "ttt"])
def test_initial_state_continues_the_fold(name):
    Q, K, V, gates, spec = make_inputs(name, 10, 3)
    full = lsm_forward_sequential(Q, K, V, gates, spec).data
    head = {k: g[:4] for k, g in gates.items()}
    tail = {k: g[4:] for k, g in gates.items()}
    _, state = lsm_forward_chunked(Q[:4], K[:4], V[:4], head, spec, 3, return_state=True)
    assert state.step == 4
    rest = lsm_forward_chunked(Q[4:], K[4:], V[4:], tail, spec, 3, initial_state=state).data
    assert max_abs(rest, full[4:]) < 1e-10
    rest_seq = lsm_forward_sequential(Q[4:], K[4:], V[4:], tail, spec, initial_state=state).data
    assert max_abs(rest_seq, full[4:]) < 1e-10


@settings(max_examples=40, deadline=None)
@given(name=st.sampled_from(INSTANCES), n=st.integers(1, 20), c=st.integers(1, 24),
       dk=st.integers(1, 4), dv=st.integers(1, 4), seed=st.integers(0, 10_000))
def test_chunked_equivalence_property(name, n, c, dk, dv, seed):
    Q, K, V, gates, spec = make_inputs(name, n, dk, dv, seed=seed)
    ref = lsm_forward_sequential(Q, K, V, gates, spec).data
    assert max_abs(lsm_forward_chunked(Q, K, V, gates, spec, c).data, ref) < 1e-10


# ---------------------------------------------------------------- invariants
@pytest.mark.parametrize("name", INSTANCES)
def test_decay_is_monotone_with_zero_inputs(name):
    n, d = 16, 3
    _, _, _, gates, spec = make_inputs(name, n, d, seed=3)
    rng = Rng(4)
    state = MemoryState(Tensor(rng.normal((d, d))), Tensor(np.ones(d)) if spec.use_normalizer else None)
    zeros = Tensor(np.zeros(d))
    q = Tensor(np.ones(d))
    norms = [np.linalg.norm(state.M.data)]
    for s in range(n):
        step_gates = {k: g[s] for k, g in gates.items()}
        state, _ = recurrent_step(state, StepInputs(q, zeros, zeros, step_gates), spec)
        norms.append(np.linalg.norm(state.M.data))
    assert all(b <= a + 1e-12 for a, b in zip(norms, norms[1:]))


@pytest.mark.parametrize("name", [n for n in INSTANCES if n != "bla"] + ["bla_plain"])
def test_linear_in_values(name):
    kw = {"use_normalizer": False} if name == "bla_plain" else {}
    inst = "bla" if name == "bla_plain" else name
    Q, K, V1, gates, spec = make_inputs(inst, 9, 3, seed=1, **kw)
    V2 = Tensor(Rng(2).normal(V1.shape))
    f = lambda V: lsm_forward_chunked(Q, K, V, gates, spec, 4).data  # noqa: E731
    assert max_abs(f(V1 + V2), f(V1) + f(V2)) < 1e-10


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(-3, 3))
def test_linear_in_values_property(seed, scale):
    Q, K, V, gates, spec = make_inputs("gla", 6, 2, seed=seed)
    a = lsm_forward_sequential(Q, K, V * scale, gates, spec).data
    b = lsm_forward_sequential(Q, K, V, gates, spec).data * scale
    assert max_abs(a, b) < 1e-10


def test_normalizer_is_positive_after_update():
    Q, K, V, gates, spec = make_inputs("bla", 5, 3)
    _, state = lsm_forward_sequential(Q, K, V, gates, spec, return_state=True)
    assert np.all(state.z.data > 0)


# ---------------------------------------------------------------- gradients
def _check_lsm_grad(name, path):
    n, d = 5, 3
    Q, K, V, gates, spec = make_inputs(name, n, d, seed=7)
    gate_keys = sorted(gates)
    static_keys = sorted(spec.decay_params)
    inputs = [Q, K, V] + [gates[k] for k in gate_keys] + [spec.decay_params[k] for k in static_keys]
    w = Tensor(Rng(8).normal((n, d)))

    def loss(*xs):
        q, k, v = xs[:3]
        g = dict(zip(gate_keys, xs[3:3 + len(gate_keys)]))
        sp = spec.with_params(**dict(zip(static_keys, xs[3 + len(gate_keys):])))
        if path == "chunked":
            out = lsm_forward_chunked(q, k, v, g, sp, chunk_size=2)
        else:
            out = lsm_forward_sequential(q, k, v, g, sp)
        return (out * w).sum()

    analytic = grad_of(loss, *inputs)
    for i, x in enumerate(inputs):
        def f(xi, i=i):
            args = list(inputs)
            args[i] = xi
            return loss(*args)
        numeric = finite_diff_grad(f, x, eps=1e-6).data
        assert relative_error(analytic[i], numeric) < 1e-4, (name, path, i)


@pytest.mark.parametrize("path", ["sequential", "chunked"])
@pytest.mark.parametrize("name", INSTANCES)
def test_gradients_match_finite_differences(name, path):
    _check_lsm_grad(name, path)
