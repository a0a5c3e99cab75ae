from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from lifelora import adapters as ad
from lifelora import gradtape as gt
from lifelora.errors import ShapeError, UsageError
from lifelora.subspace import build_subspace
from oracles import central_difference, merged_delta_loop

SHAPES = [(4, 6), (4, 4)]


def test_first_skill_init():
    a1 = ad.init_first_skill(SHAPES, 3, seed=7)
    a2 = ad.init_first_skill(SHAPES, 3, seed=7)
    for p, q, (out, fan_in) in zip(a1.pairs, a2.pairs, SHAPES):
        assert np.array_equal(p.a, q.a)
        assert not p.b.any()
        assert not p.delta().any() and p.delta().shape == (out, fan_in)
    assert all(not g.any() for g in a1.gate_logits)


def test_kaiming_bound_scan():
    a = ad.kaiming_uniform(np.random.default_rng(0), 100, 100)
    bound = np.sqrt(6 / 100)
    assert np.abs(a).max() <= bound
    assert np.abs(a).max() > 0.99 * bound


def test_pair_shape_check():
    with pytest.raises(ShapeError):
        ad.AdapterPair(0, np.zeros((2, 3)), np.zeros((4, 3)))


def test_mix_a_cases():
    a1, a2 = np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[0.0, 4.0], [-4.0, 8.0]])
    assert np.array_equal(ad.mix_a([[a1]], [1.0])[0], a1)
    assert np.allclose(ad.mix_a([[a1], [a2]], [0.75, 0.25])[0], [[0.75, 2.5], [1.25, 5.0]])
    assert np.allclose(ad.mix_a([[a1], [a1]], [0.3, 0.7])[0], a1)
    with pytest.raises(UsageError):
        ad.mix_a([], [])


def _record(skill_id, seed, x):
    adp = ad.init_first_skill(SHAPES, 2, seed, skill_id)
    return SimpleNamespace(adapter=adp, subspace=build_subspace(x, 2, skill_id))


def test_inherit_shared_single_and_empty():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 8))
    rec = _record(0, 1, x)
    new, omega = ad.inherit_shared([rec], x, 5.0, SHAPES, 1)
    assert np.allclose(omega.weights, [1.0])
    for p, q in zip(new.pairs, rec.adapter.pairs):
        assert np.array_equal(p.a, q.a)
        assert not p.b.any()
    with pytest.raises(UsageError):
        ad.inherit_shared([], x, 5.0, SHAPES, 1)


def test_orthogonality_cases():
    b = np.array([[0.6, 0.0], [0.0, 0.8]])
    assert ad.orthogonality_regularizer([b], []) == 0.0
    assert ad.orthogonality_regularizer([b], [[b]], eps=1e-12) == pytest.approx(1.0)
    top = np.array([[1.0, 2.0], [0.0, 0.0]])
    bottom = np.array([[0.0, 0.0], [3.0, 1.0]])
    assert ad.orthogonality_regularizer([top], [[bottom]]) == 0.0
    with pytest.raises(ShapeError):
        ad.orthogonality_regularizer([b], [[np.zeros((3, 2))]])


mats = st.integers(0, 2**31).map(lambda s: np.random.default_rng(s).normal(size=(2, 4, 3)))


@given(st.lists(mats, min_size=1, max_size=4), mats)
def test_regularizer_order_invariant(priors, cur):
    priors = [list(p) for p in priors]
    a = ad.orthogonality_regularizer(list(cur), priors)
    b = ad.orthogonality_regularizer(list(cur), priors[::-1])
    assert a == pytest.approx(b, abs=1e-12)


@given(st.integers(0, 2**31), st.floats(0.5, 2.0))
def test_regularizer_scale_robust(seed, c):
    rng = np.random.default_rng(seed)
    prior = rng.normal(size=(4, 3))
    prior *= max(1.0, 1.0 / np.linalg.norm(prior))
    cur = prior + 0.3 * rng.normal(size=(4, 3))
    r1 = ad.orthogonality_regularizer([cur], [[prior]])
    r2 = ad.orthogonality_regularizer([cur], [[c * prior]])
    assert abs(r1 - r2) <= 0.1 * abs(r1)


@given(st.integers(0, 2**31))
def test_regularizer_tape_matches_value_and_gradient(seed):
    rng = np.random.default_rng(seed)
    cur = [rng.normal(size=(4, 3)), rng.normal(size=(2, 3))]
    priors = [[rng.normal(size=(4, 3)), rng.normal(size=(2, 3))] for _ in range(2)]
    tape = gt.Tape()
    ids = [tape.param(c) for c in cur]
    out = ad.orthogonality_regularizer_tape(tape, ids, priors)
    assert tape.value(out)[0, 0] == pytest.approx(ad.orthogonality_regularizer(cur, priors), abs=1e-12)
    grads = gt.backward(tape, out)
    for i, c in zip(ids, cur):
        num = central_difference(lambda: ad.orthogonality_regularizer(cur, priors), c)
        assert np.allclose(grads[i], num, rtol=1e-5, atol=1e-8)


def test_gated_delta_cases():
    pair = ad.AdapterPair(0, np.array([[1.0, 2.0]]), np.array([[2.0], [4.0]]))
    assert not ad.gated_delta(pair, 0.0).any()
    assert np.array_equal(ad.gated_delta(pair, 1.0), pair.b @ pair.a)
    assert np.allclose(ad.gated_delta(pair, 0.5), [[1.0, 2.0], [2.0, 4.0]])
    with pytest.raises(UsageError):
        ad.gated_delta(pair, 1.5)


def test_sparsity_penalty_cases():
    assert ad.sparsity_penalty([0.0, 0.0, 0.0]) == 0.0
    assert ad.sparsity_penalty([1.0] * 4) == 4.0


@given(st.integers(0, 2**31))
def test_sparsity_gradient_wrt_logits(seed):
    rng = np.random.default_rng(seed)
    logits = [rng.normal(size=(1, 2)) for _ in range(3)]
    noise = [gt.gumbel_noise(rng) for _ in range(3)]

    def value():
        tot = 0.0
        for lg, nz in zip(logits, noise):
            z = np.exp(lg[0] + nz - (lg[0] + nz).max())
            tot += z[1] / z.sum()
        return tot

    tape = gt.Tape()
    ids = [tape.param(lg) for lg in logits]
    soft = [tape.nodes[gt.st_gumbel_gate(tape, i, nz, 1.0)[1]].parents[0] for i, nz in zip(ids, noise)]
    grads = gt.backward(tape, ad.sparsity_penalty_tape(tape, soft))
    for i, lg in zip(ids, logits):
        assert np.allclose(grads[i], central_difference(value, lg), rtol=1e-5, atol=1e-9)


def _hand_adapter(skill_id, seed, gates):
    rng = np.random.default_rng(seed)
    pairs = [ad.AdapterPair(l, rng.normal(size=(2, fin)), rng.normal(size=(fout, 2))) for l, (fout, fin) in enumerate(SHAPES)]
    logits = [np.array([[0.0, 1.0]]) if g else np.array([[1.0, 0.0]]) for g in gates]
    return ad.SkillAdapter(skill_id, pairs, logits).frozen()


def test_aggregate_single_and_identical():
    a = _hand_adapter(0, 1, (1, 0))
    m = ad.aggregate_adapters([a], [1.0])
    assert np.array_equal(m.deltas[0], a.pairs[0].delta())
    assert not m.deltas[1].any()
    assert m.top1_gates == (1, 0)
    m2 = ad.aggregate_adapters([a, a], [0.3, 0.7])
    assert np.allclose(m2.deltas[0], a.pairs[0].delta(), atol=1e-12)


def test_aggregate_matches_loop_oracle():
    a, b = _hand_adapter(0, 1, (1, 1)), _hand_adapter(1, 2, (1, 0))
    omega = [0.8836, 0.1164]
    m = ad.aggregate_adapters([a, b], omega)
    for l in range(2):
        ref = merged_delta_loop(
            [a.pairs[l].b.tolist(), b.pairs[l].b.tolist()],
            [a.pairs[l].a.tolist(), b.pairs[l].a.tolist()],
            [a.gates()[l], b.gates()[l]],
            omega,
        )
        assert np.allclose(m.deltas[l], ref, atol=1e-12)
    assert m.any_gates == (1, 1) and m.top1 == 0 and m.top1_gates == (1, 1)


@given(st.lists(st.floats(0.0, 1.0), min_size=3, max_size=3), st.floats(0.1, 3.0))
def test_aggregate_linear_in_omega(w, c):
    ads = [_hand_adapter(i, i + 10, (1, i % 2)) for i in range(3)]
    m1 = ad.aggregate_adapters(ads, w)
    m2 = ad.aggregate_adapters(ads, [c * x for x in w])
    for d1, d2 in zip(m1.deltas, m2.deltas):
        assert np.allclose(c * d1, d2, atol=1e-12)


def test_aggregate_count_mismatch():
    with pytest.raises(ShapeError):
        ad.aggregate_adapters([_hand_adapter(0, 1, (1, 1))], [0.5, 0.5])


def test_gate_freeze_deterministic():
    adp = ad.init_first_skill(SHAPES, 2, 0)
    adp.gate_logits = [np.array([[0.2, 0.5]]), np.array([[0.3, 0.3]])]
    f = adp.frozen()
    assert f.gate_decisions == (1, 0)
    assert ad.freeze_decisions(f.gate_logits) == f.gate_decisions
