import numpy as np
import pytest
from hypothesis import given, strategies as st

from lifelora import adapters as ad
from lifelora import kbstore as kbs
from lifelora.errors import CompatibilityError, CorruptionError, FormatError, UsageError
from lifelora.subspace import SubspaceProjection, build_subspace
from oracles import read_blob, scan_kb_file

FP = {"V": 32, "h": 4, "L": 2, "r": 2, "d": 8, "n_symbols": 16, "window": 2, "base": "abc"}
SHAPES = [(4, 6), (4, 4)]


def _rec(skill_id, seed, gates=((0.2, 0.9), (1.0, -1.0)), sr=0.5):
    rng = np.random.default_rng(seed)
    adp = ad.init_first_skill(SHAPES, 2, seed, skill_id)
    pairs = [ad.AdapterPair(p.layer, kbs.f32(p.a), kbs.f32(rng.normal(size=p.b.shape))) for p in adp.pairs]
    logits = [kbs.f32(np.array([g])) for g in gates]
    adapter = ad.SkillAdapter(skill_id, pairs, logits).frozen()
    basis = build_subspace(rng.normal(size=(5, 8)), 2, skill_id)
    basis = SubspaceProjection(skill_id, kbs.f32(basis.basis))
    return kbs.SkillRecord(skill_id, f"skill-{skill_id}", f"digest{skill_id}", adapter, basis, sr, {"note": seed})


def _kb(n=3):
    kb = kbs.KnowledgeBase(FP, "emb123", (), {"method": "full"})
    for i in range(n):
        kb = kbs.append_record(kb, _rec(i, 10 + i, sr=None if i == 2 else 0.25 * (i + 1)))
    return kb


def test_round_trip_bytes(tmp_path):
    kb = _kb()
    kbs.save(kb, tmp_path / "a.abk")
    first = (tmp_path / "a.abk").read_bytes()
    kbs.save(kbs.load(tmp_path / "a.abk"), tmp_path / "b.abk")
    assert (tmp_path / "b.abk").read_bytes() == first
    assert kbs.serialize(kb) == first


def test_round_trip_fields(tmp_path):
    kb = _kb()
    kbs.save(kb, tmp_path / "k.abk")
    back = kbs.load(tmp_path / "k.abk", expect_fingerprint=FP)
    assert back.fingerprint == kb.fingerprint and back.embedding_digest == kb.embedding_digest
    assert back.meta == kb.meta and back.skill_ids == [0, 1, 2]
    for r, q in zip(kb.records, back.records):
        assert (r.name, r.corpus_digest, r.sr_gt, r.meta) == (q.name, q.corpus_digest, q.sr_gt, q.meta)
        assert r.adapter.gates() == q.adapter.gates()
        for p, pq in zip(r.adapter.pairs, q.adapter.pairs):
            assert np.array_equal(kbs.f32(p.a), pq.a) and np.array_equal(kbs.f32(p.b), pq.b)
        for g, gq in zip(r.adapter.gate_logits, q.adapter.gate_logits):
            assert np.array_equal(kbs.f32(g), gq)
        assert np.array_equal(kbs.f32(r.subspace.basis), q.subspace.basis)
        assert kbs.gates_consistent(q)


def test_unrounded_values_within_f32(tmp_path):
    rec = _rec(0, 1)
    raw = ad.AdapterPair(0, rec.adapter.pairs[0].a + 1e-9, rec.adapter.pairs[0].b)
    adapter = ad.SkillAdapter(0, [raw, rec.adapter.pairs[1]], rec.adapter.gate_logits).frozen()
    kb = kbs.append_record(kbs.KnowledgeBase(FP, "e"), kbs.SkillRecord(0, "x", "d", adapter, rec.subspace))
    back = kbs.deserialize(kbs.serialize(kb))
    a = raw.a
    assert np.allclose(back.records[0].adapter.pairs[0].a, a, rtol=2**-23, atol=0)


def test_structure_against_scanner():
    kb = _kb()
    data = kbs.serialize(kb)
    env, body_len, spans = scan_kb_file(data)
    assert len(env["records"]) == 3
    # blobs tile the body without gaps or overlap
    pos = 0
    for start, end, shape in spans:
        assert start == pos and end - start == 4 * int(np.prod(shape))
        pos = end
    assert pos == body_len
    env_len = len(data) - 12 - body_len
    spec = env["records"][1]["blobs"]["b.1"]
    assert np.array_equal(read_blob(data, env_len, spec["offset"], spec["shape"]), kb.records[1].adapter.pairs[1].b)


def test_empty_kb(tmp_path):
    kb = kbs.KnowledgeBase(FP, "e")
    kbs.save(kb, tmp_path / "e.abk")
    back = kbs.load(tmp_path / "e.abk")
    assert len(back) == 0 and back.fingerprint == FP
    assert kbs.inspect(tmp_path / "e.abk")["records"] == []


def test_bad_magic_and_truncation(tmp_path):
    data = kbs.serialize(_kb(2))
    with pytest.raises(FormatError):
        kbs.deserialize(b"XXXX" + data[4:])
    with pytest.raises(FormatError):
        kbs.deserialize(b"AB")
    with pytest.raises(CorruptionError):
        kbs.deserialize(data[:-7])
    with pytest.raises(CorruptionError):
        kbs.deserialize(data[:40])


@given(st.integers(13, 2000))
def test_any_truncation_rejected(cut):
    data = kbs.serialize(_kb(2))
    cut = min(cut, len(data) - 1)
    with pytest.raises(FormatError):
        kbs.deserialize(data[:cut])


def test_version_rejected():
    data = kbs.serialize(kbs.KnowledgeBase(FP, "e", version=2))
    with pytest.raises(FormatError, match="version"):
        kbs.deserialize(data)


def test_fingerprint_mismatch_names_both():
    data = kbs.serialize(_kb(1))
    other = {**FP, "h": 16}
    with pytest.raises(CompatibilityError) as info:
        kbs.deserialize(data, expect_fingerprint=other)
    assert "'h': 16" in str(info.value) and "'h': 4" in str(info.value)


def test_append_semantics():
    kb = _kb(2)
    grown = kbs.append_record(kb, _rec(7, 3))
    assert len(kb) == 2 and grown.skill_ids == [0, 1, 7]
    with pytest.raises(UsageError):
        kbs.append_record(kb, _rec(1, 3))
    odd = _rec(9, 4)
    bad_basis = type(odd.subspace)(9, np.zeros((5, 2)))
    with pytest.raises(CompatibilityError):
        kbs.append_record(kb, kbs.SkillRecord(9, "x", "d", odd.adapter, bad_basis))
    wide = ad.init_first_skill([(4, 7), (4, 4)], 2, 0, 9)
    with pytest.raises(CompatibilityError):
        kbs.append_record(kb, kbs.SkillRecord(9, "x", "d", wide, odd.subspace))


def test_inspect_summary(tmp_path):
    kbs.save(_kb(), tmp_path / "k.abk")
    info = kbs.inspect(tmp_path / "k.abk")
    assert [r["gates"] for r in info["records"]] == ["10"] * 3
    assert info["records"][0]["rank"] == 2 and info["records"][0]["subspace_rank"] == 2
    assert info["file_bytes"] == (tmp_path / "k.abk").stat().st_size


def test_save_is_atomic_on_failure(tmp_path, monkeypatch):
    target = tmp_path / "k.abk"
    kbs.save(_kb(1), target)
    before = target.read_bytes()

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(kbs.os, "replace", boom)
    with pytest.raises(OSError):
        kbs.save(_kb(3), target)
    assert target.read_bytes() == before
    assert [p.name for p in tmp_path.iterdir()] == ["k.abk"]
