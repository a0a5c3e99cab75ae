"""Acceptance criteria 1-10. Each test records one PASS/FAIL line, printed at the end of the session.

Run alone with ``python -m pytest tests/test_acceptance.py`` (about seven minutes on one core).
"""
import time
from dataclasses import replace

import numpy as np

from lifelora import kbstore as kbs
from lifelora import lifecycle as lc
from lifelora.embed import HashedEmbedder, embed_corpus
from lifelora.matcore import frobenius_norm, svd
from lifelora.subspace import aggregation_weights, build_subspace
from conftest import METHODS, SEEDS
from oracles import singular_values_oracle, weights_loop
from test_toymodel import joint_gradcheck

ABLATIONS = ("no-GGM", "no-INA", "no-SOT")
RESULTS: dict[int, str] = {}


def record(n: int, ok: bool, detail: str) -> None:
    RESULTS[n] = f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    assert ok, RESULTS[n]


def median_fr(grid, method):
    return float(np.median([grid["runs"][method, s]["report"].summary["avg_fr"] for s in SEEDS]))


def test_criterion_1_numeric_core():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_rec = worst_sv = 0.0
    for _ in range(100):
        m, n = rng.integers(1, 33, size=2)
        x = rng.normal(size=(m, n))
        r = svd(x)
        worst_rec = max(worst_rec, frobenius_norm(r.u @ np.diag(r.s) @ r.vt - x) / frobenius_norm(x))
        ref = singular_values_oracle(x)[: len(r.s)]
        worst_sv = max(worst_sv, float(np.max(np.abs(r.s - ref) / ref)))
    proj_ok = True
    emb = HashedEmbedder()
    for seed in SEEDS:
        for spec in lc.RunConfig(stream_seed=seed).stream().specs:
            psi = build_subspace(embed_corpus(spec.instructions, emb), 4, spec.skill_id).materialize()
            proj_ok &= np.allclose(psi @ psi, psi, atol=1e-10) and np.allclose(psi, psi.T, atol=1e-12)
            proj_ok &= abs(np.trace(psi) - 4) < 1e-10
    elapsed = time.perf_counter() - t0
    ok = worst_rec <= 1e-6 and worst_sv <= 1e-8 and proj_ok and elapsed < 10
    record(1, ok, f"recon {worst_rec:.1e}, sv rel err {worst_sv:.1e}, projectors ok={proj_ok}, {elapsed:.1f}s")


def test_criterion_2_gradients():
    t0 = time.perf_counter()
    worst = max(joint_gradcheck(seed, hidden=8, layers=2, rank=2) for seed in range(20))
    elapsed = time.perf_counter() - t0
    record(2, worst <= 1e-4 and elapsed < 60, f"worst rel err {worst:.1e} over 20 seeds, {elapsed:.1f}s")


def test_criterion_3_weights():
    rng = np.random.default_rng(3)
    simplex = argmax = True
    for _ in range(1000):
        sims = rng.uniform(-1, 1, size=int(rng.integers(1, 10)))
        w = aggregation_weights(sims, 5.0).weights
        simplex &= abs(w.sum() - 1) < 1e-12 and bool(np.all(w >= 0))
        simplex &= np.allclose(w, weights_loop(sims, 5.0), atol=1e-12)
        if sims.max() > 0:
            for g in (1, 2, 5):
                argmax &= int(np.argmax(aggregation_weights(sims, g).weights)) == int(np.argmax(sims))
    hand = aggregation_weights([0.9, 0.6], 5.0).weights
    hand_ok = np.allclose(hand, [0.8836, 0.1164], atol=1e-4)
    record(3, simplex and argmax and hand_ok, f"simplex={simplex} argmax={argmax} hand={np.round(hand, 4).tolist()}")


def test_criterion_4_frozen_base(grid):
    c = grid["invariance"]
    record(4, c["ok"] and c["stages"] == 8 * len(METHODS) * len(SEEDS), f"{c['stages']} stages checked bitwise")


def test_criterion_5_kb_round_trip(grid, tmp_path):
    kb = grid["runs"]["full", 0]["kb"]
    kbs.save(kb, tmp_path / "a.abk")
    kbs.save(kbs.load(tmp_path / "a.abk"), tmp_path / "b.abk")
    same_bytes = (tmp_path / "a.abk").read_bytes() == (tmp_path / "b.abk").read_bytes()
    three = replace(kb, records=kb.records[:3])
    kbs.save(three, tmp_path / "c.abk")
    back = kbs.load(tmp_path / "c.abk", expect_fingerprint=three.fingerprint)
    fields_ok = back.skill_ids == three.skill_ids and back.meta == three.meta
    for r, q in zip(three.records, back.records):
        fields_ok &= (r.name, r.corpus_digest, r.sr_gt, r.meta) == (q.name, q.corpus_digest, q.sr_gt, q.meta)
        fields_ok &= r.adapter.gates() == q.adapter.gates()
        fields_ok &= np.array_equal(kbs.f32(r.subspace.basis), q.subspace.basis)
        for p, pq in zip(r.adapter.pairs, q.adapter.pairs):
            fields_ok &= np.array_equal(kbs.f32(p.a), pq.a) and np.array_equal(kbs.f32(p.b), pq.b)
        for g, gq in zip(r.adapter.gate_logits, q.adapter.gate_logits):
            fields_ok &= np.array_equal(kbs.f32(g), gq)
    record(5, same_bytes and bool(fields_ok), f"byte-identical={same_bytes} fields={bool(fields_ok)}")


def test_criterion_6_anti_forgetting(grid):
    full, seq = median_fr(grid, "full"), median_fr(grid, "seq-ft")
    secs = sum(grid["runs"][m, s]["seconds"] for m in ("full", "seq-ft") for s in SEEDS)
    ok = full < seq and seq >= 2 * full and secs < 600
    record(6, ok, f"median avg FR full {full:.3f} vs seq-ft {seq:.3f}; {secs:.0f}s for both methods")


def test_criterion_7_ablation_order(grid):
    fr = {m: median_fr(grid, m) for m in METHODS}
    ok = all(fr["full"] <= fr[m] <= fr["seq-ft"] for m in ABLATIONS)
    record(7, ok, "median avg FR " + ", ".join(f"{m} {v:.3f}" for m, v in fr.items()))


def test_criterion_8_open_world(grid):
    per = {m: float(np.median([grid["runs"]["full", s]["report"].summary["holdout_asr"][m] for s in SEEDS]))
           for m in ("aggregate", "top1", "avg")}
    ok = per["aggregate"] >= per["top1"] and per["aggregate"] >= per["avg"]
    record(8, ok, "median holdout ASR " + ", ".join(f"{m} {v:.3f}" for m, v in per.items()))


def test_criterion_9_observations(grid):
    rhos, a_b = [], []
    for s in SEEDS:
        run = grid["runs"]["full", s]
        st = lc.observation_study(run["kb"], run["stream"], grid["embedder"])
        rhos.append(st["spearman_param_semantic"])
        a_b.append((st["mean_a_similarity"], st["mean_b_similarity"]))
    rho = float(np.median(rhos))
    ab_ok = all(a > b for a, b in a_b)
    detail = f"median rho {rho:.3f}; A vs B similarity " + ", ".join(f"{a:.2f}>{b:.2f}" for a, b in a_b)
    record(9, rho > 0 and ab_ok, detail)


def test_criterion_10_routing(grid):
    accs = []
    for s in SEEDS:
        run = grid["runs"]["full", s]
        kb = run["kb"]
        router = lc.Router(kb, grid["embedder"], "aggregate")
        hits = total = 0
        for spec in run["stream"].train:
            for text in spec.instructions:
                hits += kb.records[router.route(text)[2]].skill_id == spec.skill_id
                total += 1
        accs.append(hits / total)
    record(10, min(accs) >= 0.9, "routing accuracy per seed " + ", ".join(f"{a:.3f}" for a in accs))
