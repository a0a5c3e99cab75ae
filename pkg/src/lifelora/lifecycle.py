"""Sequential skill training, open-set inference, metrics and reports."""
from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import adapters as ad
from . import gradtape as gt
from . import kbstore as kbs
from . import toymodel as tm
from .embed import EmbeddingConfig, HashedEmbedder, embed_corpus
from .errors import CompatibilityError, UsageError
from .matcore import cosine
from .skillgen import SkillStream, generate_stream
from .subspace import aggregation_weights, build_subspace, similarities

METHODS = ("full", "no-GGM", "no-INA", "no-SOT", "seq-ft", "top1", "avg-pool")
MODES = ("aggregate", "top1", "avg", "latest")
INFERENCE_MODE = {"top1": "top1", "avg-pool": "avg", "seq-ft": "latest"}


@dataclass(frozen=True)
class RunConfig:
    # stream
    stream_seed: int = 0
    n_train_skills: int = 8
    n_holdout: int = 2
    n_paraphrases: int = 8
    train_episodes: int = 256
    eval_episodes: int = 25
    overlap_prob: float = 0.5
    # model
    vocab_size: int = 32
    n_symbols: int = 16
    hidden: int = 32
    layers: int = 4
    base_seed: int = 0
    # method
    rank: int = 8
    subspace_rank: int = 4
    embed_dim: int = 512
    gamma: float = 5.0
    tau: float = 1.0
    lam: float = 0.1
    lam_s: float = 0.01
    ortho_eps: float = 0.01
    lr: float = 1e-2
    epochs: int = 36
    batch_size: int = 16
    method: str = "full"
    train_seed: int = 0
    out_dir: str | None = None

    @classmethod
    def published_preset(cls, **kw) -> "RunConfig":
        """Optimizer settings and subspace rank from the published hyper-parameter table."""
        base = dict(lr=1e-4, epochs=4, batch_size=16, rank=8, subspace_rank=20, n_paraphrases=24, embed_dim=512)
        base.update(kw)
        return cls(**base)

    def validate(self) -> "RunConfig":
        if self.method not in METHODS:
            raise UsageError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        if not 1 <= self.subspace_rank <= min(self.n_paraphrases, self.embed_dim):
            raise UsageError(f"subspace_rank {self.subspace_rank} must lie in [1, min(n_paraphrases, embed_dim)]")
        for name in ("rank", "epochs", "batch_size", "train_episodes", "eval_episodes", "embed_dim"):
            if getattr(self, name) < 1:
                raise UsageError(f"{name} must be >= 1")
        if self.batch_size > self.train_episodes:
            raise UsageError("batch_size exceeds train_episodes")
        if self.tau <= 0 or self.gamma <= 0 or self.lr <= 0:
            raise UsageError("tau, gamma and lr must be positive")
        if min(self.lam, self.lam_s, self.ortho_eps) < 0:
            raise UsageError("regularizer weights must be non-negative")
        return self

    @property
    def inference_mode(self) -> str:
        return INFERENCE_MODE.get(self.method, "aggregate")

    def model_config(self) -> tm.ModelConfig:
        return tm.ModelConfig(self.vocab_size, self.n_symbols, self.hidden, self.layers, base_seed=self.base_seed)

    def embed_config(self) -> EmbeddingConfig:
        return EmbeddingConfig(dim=self.embed_dim)

    def stream(self) -> SkillStream:
        return generate_stream(
            self.stream_seed, self.n_train_skills, self.n_holdout, overlap_prob=self.overlap_prob,
            n_paraphrases=self.n_paraphrases, n_symbols=self.n_symbols,
            n_train_episodes=self.train_episodes, n_eval_episodes=self.eval_episodes,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RunReport:
    config: dict
    skills: list[dict]
    trajectory: list[list[float | None]]
    holdout: dict
    summary: dict
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("wall_clock")
        return d

    @classmethod
    def from_dict(cls, d: dict, wall_clock: float = 0.0) -> "RunReport":
        return cls(d["config"], d["skills"], d["trajectory"], d["holdout"], d["summary"], wall_clock)


# ------------------------------------------------------------------ metrics

def success_rate(hits, total: int) -> float:
    if total < 1:
        raise UsageError("need at least one episode")
    return float(hits) / float(total)


def forgetting_rate(sr_gt: float | None, asr: float) -> float | None:
    """(SR_gt - ASR) / SR_gt; None when the reference rate is zero or missing."""
    if sr_gt is None or sr_gt <= 0.0:
        return None
    return (sr_gt - asr) / sr_gt


def mean_defined(values) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


# ------------------------------------------------------------------ inference

@dataclass
class Router:
    """Embeds queries and builds the adapter the knowledge base offers for them."""

    kb: kbs.KnowledgeBase
    embedder: object
    mode: str = "aggregate"
    gamma: float = 5.0
    _cache: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise UsageError(f"unknown inference mode {self.mode!r}")
        if len(self.kb) == 0:
            raise UsageError("knowledge base is empty")
        if getattr(self.embedder, "digest", None) != self.kb.embedding_digest:
            raise CompatibilityError(
                f"embedding digest {getattr(self.embedder, 'digest', None)} does not match knowledge base "
                f"{self.kb.embedding_digest}"
            )
        self._subspaces = [r.subspace for r in self.kb.records]
        self._adapters = [r.adapter for r in self.kb.records]

    def route(self, instruction: str):
        """(adapter, omega, top1 index) for one instruction; cached per text."""
        hit = self._cache.get(instruction)
        if hit is not None:
            return hit
        sims = similarities(self.embedder(instruction).vector, self._subspaces)
        omega = aggregation_weights(sims, self.gamma).weights
        top = int(np.argmax(omega))
        if self.mode == "latest":
            adapter, omega, top = self._adapters[-1], np.eye(len(omega))[-1], len(omega) - 1
        elif self.mode == "top1":
            adapter = ad.aggregate_adapters(self._adapters, np.eye(len(omega))[top], top)
        elif self.mode == "avg":
            adapter = ad.aggregate_adapters(self._adapters, np.full(len(omega), 1.0 / len(omega)), top)
        else:
            adapter = ad.aggregate_adapters(self._adapters, omega, top)
        out = (adapter, omega, top)
        self._cache[instruction] = out
        return out


@dataclass(frozen=True)
class InferenceResult:
    tokens: tuple[int, ...]
    omega: np.ndarray
    top1_skill: int
    gates: tuple[int, ...]


def infer(kb, model: tm.BaseModel, embedder, instruction: str, input_tokens, mode: str = "aggregate",
          gamma: float = 5.0, router: Router | None = None) -> InferenceResult:
    router = router or Router(kb, embedder, mode, gamma)
    adapter, omega, top = router.route(instruction)
    prompt = model.cfg.vocab.prompt(instruction, input_tokens)
    toks = tm.generate(model, adapter, prompt)
    gates = adapter.top1_gates if isinstance(adapter, ad.MergedAdapter) else tuple(adapter.gates())
    return InferenceResult(toks, omega, kb.records[top].skill_id, gates)


def evaluate_skill(router: Router, model: tm.BaseModel, episodes) -> tuple[float, np.ndarray]:
    """ASR over the episodes and the mean Omega used. The skill id is only used by the caller to score."""
    hits = 0
    omegas = []
    for ep in episodes:
        adapter, omega, _ = router.route(ep.instruction)
        hits += tm.generate(model, adapter, ep.prompt) == ep.target
        omegas.append(omega)
    return success_rate(hits, len(episodes)), np.mean(omegas, axis=0)


def evaluate(kb, stream: SkillStream, model: tm.BaseModel, embedder, mode: str = "aggregate",
             gamma: float = 5.0, episodes: int | None = None, skills=None) -> dict:
    """Per-skill ASR and FR against each record's stored SR_gt.

    The most recently stored skill has no evaluation after its own snapshot yet, so its FR is None.
    """
    router = Router(kb, embedder, mode, gamma)
    stored = {r.skill_id: r.sr_gt for r in kb.records[:-1]}
    learned = set(kb.skill_ids)
    specs = skills if skills is not None else [s for s in stream.train if s.skill_id in learned]
    out = {}
    for spec in specs:
        asr, omega = evaluate_skill(router, model, stream.episodes(spec, "eval", model.cfg.vocab, episodes))
        out[spec.skill_id] = {"asr": asr, "fr": forgetting_rate(stored.get(spec.skill_id), asr), "omega": omega}
    return out


def routing_accuracy(kb, stream: SkillStream, embedder) -> float:
    """Share of stored skills' instructions whose argmax-Omega skill is the right one."""
    subspaces = [r.subspace for r in kb.records]
    ids = kb.skill_ids
    hits = total = 0
    for spec in stream.train:
        if spec.skill_id not in ids:
            continue
        for text in spec.instructions:
            sims = similarities(embedder(text).vector, subspaces)
            hits += ids[int(np.argmax(sims))] == spec.skill_id
            total += 1
    if total == 0:
        raise UsageError("no stored skill has instructions in this stream")
    return hits / total


# ------------------------------------------------------------------ training

def _adapter_params(adapter: ad.SkillAdapter) -> dict:
    params = {}
    for l, p in enumerate(adapter.pairs):
        params[("a", l)] = p.a
        params[("b", l)] = p.b
        params[("g", l)] = adapter.gate_logits[l]
    return params


def joint_loss(tape: gt.Tape, model: tm.BaseModel, x, y, ids: dict, prior_bs, *, lam: float, lam_s: float,
               eps: float, tau: float, noise=None, gated: bool = True, hard: bool = True, batch: int = 1):
    """Record nll/batch + lam * R + lam_s * L_s; returns (loss, nll, gate bits)."""
    n_layers = model.cfg.layers
    gate_ids, soft_ids, bits = None, [], []
    if gated:
        gate_ids = []
        for l in range(n_layers):
            bit, gid = gt.st_gumbel_gate(tape, ids[("g", l)], noise[l], tau, hard=hard)
            gate_ids.append(gid)
            soft_ids.append(tape.nodes[gid].parents[0])
            bits.append(bit)
    logits = tm.tape_forward(
        tape, model, x, [ids[("a", l)] for l in range(n_layers)], [ids[("b", l)] for l in range(n_layers)], gate_ids
    )
    nll = tape.scale(tape.softmax_xent(logits, y), 1.0 / batch)
    loss = nll
    if lam > 0 and prior_bs:
        reg = ad.orthogonality_regularizer_tape(tape, [ids[("b", l)] for l in range(n_layers)], prior_bs, eps)
        loss = tape.add(loss, tape.scale(reg, lam))
    if gated and lam_s > 0:
        loss = tape.add(loss, tape.scale(ad.sparsity_penalty_tape(tape, soft_ids), lam_s))
    return loss, nll, bits


def train_skill(model: tm.BaseModel, cfg: RunConfig, adapter: ad.SkillAdapter, episodes, prior_bs, seed,
                gated: bool, lam: float) -> tuple[ad.SkillAdapter, dict]:
    """Optimize one adapter in place on a skill's training episodes; base weights stay untouched."""
    x_all, y_all, owner = tm.episode_batch(model.cfg, episodes)
    starts = np.searchsorted(owner, np.arange(len(episodes) + 1))
    rows_of = [np.arange(starts[i], starts[i + 1]) for i in range(len(episodes))]
    params = _adapter_params(adapter)
    opt = gt.Adam(lr=cfg.lr)
    rng = np.random.default_rng(seed)
    losses, bits_seen = [], []
    for _ in range(cfg.epochs):
        order = rng.permutation(len(episodes))
        for s in range(0, len(order) - cfg.batch_size + 1, cfg.batch_size):
            rows = np.concatenate([rows_of[i] for i in order[s : s + cfg.batch_size]])
            tape = gt.Tape()
            ids = {k: tape.param(v) for k, v in params.items() if gated or k[0] != "g"}
            noise = [gt.gumbel_noise(rng) for _ in range(model.cfg.layers)] if gated else None
            loss, nll, bits = joint_loss(
                tape, model, x_all[rows], y_all[rows], ids, prior_bs, lam=lam, lam_s=cfg.lam_s,
                eps=cfg.ortho_eps, tau=cfg.tau, noise=noise, gated=gated, batch=cfg.batch_size,
            )
            grads = gt.backward(tape, loss)
            opt.step(params, {k: grads[i] for k, i in ids.items()})
            losses.append(float(tape.value(nll)[0, 0]))
            bits_seen.append(bits)
    k = min(16, len(losses))
    stats = {
        "early_loss": float(np.mean(losses[:k])),
        "final_loss": float(np.mean(losses[-k:])),
        "steps": len(losses),
        "inject_rate": np.mean(bits_seen, axis=0).round(6).tolist() if gated else [1.0] * model.cfg.layers,
    }
    return adapter, stats


def _stored(adapter: ad.SkillAdapter, gated: bool) -> ad.SkillAdapter:
    """Round to storage precision, then freeze gates from the rounded logits."""
    logits = [kbs.f32(g) for g in adapter.gate_logits] if gated else [ad.FORCED_ON_LOGITS.copy() for _ in adapter.pairs]
    pairs = [ad.AdapterPair(p.layer, kbs.f32(p.a), kbs.f32(p.b)) for p in adapter.pairs]
    return ad.SkillAdapter(adapter.skill_id, pairs, logits).frozen()


def _digest(texts) -> str:
    return hashlib.sha256("\n".join(texts).encode()).hexdigest()[:16]


def train_stream(cfg: RunConfig, stream: SkillStream | None = None, model: tm.BaseModel | None = None,
                 embedder=None, on_stage=None):
    """Learn the training skills one after another; returns (kb, report)."""
    cfg.validate()
    t0 = time.perf_counter()
    stream = stream or cfg.stream()
    model = model or tm.BaseModel(cfg.model_config())
    embedder = embedder or HashedEmbedder(cfg.embed_config())
    mode = cfg.inference_mode
    gated = cfg.method not in ("no-GGM", "seq-ft")
    lam = 0.0 if cfg.method in ("no-SOT", "seq-ft") else cfg.lam
    fingerprint = model.cfg.fingerprint(cfg.rank, cfg.embed_dim)
    kb = kbs.KnowledgeBase(
        fingerprint, embedder.digest, (), {"method": cfg.method, "inference_mode": mode, "config": cfg.to_dict()}
    )
    shapes = model.cfg.layer_shapes()
    vocab = model.cfg.vocab
    specs = stream.train
    trajectory: list[list[float | None]] = []
    skill_rows = []
    current = None
    for t, spec in enumerate(specs):
        queries = embed_corpus(spec.instructions, embedder)
        omega_init = None
        if cfg.method == "seq-ft" and current is not None:
            adapter = replace(current.copy(), skill_id=spec.skill_id, gate_decisions=None)
        elif len(kb) == 0 or cfg.method == "no-INA":
            adapter = ad.init_first_skill(shapes, cfg.rank, seed=hash_seed(cfg.train_seed, spec.skill_id, 1),
                                          skill_id=spec.skill_id)
        else:
            adapter, om = ad.inherit_shared(kb.records, queries, cfg.gamma, shapes, spec.skill_id)
            omega_init = om.weights.round(6).tolist()
        prior_bs = [[p.b for p in r.adapter.pairs] for r in kb.records] if lam > 0 else []
        adapter, stats = train_skill(
            model, cfg, adapter, stream.episodes(spec, "train", vocab), prior_bs,
            hash_seed(cfg.train_seed, spec.skill_id, 2), gated, lam,
        )
        stored = _stored(adapter, gated)
        current = stored
        basis = build_subspace(queries, cfg.subspace_rank, spec.skill_id)
        basis = replace(basis, basis=kbs.f32(basis.basis))
        rec = kbs.SkillRecord(spec.skill_id, spec.name, _digest(spec.instructions), stored, basis, None,
                              {"early_loss": round(stats["early_loss"], 6), "final_loss": round(stats["final_loss"], 6)})
        kb = kbs.append_record(kb, rec)
        # score every learned skill with the knowledge base as it stands after this stage
        res = evaluate(kb, stream, model, embedder, mode, cfg.gamma)
        row = [res[s.skill_id]["asr"] if s.skill_id in res else None for s in specs]
        trajectory.append(row)
        sr_gt = row[t]
        kb = replace(kb, records=kb.records[:-1] + (replace(rec, sr_gt=sr_gt),))
        skill_rows.append({"skill_id": spec.skill_id, "name": spec.name, "holdout": False, "sr_gt": sr_gt,
                           "gates": list(stored.gates()), "omega_init": omega_init,
                           "early_loss": round(stats["early_loss"], 6), "final_loss": round(stats["final_loss"], 6),
                           "inject_rate": stats["inject_rate"]})
        if on_stage is not None:
            on_stage(t, kb, row)
    final = evaluate(kb, stream, model, embedder, mode, cfg.gamma)
    for row in skill_rows:
        res = final[row["skill_id"]]
        row["asr"] = res["asr"]
        row["fr"] = res["fr"]
        row["omega"] = res["omega"].round(6).tolist()
    holdout = {}
    for m in ("aggregate", "top1", "avg") if mode != "latest" else ("latest",):
        res = evaluate(kb, stream, model, embedder, m, cfg.gamma, skills=stream.holdout)
        holdout[m] = {str(k): v["asr"] for k, v in res.items()}
        for spec in stream.holdout:
            if m == "aggregate" or m == "latest":
                skill_rows.append({"skill_id": spec.skill_id, "name": spec.name, "holdout": True, "sr_gt": None,
                                   "asr": res[spec.skill_id]["asr"], "fr": None,
                                   "omega": res[spec.skill_id]["omega"].round(6).tolist()})
    train_rows = [r for r in skill_rows if not r["holdout"]]
    summary = {
        "avg_asr": float(np.mean([r["asr"] for r in train_rows])),
        "avg_fr": mean_defined(r["fr"] for r in train_rows),
        "avg_sr_gt": float(np.mean([r["sr_gt"] for r in train_rows])),
        "routing_accuracy": routing_accuracy(kb, stream, embedder),
        "holdout_asr": {m: float(np.mean(list(v.values()))) if v else None for m, v in holdout.items()},
    }
    report = RunReport(cfg.to_dict(), skill_rows, trajectory, holdout, summary, time.perf_counter() - t0)
    return kb, report


def session_from_kb(kb: kbs.KnowledgeBase) -> tuple[RunConfig, tm.BaseModel, HashedEmbedder]:
    """Rebuild config, base model and embedder recorded with a knowledge base; verifies the fingerprint."""
    try:
        cfg = RunConfig.from_dict(kb.meta["config"])
    except KeyError as exc:
        raise CompatibilityError("knowledge base carries no run config") from exc
    model = tm.BaseModel(cfg.model_config())
    expect = model.cfg.fingerprint(cfg.rank, cfg.embed_dim)
    if expect != kb.fingerprint:
        raise CompatibilityError(f"knowledge base fingerprint {kb.fingerprint} does not match session {expect}")
    return cfg, model, HashedEmbedder(cfg.embed_config())


def hash_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


# ------------------------------------------------------------------ observation study

def _offdiag(m: np.ndarray) -> np.ndarray:
    return m[np.triu_indices(m.shape[0], k=1)]


def _cos_matrix(vectors) -> np.ndarray:
    n = len(vectors)
    out = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            out[i, j] = out[j, i] = cosine(vectors[i], vectors[j])
    return out


def observation_study(kb, stream: SkillStream, embedder) -> dict:
    """Parameter-vs-semantic similarity, A-vs-B factor similarity, per-layer update profile."""
    if len(kb) < 4:
        raise UsageError("observation study needs at least 4 stored skills")
    specs = {s.skill_id: s for s in stream.specs}
    recs = list(kb.records)
    deltas = [np.concatenate([p.delta().ravel() for p in r.adapter.pairs]) for r in recs]
    means = [embed_corpus(specs[r.skill_id].instructions, embedder).mean(axis=0) for r in recs]
    a_vecs = [np.concatenate([p.a.ravel() for p in r.adapter.pairs]) for r in recs]
    b_vecs = [np.concatenate([p.b.ravel() for p in r.adapter.pairs]) for r in recs]
    param = _cos_matrix(deltas)
    sem = _cos_matrix(means)
    truth = stream.relatedness([specs[r.skill_id] for r in recs])
    rho = spearmanr(_offdiag(param), _offdiag(sem)).statistic
    rho_truth = spearmanr(_offdiag(sem), _offdiag(truth)).statistic
    n_layers = recs[0].adapter.n_layers
    profile = [float(np.mean([np.abs(r.adapter.pairs[l].delta()).mean() for r in recs])) for l in range(n_layers)]
    return {
        "skill_ids": kb.skill_ids,
        "param_similarity": param.round(6).tolist(),
        "semantic_similarity": sem.round(6).tolist(),
        "relatedness": truth.round(6).tolist(),
        "spearman_param_semantic": None if np.isnan(rho) else float(rho),
        "spearman_semantic_relatedness": None if np.isnan(rho_truth) else float(rho_truth),
        "mean_a_similarity": float(_offdiag(_cos_matrix(a_vecs)).mean()),
        "mean_b_similarity": float(_offdiag(_cos_matrix(b_vecs)).mean()),
        "layer_profile": profile,
    }


# ------------------------------------------------------------------ reports

def emit_report(report: RunReport, fmt: str, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if fmt == "json":
        p = out / "report.json"
        p.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
        t = out / "timing.json"
        t.write_text(json.dumps({"wall_clock_s": round(report.wall_clock, 3)}) + "\n")
        return [p, t]
    if fmt == "csv":
        p = out / "skills.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["skill_id", "name", "split", "sr_gt", "asr", "fr"])
            for r in report.skills:
                w.writerow([r["skill_id"], r["name"], "holdout" if r["holdout"] else "train",
                            _cell(r["sr_gt"]), _cell(r["asr"]), "undefined" if r["fr"] is None and not r["holdout"]
                            else _cell(r["fr"])])
        return [p]
    if fmt == "plotdata":
        p = out / "trajectory.csv"
        names = [r["name"] for r in report.skills if not r["holdout"]]
        with p.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["stage", *names])
            for stage, row in enumerate(report.trajectory):
                w.writerow([stage + 1, *[_cell(v) for v in row]])
        return [p]
    raise UsageError(f"unknown report format {fmt!r}; choose json, csv or plotdata")


def _cell(v) -> str:
    return "" if v is None else f"{v:.6g}"


def load_report(path) -> RunReport:
    path = Path(path)
    d = json.loads(path.read_text())
    timing = path.with_name("timing.json")
    wall = json.loads(timing.read_text())["wall_clock_s"] if timing.exists() else 0.0
    return RunReport.from_dict(d, wall)


def run_grid(base: RunConfig, methods, seeds, progress=None) -> dict:
    """Train every (method, seed) pair; returns per-method lists of summaries."""
    out: dict = {m: [] for m in methods}
    for m in methods:
        for s in seeds:
            cfg = replace(base, method=m, stream_seed=s)
            _, rep = train_stream(cfg)
            out[m].append(rep.summary)
            if progress is not None:
                progress(m, s, rep)
    return out
