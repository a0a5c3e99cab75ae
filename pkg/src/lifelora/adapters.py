"""Low-rank adapters: init, inheritance, orthogonality, gating, aggregation."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import gradtape as gt
from .errors import ShapeError, UsageError
from .subspace import AggregationWeights, aggregation_weights, similarities

ORTHO_EPS = 0.01
ACTIVE_WEIGHT = 1e-6
# logits stored for a gate that is forced open: argmax picks inject
FORCED_ON_LOGITS = np.array([[0.0, 1.0]])


@dataclass
class AdapterPair:
    layer: int
    a: np.ndarray  # r x in
    b: np.ndarray  # out x r

    def __post_init__(self):
        if self.a.ndim != 2 or self.b.ndim != 2 or self.b.shape[1] != self.a.shape[0]:
            raise ShapeError(f"layer {self.layer}: b {self.b.shape} and a {self.a.shape} do not chain")

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    def delta(self) -> np.ndarray:
        return self.b @ self.a


def freeze_decisions(gate_logits) -> tuple[int, ...]:
    """Noise-free hard gate per layer: 1 iff the inject logit is strictly larger."""
    return tuple(int(g[0, 1] > g[0, 0]) for g in gate_logits)


@dataclass
class SkillAdapter:
    skill_id: int
    pairs: list[AdapterPair]
    gate_logits: list[np.ndarray] = field(default_factory=list)
    gate_decisions: tuple[int, ...] | None = None

    def __post_init__(self):
        if not self.gate_logits:
            self.gate_logits = [np.zeros((1, 2)) for _ in self.pairs]
        if len(self.gate_logits) != len(self.pairs):
            raise ShapeError("one gate per layer required")

    @property
    def n_layers(self) -> int:
        return len(self.pairs)

    def frozen(self) -> "SkillAdapter":
        return replace(self, gate_decisions=freeze_decisions(self.gate_logits))

    def gates(self) -> tuple[int, ...]:
        return self.gate_decisions if self.gate_decisions is not None else freeze_decisions(self.gate_logits)

    def effective_deltas(self) -> list[np.ndarray]:
        return [gated_delta(p, g) for p, g in zip(self.pairs, self.gates())]

    def copy(self) -> "SkillAdapter":
        return SkillAdapter(
            self.skill_id,
            [AdapterPair(p.layer, p.a.copy(), p.b.copy()) for p in self.pairs],
            [g.copy() for g in self.gate_logits],
            self.gate_decisions,
        )


def kaiming_uniform(rng: np.random.Generator, rows: int, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(rows, fan_in))


def init_first_skill(shapes, r: int, seed: int, skill_id: int = 0) -> SkillAdapter:
    """Kaiming-uniform A, zero B, zero gate logits. ``shapes`` lists (out, in) per layer."""
    if r < 1:
        raise UsageError("adapter rank must be >= 1")
    rng = np.random.default_rng(seed)
    pairs = [AdapterPair(l, kaiming_uniform(rng, r, fin), np.zeros((fout, r))) for l, (fout, fin) in enumerate(shapes)]
    return SkillAdapter(skill_id, pairs)


def mix_a(a_sets, omega) -> list[np.ndarray]:
    """Per-layer weighted sum of prior A factors; ``a_sets[g][l]`` is skill g, layer l."""
    w = np.asarray(getattr(omega, "weights", omega), dtype=np.float64)
    if len(a_sets) == 0:
        raise UsageError("no prior adapters to inherit from")
    if len(a_sets) != w.size:
        raise ShapeError(f"{len(a_sets)} adapters vs {w.size} weights")
    n_layers = len(a_sets[0])
    out = []
    for l in range(n_layers):
        acc = np.zeros_like(a_sets[0][l])
        for g, a in enumerate(a_sets):
            if a[l].shape != acc.shape:
                raise ShapeError(f"layer {l}: A shape {a[l].shape} vs {acc.shape}")
            acc = acc + w[g] * a[l]
        out.append(acc)
    return out


def inheritance_weights(records, query_vectors, gamma: float) -> AggregationWeights:
    """Omega for a new skill: mean subspace similarity of its instructions, then the gamma rule."""
    if not records:
        raise UsageError("inheritance needs a non-empty knowledge base")
    subspaces = [rec.subspace for rec in records]
    sims = np.mean([similarities(q, subspaces) for q in query_vectors], axis=0)
    return aggregation_weights(sims, gamma)


def inherit_shared(records, query_vectors, gamma: float, shapes, skill_id: int) -> tuple[SkillAdapter, AggregationWeights]:
    """New adapter whose A factors mix the stored ones by Omega and whose B is zero."""
    omega = inheritance_weights(records, query_vectors, gamma)
    a_init = mix_a([[p.a for p in rec.adapter.pairs] for rec in records], omega)
    pairs = [AdapterPair(l, a, np.zeros((shape[0], a.shape[0]))) for l, (a, shape) in enumerate(zip(a_init, shapes))]
    return SkillAdapter(skill_id, pairs), omega


def _unit(m: np.ndarray, eps: float) -> np.ndarray:
    return m / (np.sqrt(np.sum(m * m)) + eps)


def orthogonality_regularizer(current_b, prior_bs, eps: float = ORTHO_EPS) -> float:
    """Sum over prior skills and layers of tr(unit(B_i)^T unit(B_t))."""
    total = 0.0
    for prior in prior_bs:
        if len(prior) != len(current_b):
            raise ShapeError("prior adapter layer count differs")
        for bi, bt in zip(prior, current_b):
            if bi.shape != bt.shape:
                raise ShapeError(f"B shape {bi.shape} vs {bt.shape}")
            total += float(np.sum(_unit(bi, eps) * _unit(bt, eps)))
    return total


def orthogonality_regularizer_tape(tape: gt.Tape, current_b_ids, prior_bs, eps: float = ORTHO_EPS) -> int:
    """Tape version; priors enter as constants. Normalized priors are pre-summed per layer."""
    if not prior_bs:
        return tape.const([[0.0]])
    terms = []
    for l, bid in enumerate(current_b_ids):
        shape = tape.value(bid).shape
        acc = np.zeros(shape)
        for prior in prior_bs:
            if prior[l].shape != shape:
                raise ShapeError(f"B shape {prior[l].shape} vs {shape}")
            acc += _unit(prior[l], eps)
        terms.append(tape.trace_product(tape.const(acc), tape.frob_normalize(bid, eps)))
    out = terms[0]
    for t in terms[1:]:
        out = tape.add(out, t)
    return out


def gated_delta(pair: AdapterPair, gate: float) -> np.ndarray:
    if not 0.0 <= gate <= 1.0:
        raise UsageError(f"gate must lie in [0, 1], got {gate}")
    if gate == 0.0:
        return np.zeros((pair.b.shape[0], pair.a.shape[1]))
    d = pair.delta()
    return d if gate == 1.0 else gate * d


def sparsity_penalty(gates) -> float:
    return float(np.sum(np.asarray(gates, dtype=np.float64)))


def sparsity_penalty_tape(tape: gt.Tape, soft_gate_ids) -> int:
    out = soft_gate_ids[0]
    for g in soft_gate_ids[1:]:
        out = tape.add(out, g)
    return out


@dataclass
class MergedAdapter:
    """Weighted sum of gate-masked skill deltas; injected under the Top-1 skill's gates."""

    deltas: list[np.ndarray]
    weights: np.ndarray
    any_gates: tuple[int, ...]
    top1: int
    top1_gates: tuple[int, ...]

    def effective_deltas(self) -> list[np.ndarray]:
        return [d if g else np.zeros_like(d) for d, g in zip(self.deltas, self.top1_gates)]


def aggregate_adapters(adapters, omega, top1: int | None = None) -> MergedAdapter:
    """Merge N skill adapters; ``top1`` defaults to argmax of ``omega``."""
    w = np.asarray(getattr(omega, "weights", omega), dtype=np.float64).ravel()
    if len(adapters) == 0 or len(adapters) != w.size:
        raise ShapeError(f"{len(adapters)} adapters vs {w.size} weights")
    n_layers = adapters[0].n_layers
    deltas = []
    for l in range(n_layers):
        shape = (adapters[0].pairs[l].b.shape[0], adapters[0].pairs[l].a.shape[1])
        acc = np.zeros(shape)
        for ad, wt in zip(adapters, w):
            if ad.n_layers != n_layers:
                raise ShapeError("adapters disagree on layer count")
            p = ad.pairs[l]
            if (p.b.shape[0], p.a.shape[1]) != shape:
                raise ShapeError(f"layer {l}: delta shape mismatch")
            if ad.gates()[l] and wt != 0.0:
                acc = acc + wt * p.delta()
        deltas.append(acc)
    any_gates = tuple(
        int(any(ad.gates()[l] and wt > ACTIVE_WEIGHT for ad, wt in zip(adapters, w))) for l in range(n_layers)
    )
    top = int(np.argmax(w)) if top1 is None else int(top1)
    return MergedAdapter(deltas, w, any_gates, top, tuple(adapters[top].gates()))
