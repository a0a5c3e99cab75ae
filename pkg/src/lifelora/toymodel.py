"""Frozen random base model with per-layer low-rank injection.

Each position is encoded from its prefix only: a bag of the instruction-word
tokens, the previous token, the decode step, and a window of input tokens read
at offsets anchored to both ends of the input. The window is one-hot and is
written into one of four blocks chosen by the parities of the decode step and
the input length, so pairwise swaps compose with reversal. A stack of tanh
layers maps that feature vector to next-token logits. The base weights are
drawn once from a seed and never trained; skills live entirely in the adapters.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import numpy as np

from . import gradtape as gt
from .errors import ShapeError, UsageError
from .skillgen import Episode, Vocab


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 32
    n_symbols: int = 16
    hidden: int = 32
    layers: int = 4
    max_steps: int = 16
    window: int = 2
    base_seed: int = 0
    init_scale: float = 1.5

    def __post_init__(self):
        if self.layers < 1 or self.hidden < 1:
            raise UsageError("model needs at least one layer of positive width")
        Vocab(self.vocab_size, self.n_symbols)

    @property
    def vocab(self) -> Vocab:
        return Vocab(self.vocab_size, self.n_symbols)

    @property
    def n_offsets(self) -> int:
        return 2 * self.window + 1

    @property
    def head_dim(self) -> int:
        return 4 * 2 * self.n_offsets * (self.n_symbols + 1)

    @property
    def feature_dim(self) -> int:
        return self.head_dim + self.max_steps + 2 * self.vocab_size

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(out, in) shape of each adapted weight."""
        return [(self.hidden, self.feature_dim)] + [(self.hidden, self.hidden)] * (self.layers - 1)

    def fingerprint(self, rank: int, embed_dim: int) -> dict:
        return {
            "V": self.vocab_size,
            "h": self.hidden,
            "L": self.layers,
            "r": rank,
            "d": embed_dim,
            "n_symbols": self.n_symbols,
            "window": self.window,
            "base": self.base_digest(),
        }

    def base_digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


class BaseModel:
    """Frozen base weights. Arrays are marked read-only."""

    def __init__(self, cfg: ModelConfig = ModelConfig()):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.base_seed)
        self.weights, self.biases = [], []
        for out_dim, in_dim in cfg.layer_shapes():
            self.weights.append(rng.normal(0.0, cfg.init_scale / np.sqrt(in_dim), size=(out_dim, in_dim)))
            self.biases.append(rng.normal(0.0, 0.1, size=(1, out_dim)))
        self.head = rng.normal(0.0, 1.0 / np.sqrt(cfg.hidden), size=(cfg.vocab_size, cfg.hidden))
        self.head_bias = np.zeros((1, cfg.vocab_size))
        for arr in self.arrays():
            arr.setflags(write=False)

    def arrays(self) -> list[np.ndarray]:
        return [*self.weights, *self.biases, self.head, self.head_bias]

    def snapshot(self) -> bytes:
        return b"".join(a.tobytes() for a in self.arrays())


# ---------------------------------------------------------------- features

def _check_tokens(cfg: ModelConfig, tokens) -> np.ndarray:
    t = np.asarray(tokens, dtype=np.int64).ravel()
    if t.size == 0:
        raise UsageError("empty token sequence")
    if t.min() < 0 or t.max() >= cfg.vocab_size:
        raise UsageError(f"token ids must lie in [0, {cfg.vocab_size})")
    return t


def _row(cfg: ModelConfig, bag: np.ndarray, inp, k: int | None, prev: int) -> np.ndarray:
    """Feature vector for one position. ``k`` is the decode step (None before GO)."""
    f = np.zeros(cfg.feature_dim)
    n = len(inp)
    empty = cfg.n_symbols
    step = 0 if k is None else k
    block = ((step % 2) * 2 + n % 2) * 2
    for anchor, base in ((0, step), (1, n - 1 - step)):
        for j in range(cfg.n_offsets):
            idx = base + j - cfg.window
            tok = inp[idx] if 0 <= idx < n else empty
            if tok >= cfg.n_symbols:
                tok = empty
            f[((block + anchor) * cfg.n_offsets + j) * (cfg.n_symbols + 1) + tok] = 1.0
    off = cfg.head_dim
    if k is not None:
        f[off + min(k, cfg.max_steps - 1)] = 1.0
    off += cfg.max_steps
    f[off + prev] = 1.0
    off += cfg.vocab_size
    f[off : off + cfg.vocab_size] = bag
    return f


def _bag(cfg: ModelConfig, words) -> np.ndarray:
    bag = np.zeros(cfg.vocab_size)
    if len(words):
        np.add.at(bag, np.asarray(words, dtype=np.int64), 1.0)
        bag /= len(words)
    return bag


def encode(cfg: ModelConfig, tokens) -> np.ndarray:
    """Causal feature matrix (len x F): row i is a function of tokens[: i + 1]."""
    t = _check_tokens(cfg, tokens)
    voc = cfg.vocab
    rows = []
    words: list[int] = []
    inp: list[int] = []
    phase = 0  # 0 instruction, 1 input, 2 decoding
    k = None
    for tok in t.tolist():
        if phase == 0:
            if tok == voc.sep:
                phase = 1
            else:
                words.append(tok)
        elif phase == 1:
            if tok == voc.go:
                phase, k = 2, 0
            else:
                inp.append(tok)
        else:
            k += 1
        rows.append(_row(cfg, _bag(cfg, words), inp, k, tok))
    return np.vstack(rows)


def decode_features(cfg: ModelConfig, prompt, outputs) -> np.ndarray:
    """Rows for the GO position and each emitted output token (len(outputs) + 1 rows).

    Equals the matching tail of ``encode(prompt + outputs)``.
    """
    t = _check_tokens(cfg, prompt)
    voc = cfg.vocab
    seps = np.flatnonzero(t == voc.sep)
    if seps.size == 0 or t[-1] != voc.go:
        raise UsageError("prompt must contain a separator and end with the go token")
    s = int(seps[0])
    words, inp = t[:s].tolist(), t[s + 1 : -1].tolist()
    bag = _bag(cfg, words)
    prevs = [voc.go] + list(outputs)
    return np.vstack([_row(cfg, bag, inp, k, int(p)) for k, p in enumerate(prevs)])


def episode_batch(cfg: ModelConfig, episodes: list[Episode]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Teacher-forced feature rows, labels and the owning episode index of each row."""
    feats, labels, owner = [], [], []
    end = cfg.vocab.end
    for i, ep in enumerate(episodes):
        feats.append(decode_features(cfg, ep.prompt, ep.target))
        labels.extend(list(ep.target) + [end])
        owner.extend([i] * (len(ep.target) + 1))
    return np.vstack(feats), np.asarray(labels, dtype=np.int64), np.asarray(owner, dtype=np.int64)


# ---------------------------------------------------------------- forward

def _deltas_of(model: BaseModel, adapter) -> list:
    if adapter is None:
        return [None] * model.cfg.layers
    deltas = adapter.effective_deltas()
    if len(deltas) != model.cfg.layers:
        raise ShapeError(f"adapter has {len(deltas)} layers, model has {model.cfg.layers}")
    for d, shape in zip(deltas, model.cfg.layer_shapes()):
        if d is not None and d.shape != shape:
            raise ShapeError(f"adapter delta {d.shape} vs layer {shape}")
    return deltas


def forward_features(model: BaseModel, x: np.ndarray, deltas=None) -> np.ndarray:
    h = x
    deltas = deltas or [None] * model.cfg.layers
    for w, b, d in zip(model.weights, model.biases, deltas):
        w_eff = w if d is None else w + d
        h = np.tanh(h @ w_eff.T + b)
    return h @ model.head.T + model.head_bias


def forward(model: BaseModel, adapter, tokens) -> np.ndarray:
    """Per-position logits (len x V) with the adapter's gated deltas injected."""
    return forward_features(model, encode(model.cfg, tokens), _deltas_of(model, adapter))


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def nll_loss(logits, targets) -> float:
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ShapeError(f"nll_loss: logits {logits.shape} vs targets {targets.shape}")
    return float(-log_softmax(logits)[np.arange(len(targets)), targets].sum())


def generate(model: BaseModel, adapter, prompt, max_steps: int | None = None) -> tuple[int, ...]:
    """Greedy decode until the end token or ``max_steps`` tokens; ties pick the lowest id."""
    cfg = model.cfg
    max_steps = cfg.max_steps if max_steps is None else max_steps
    if max_steps < 1:
        raise UsageError("max_steps must be >= 1")
    deltas = _deltas_of(model, adapter)
    w_eff = [w if d is None else w + d for w, d in zip(model.weights, deltas)]
    t = _check_tokens(cfg, prompt)
    voc = cfg.vocab
    s = int(np.flatnonzero(t == voc.sep)[0]) if np.any(t == voc.sep) else None
    if s is None or t[-1] != voc.go:
        raise UsageError("prompt must contain a separator and end with the go token")
    bag = _bag(cfg, t[:s].tolist())
    inp = t[s + 1 : -1].tolist()
    out: list[int] = []
    prev = voc.go
    for k in range(max_steps):
        h = _row(cfg, bag, inp, k, prev)[None, :]
        for w, b in zip(w_eff, model.biases):
            h = np.tanh(h @ w.T + b)
        nxt = int(np.argmax(h @ model.head.T + model.head_bias))
        if nxt == voc.end:
            break
        out.append(nxt)
        prev = nxt
    return tuple(out)


def tape_forward(tape: gt.Tape, model: BaseModel, x, a_ids, b_ids, gate_ids=None) -> int:
    """Record the adapted forward pass; returns the logits node id.

    The low-rank path is evaluated as ``(x A^T) B^T`` so ``B A`` is never formed.
    ``gate_ids`` holds 1x1 gate nodes (None means always inject).
    """
    h = tape.const(x)
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        base = tape.matmul(h, tape.const(w.T))
        low = tape.matmul(tape.matmul(h, tape.transpose(a_ids[l])), tape.transpose(b_ids[l]))
        if gate_ids is not None and gate_ids[l] is not None:
            low = tape.mul_scalar(gate_ids[l], low)
        h = tape.tanh(tape.add(tape.add(base, low), tape.const(b)))
    return tape.add(tape.matmul(h, tape.const(model.head.T)), tape.const(model.head_bias))
