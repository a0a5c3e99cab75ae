"""Deterministic instruction embeddings.

The default provider hashes lowercased character n-grams into signed buckets.
``PrecomputedEmbedder`` serves vectors from a JSON file instead, so encoder
outputs produced elsewhere can be dropped in.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .errors import FormatError, UsageError


@dataclass(frozen=True)
class EmbeddingConfig:
    dim: int = 512
    ngram_range: tuple[int, int] = (2, 4)
    seed: int = 0
    normalize: bool = True

    def digest(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass(frozen=True)
class InstructionEmbedding:
    vector: np.ndarray
    source_digest: str

    @property
    def dim(self) -> int:
        return self.vector.shape[0]


def _canon(text: str) -> str:
    return " ".join(text.split()).casefold()


def _bucket(gram: str, seed: int, dim: int) -> tuple[int, float]:
    h = hashlib.blake2b(gram.encode(), digest_size=8, key=seed.to_bytes(8, "little", signed=True)).digest()
    v = int.from_bytes(h, "little")
    return (v >> 1) % dim, (1.0 if v & 1 else -1.0)


def embed(text: str, cfg: EmbeddingConfig = EmbeddingConfig()) -> InstructionEmbedding:
    canon = _canon(text)
    if not canon:
        raise UsageError("cannot embed an empty instruction")
    padded = f" {canon} "
    vec = np.zeros(cfg.dim)
    lo, hi = cfg.ngram_range
    for n in range(lo, hi + 1):
        for i in range(len(padded) - n + 1):
            b, s = _bucket(padded[i : i + n], cfg.seed, cfg.dim)
            vec[b] += s
    if cfg.normalize:
        norm = np.linalg.norm(vec)
        if norm > 0:
            vec /= norm
    digest = hashlib.sha256(f"{canon}|{cfg.digest()}".encode()).hexdigest()[:16]
    return InstructionEmbedding(vec, digest)


class HashedEmbedder:
    def __init__(self, cfg: EmbeddingConfig = EmbeddingConfig()):
        self.cfg = cfg

    @property
    def digest(self) -> str:
        return self.cfg.digest()

    def __call__(self, text: str) -> InstructionEmbedding:
        return embed(text, self.cfg)


class PrecomputedEmbedder:
    """Lookup table loaded from ``{instruction: [floats]}`` JSON."""

    def __init__(self, path, cfg: EmbeddingConfig = EmbeddingConfig(), tol: float = 1e-6):
        self.cfg = cfg
        raw = json.loads(Path(path).read_text())
        if not isinstance(raw, dict):
            raise FormatError("precomputed embedding file must hold a JSON object")
        self.table: dict[str, np.ndarray] = {}
        for text, values in raw.items():
            vec = np.asarray(values, dtype=np.float64)
            if vec.shape != (cfg.dim,):
                raise FormatError(f"embedding for {text!r} has shape {vec.shape}, expected ({cfg.dim},)")
            if cfg.normalize and abs(np.linalg.norm(vec) - 1.0) > tol:
                raise FormatError(f"embedding for {text!r} is not unit-norm")
            self.table[_canon(text)] = vec
        h = hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
        self._digest = f"file:{h}"

    @property
    def digest(self) -> str:
        return self._digest

    def __call__(self, text: str) -> InstructionEmbedding:
        canon = _canon(text)
        if not canon:
            raise UsageError("cannot embed an empty instruction")
        if canon not in self.table:
            raise UsageError(f"no precomputed embedding for {text!r}")
        return InstructionEmbedding(self.table[canon].copy(), f"{self._digest}:{canon}")


def embed_corpus(texts, cfg_or_embedder=EmbeddingConfig()) -> np.ndarray:
    """Stack embeddings row-wise into an M x dim matrix."""
    embedder = cfg_or_embedder
    if isinstance(embedder, EmbeddingConfig):
        embedder = HashedEmbedder(embedder)
    texts = list(texts)
    if not texts:
        raise UsageError("embed_corpus needs at least one instruction")
    rows = []
    for i, t in enumerate(texts):
        if not _canon(t):
            raise UsageError(f"instruction {i} is empty")
        rows.append(embedder(t).vector)
    return np.vstack(rows)
