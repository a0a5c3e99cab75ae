"""Skill semantic subspaces and similarity-weighted aggregation weights."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, UsageError
from .matcore import as_mat, cosine, svd


@dataclass(frozen=True)
class SubspaceProjection:
    """Rank-``rank`` projector stored in factored form (``basis`` is d x rank)."""

    skill_id: int
    basis: np.ndarray

    @property
    def dim(self) -> int:
        return self.basis.shape[0]

    @property
    def rank(self) -> int:
        return self.basis.shape[1]

    def materialize(self) -> np.ndarray:
        return self.basis @ self.basis.T


@dataclass(frozen=True)
class AggregationWeights:
    weights: np.ndarray
    gamma: float

    def __len__(self):
        return len(self.weights)

    @property
    def top1(self) -> int:
        return int(np.argmax(self.weights))


def build_subspace(x, rank: int, skill_id: int = 0) -> SubspaceProjection:
    """Top-``rank`` right singular vectors of the instruction embedding matrix."""
    x = as_mat(x, "instruction embeddings")
    m, d = x.shape
    if not 1 <= rank <= min(m, d):
        raise UsageError(f"subspace rank {rank} outside [1, {min(m, d)}]")
    res = svd(x)
    return SubspaceProjection(skill_id, res.vt[:rank].T.copy())


def _vec(e) -> np.ndarray:
    return np.asarray(getattr(e, "vector", e), dtype=np.float64)


def project_query(e, psi: SubspaceProjection) -> np.ndarray:
    v = _vec(e)
    if v.shape != (psi.dim,):
        raise ShapeError(f"query dim {v.shape} vs subspace dim {psi.dim}")
    return psi.basis @ (psi.basis.T @ v)


def skill_similarity(e, psi: SubspaceProjection) -> float:
    return cosine(_vec(e), project_query(e, psi))


def aggregation_weights(sims, gamma: float = 5.0) -> AggregationWeights:
    sims = np.clip(np.asarray(sims, dtype=np.float64).ravel(), 0.0, 1.0)
    n = sims.size
    if n == 0:
        raise UsageError("aggregation_weights needs at least one similarity")
    powered = sims**gamma
    total = powered.sum()
    if total < 1e-12:
        return AggregationWeights(np.full(n, 1.0 / n), gamma)
    return AggregationWeights(powered / total, gamma)


def similarities(e, subspaces) -> np.ndarray:
    return np.array([skill_similarity(e, psi) for psi in subspaces])
