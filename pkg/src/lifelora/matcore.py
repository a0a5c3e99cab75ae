"""Dense float64 matrix helpers.

A ``Mat`` is a plain 2-D ``numpy.ndarray`` of dtype float64. The SVD is a
one-sided (Hestenes) Jacobi sweep with a round-robin pair ordering, so each
sweep rotates disjoint column pairs in vectorised batches.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError

Mat = np.ndarray

SVD_MAX_SWEEPS = 100
SVD_OFFDIAG_TOL = 1e-12
COSINE_ZERO = 1e-12


def as_mat(x, name: str = "matrix") -> Mat:
    m = np.asarray(x, dtype=np.float64)
    if m.ndim == 1:
        m = m[None, :]
    if m.ndim != 2 or m.shape[0] < 1 or m.shape[1] < 1:
        raise ShapeError(f"{name} must be a non-empty 2-D matrix, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise NumericError(f"{name} has non-finite entries")
    return m


def matmul(a: Mat, b: Mat) -> Mat:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    return a @ b


def frobenius_norm(m: Mat) -> float:
    return float(np.sqrt(np.sum(np.square(m))))


def trace_product(a: Mat, b: Mat) -> float:
    """tr(a^T b) as an elementwise sum; a^T b is never formed."""
    if a.shape != b.shape:
        raise ShapeError(f"trace_product: {a.shape} vs {b.shape}")
    return float(np.sum(a * b))


def cosine(u, v) -> float:
    u = np.ravel(np.asarray(u, dtype=np.float64))
    v = np.ravel(np.asarray(v, dtype=np.float64))
    if u.shape != v.shape:
        raise ShapeError(f"cosine: length {u.size} vs {v.size}")
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu < COSINE_ZERO or nv < COSINE_ZERO:
        return 0.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


@dataclass(frozen=True)
class SvdResult:
    u: Mat  # m x k
    s: np.ndarray  # k, descending
    vt: Mat  # k x n


def _round_robin(n: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Disjoint pair batches covering every (i, j) once per sweep."""
    idx = list(range(n)) + ([-1] if n % 2 else [])
    m = len(idx)
    rounds = []
    for _ in range(m - 1):
        pairs = [(idx[i], idx[m - 1 - i]) for i in range(m // 2)]
        pairs = [(min(p, q), max(p, q)) for p, q in pairs if p >= 0 and q >= 0]
        if pairs:
            p, q = zip(*pairs)
            rounds.append((np.array(p), np.array(q)))
        idx = [idx[0], idx[-1]] + idx[1:-1]
    return rounds


def _complete_columns(u: Mat, keep: np.ndarray) -> Mat:
    """Replace columns not in ``keep`` with unit vectors orthogonal to the rest."""
    m, k = u.shape
    out = u.copy()
    basis = [out[:, j] for j in range(k) if keep[j]]
    cand = 0
    for j in range(k):
        if keep[j]:
            continue
        while True:
            e = np.zeros(m)
            e[cand % m] = 1.0
            cand += 1
            for b in basis:
                e -= np.dot(b, e) * b
            for b in basis:  # second pass for stability
                e -= np.dot(b, e) * b
            ne = np.linalg.norm(e)
            if ne > 1e-6:
                break
            if cand > 4 * m:
                raise NumericError("could not complete orthonormal basis")
        e /= ne
        out[:, j] = e
        basis.append(e)
    return out


def _jacobi_tall(x: Mat) -> SvdResult:
    m, n = x.shape
    # work at unit scale so squared column norms neither underflow nor overflow
    scale = float(np.max(np.abs(x)))
    g = x / scale if scale > 0 else x.copy()
    v = np.eye(n)
    rounds = _round_robin(n)
    # pairs whose coupling is below roundoff of the whole matrix are left alone
    floor = (np.finfo(float).eps * frobenius_norm(g)) ** 2
    for sweep in range(SVD_MAX_SWEEPS):
        rotated = False
        for p, q in rounds:
            gp, gq = g[:, p], g[:, q]
            alpha = np.sum(gp * gp, axis=0)
            beta = np.sum(gq * gq, axis=0)
            gamma = np.sum(gp * gq, axis=0)
            active = (np.abs(gamma) > SVD_OFFDIAG_TOL * np.sqrt(alpha * beta)) & (np.abs(gamma) > floor)
            if not np.any(active):
                continue
            rotated = True
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.sign(zeta) / (np.abs(zeta) + np.hypot(1.0, zeta))
            t[zeta == 0] = 1.0
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            gp, gq = g[:, p].copy(), g[:, q].copy()
            g[:, p] = c * gp - s * gq
            g[:, q] = s * gp + c * gq
            vp, vq = v[:, p].copy(), v[:, q].copy()
            v[:, p] = c * vp - s * vq
            v[:, q] = s * vp + c * vq
        if not rotated:
            break
    else:
        raise NumericError(f"one-sided Jacobi did not converge after {SVD_MAX_SWEEPS} sweeps")

    sv = np.sqrt(np.sum(g * g, axis=0))
    order = np.argsort(-sv, kind="stable")
    sv, g, v = sv[order], g[:, order], v[:, order]
    smax = sv[0] if sv.size else 0.0
    # a column pair may stop rotating with coupling up to ``floor``; only columns large enough that this
    # leaves them orthogonal to ~1e-10 relative keep their direction, the rest are rebuilt by completion
    keep = sv > max(max(m, n) * np.finfo(float).eps * max(smax, 1e-300), np.sqrt(floor) * 1e5)
    u = np.zeros_like(g)
    u[:, keep] = g[:, keep] / sv[keep]
    if not np.all(keep):
        u = _complete_columns(u, keep)
    vt = v.T
    # sign convention: first nonzero entry of every right singular vector >= 0
    for i in range(vt.shape[0]):
        nz = np.flatnonzero(np.abs(vt[i]) > 1e-14)
        if nz.size and vt[i, nz[0]] < 0:
            vt[i] *= -1.0
            u[:, i] *= -1.0
    return SvdResult(u=u, s=sv * scale if scale > 0 else sv, vt=vt)


def svd(x: Mat) -> SvdResult:
    """Thin SVD: x = u @ diag(s) @ vt with k = min(m, n)."""
    x = as_mat(x, "svd input")
    m, n = x.shape
    if m >= n:
        return _jacobi_tall(x)
    r = _jacobi_tall(x.T)
    # x^T = U S V^T  =>  x = V S U^T; re-apply the sign rule to the new right vectors
    u, vt = r.vt.T.copy(), r.u.T.copy()
    for i in range(vt.shape[0]):
        nz = np.flatnonzero(np.abs(vt[i]) > 1e-14)
        if nz.size and vt[i, nz[0]] < 0:
            vt[i] *= -1.0
            u[:, i] *= -1.0
    return SvdResult(u=u, s=r.s, vt=vt)
