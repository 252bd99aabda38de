"""Dense matrix helpers and SVD kernels.

Matrices are plain 2-D ``float64`` numpy arrays. :func:`as_matrix` is the
single validation point: every public routine that takes a matrix funnels
through it, so downstream code may assume finite, non-empty, 64-bit data.

Three kernels are available behind one result type:

* ``"lapack"``: numpy's divide-and-conquer SVD (default exact path)
* ``"jacobi"``: one-sided Jacobi, written here; slower, used as an
  independent exact kernel
* randomized range finder with power iterations, for large layers
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceFailure, NonFiniteError, ShapeMismatch

__all__ = [
    "RankClampWarning",
    "SvdResult",
    "as_matrix",
    "canonicalize_signs",
    "clamp_rank",
    "frobenius_norm",
    "matmul",
    "randomized_svd",
    "svd_jacobi",
    "svd_thin",
    "svd_truncated",
]

JACOBI_MAX_SWEEPS = 100
DEFAULT_OVERSAMPLE = 10
DEFAULT_POWER_ITERS = 2


class RankClampWarning(UserWarning):
    """Requested rank exceeded ``min(rows, cols)`` and was reduced."""


def as_matrix(x, name=None) -> np.ndarray:
    """Return ``x`` as a C-contiguous 2-D float64 array, validating it.

    Raises ``ValueError`` for wrong dimensionality or empty axes and
    :class:`NonFiniteError` when any entry is NaN or infinite.
    """
    m = np.ascontiguousarray(x, dtype=np.float64)
    label = f"{name}: " if name else ""
    if m.ndim != 2:
        raise ValueError(f"{label}expected a 2-D matrix, got shape {m.shape}")
    if m.shape[0] < 1 or m.shape[1] < 1:
        raise ValueError(f"{label}matrix has an empty axis: {m.shape}")
    if not np.isfinite(m).all():
        raise NonFiniteError(f"{label}matrix contains NaN or Inf entries")
    return m


@dataclass(frozen=True)
class SvdResult:
    """``u @ diag(sigma) @ vt`` with ``sigma`` sorted descending."""

    u: np.ndarray
    sigma: np.ndarray
    vt: np.ndarray

    @property
    def rank(self) -> int:
        return int(self.sigma.shape[0])

    def truncate(self, r: int) -> "SvdResult":
        return SvdResult(self.u[:, :r].copy(), self.sigma[:r].copy(), self.vt[:r].copy())

    def reconstruct(self) -> np.ndarray:
        return (self.u * self.sigma) @ self.vt


def canonicalize_signs(u, vt):
    """Flip singular pairs so the largest-magnitude entry of each ``u`` column is >= 0.

    The matching row of ``vt`` is flipped with it, so ``u @ diag(s) @ vt`` is
    unchanged. Ties in magnitude resolve to the first index.
    """
    u = np.array(u, dtype=np.float64, copy=True)
    vt = np.array(vt, dtype=np.float64, copy=True)
    if u.shape[1] == 0:
        return u, vt
    idx = np.argmax(np.abs(u), axis=0)
    signs = np.where(u[idx, np.arange(u.shape[1])] < 0, -1.0, 1.0)
    u *= signs
    vt *= signs[:, None]
    return u, vt


def _sorted_result(u, sigma, vt) -> SvdResult:
    order = np.argsort(-sigma, kind="stable")
    u, vt = canonicalize_signs(u[:, order], vt[order])
    return SvdResult(u, np.ascontiguousarray(sigma[order]), vt)


def _lapack_svd(m):
    try:
        u, s, vt = np.linalg.svd(m, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise ConvergenceFailure(f"LAPACK SVD did not converge ({exc})") from exc
    return u, s, vt


def _round_robin(n):
    """Yield (p, q) index arrays covering every column pair once per sweep."""
    players = list(range(n + (n % 2)))
    half = len(players) // 2
    for _ in range(len(players) - 1):
        p = np.array(players[:half])
        q = np.array(players[::-1][:half])
        keep = (p < n) & (q < n)
        yield p[keep], q[keep]
        players = [players[0], players[-1]] + players[1:-1]


def _complete_basis(u, keep):
    """Replace columns of ``u`` not flagged in ``keep`` by an orthonormal complement."""
    if keep.all():
        return u
    rows = u.shape[0]
    good = u[:, keep]
    q, _ = np.linalg.qr(np.hstack([good, np.eye(rows)]))
    filler = q[:, good.shape[1]: good.shape[1] + int((~keep).sum())]
    out = u.copy()
    out[:, ~keep] = filler
    return out


def svd_jacobi(m, max_sweeps=JACOBI_MAX_SWEEPS, tol=None) -> SvdResult:
    """Thin SVD by one-sided (Hestenes) Jacobi rotations.

    Each sweep applies a round-robin schedule of disjoint column pairs, so
    all rotations of one round are applied as a single vectorized update.
    Raises :class:`ConvergenceFailure` after ``max_sweeps`` sweeps.
    """
    m = as_matrix(m)
    wide = m.shape[0] < m.shape[1]
    g = (m.T if wide else m).copy()
    # work at unit scale so squared norms neither underflow nor overflow
    scale = float(np.abs(g).max())
    if scale > 0:
        g /= scale
    rows, n = g.shape
    v = np.eye(n)
    eps = np.finfo(np.float64).eps
    if tol is None:
        tol = rows * eps
    # columns this small are roundoff left over from rank deficiency
    negligible = (max(rows, n) * eps * np.linalg.norm(g)) ** 2

    for _ in range(max_sweeps):
        rotated = False
        for p, q in _round_robin(n):
            if p.size == 0:
                continue
            gp, gq = g[:, p], g[:, q]
            alpha = np.einsum("ij,ij->j", gp, gp)
            beta = np.einsum("ij,ij->j", gq, gq)
            gamma = np.einsum("ij,ij->j", gp, gq)
            active = ((np.abs(gamma) > tol * np.sqrt(alpha * beta))
                      & (alpha > negligible) & (beta > negligible))
            if not active.any():
                continue
            rotated = True
            p, q = p[active], q[active]
            alpha, beta, gamma = alpha[active], beta[active], gamma[active]
            zeta = (beta - alpha) / (2.0 * gamma)
            t = np.where(zeta >= 0, 1.0, -1.0) / (np.abs(zeta) + np.hypot(1.0, zeta))
            c = 1.0 / np.sqrt(1.0 + t * t)
            s = c * t
            for mat in (g, v):
                xp, xq = mat[:, p], mat[:, q]
                mat[:, p] = c * xp - s * xq
                mat[:, q] = s * xp + c * xq
        if not rotated:
            break
    else:
        raise ConvergenceFailure(f"Jacobi SVD did not converge in {max_sweeps} sweeps")

    sigma_sq = np.einsum("ij,ij->j", g, g)
    unit_sigma = np.sqrt(sigma_sq)
    # same cutoff as the rotation test: anything smaller was never orthogonalized
    keep = sigma_sq > negligible
    u = np.zeros_like(g)
    u[:, keep] = g[:, keep] / unit_sigma[keep]
    u = _complete_basis(u, keep)
    sigma = unit_sigma * scale
    if wide:
        return _sorted_result(v, sigma, u.T)
    return _sorted_result(u, sigma, v.T)


def svd_thin(m, kernel="lapack") -> SvdResult:
    """Thin SVD with ``p = min(rows, cols)`` components and canonical signs."""
    m = as_matrix(m)
    if kernel == "jacobi":
        return svd_jacobi(m)
    if kernel != "lapack":
        raise ValueError(f"unknown SVD kernel {kernel!r}")
    return _sorted_result(*_lapack_svd(m))


def clamp_rank(r, shape) -> int:
    """Clamp ``r`` to ``min(shape)``, warning when it was too large."""
    r = int(r)
    if r < 1:
        raise ValueError(f"rank must be >= 1, got {r}")
    limit = min(shape)
    if r > limit:
        warnings.warn(
            f"rank {r} exceeds min{tuple(shape)}; clamped to {limit}",
            RankClampWarning,
            stacklevel=3,
        )
        return limit
    return r


def _orthonormalize(x):
    return np.linalg.qr(x)[0]


def randomized_svd(m, r, oversample=DEFAULT_OVERSAMPLE, n_iter=DEFAULT_POWER_ITERS, rng=None) -> SvdResult:
    """Range-finder SVD returning ``min(r + oversample, p)`` components.

    The sketch is refined by ``n_iter`` power iterations, each followed by
    re-orthonormalization. Callers usually keep only the top ``r``
    components; the extra ones are handed back because they sharpen energy
    estimates for free.
    """
    m = as_matrix(m)
    rng = np.random.default_rng(rng)
    p = min(m.shape)
    width = min(int(r) + int(oversample), p)
    omega = rng.standard_normal((m.shape[1], width))
    q = _orthonormalize(m @ omega)
    for _ in range(n_iter):
        q = _orthonormalize(m.T @ q)
        q = _orthonormalize(m @ q)
    small = q.T @ m
    ub, s, vt = _lapack_svd(small)
    return _sorted_result(q @ ub, s, vt)


def svd_truncated(m, r, method="exact", *, rng=None, oversample=DEFAULT_OVERSAMPLE,
                  n_iter=DEFAULT_POWER_ITERS, kernel="lapack") -> SvdResult:
    """Top-``r`` singular triplets of ``m``.

    ``r`` is clamped to ``min(m.shape)`` with a :class:`RankClampWarning`.
    ``method="randomized"`` uses :func:`randomized_svd` seeded by ``rng``.
    """
    m = as_matrix(m)
    r = clamp_rank(r, m.shape)
    if method == "exact":
        full = svd_thin(m, kernel=kernel)
    elif method == "randomized":
        full = randomized_svd(m, r, oversample=oversample, n_iter=n_iter, rng=rng)
    else:
        raise ValueError(f"unknown SVD method {method!r}")
    return full.truncate(r)


def frobenius_norm(m) -> float:
    return float(np.linalg.norm(as_matrix(m), "fro"))


def matmul(a, b) -> np.ndarray:
    a, b = as_matrix(a), as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b
