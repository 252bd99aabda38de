"""Low-rank factors of a weight delta and merging them back into a backbone."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .delta import WeightDelta
from .errors import ConvergenceFailure, ShapeMismatch
from .linalg import SvdResult, as_matrix, clamp_rank, svd_thin, svd_truncated

__all__ = ["LoraFactors", "factorize", "factors_from_svd", "merge", "reconstruction_error"]


@dataclass(frozen=True)
class LoraFactors:
    """``b @ a`` approximates one layer's delta.

    ``a`` is ``r x k`` and ``b`` is ``d x r``. ``scale`` multiplies the
    product on merge; it is 1 for extracted adapters and ``alpha / r`` for
    imported foreign ones.
    """

    layer_name: str
    a: np.ndarray
    b: np.ndarray
    retained_sigma: np.ndarray
    total_sq_energy: float
    scale: float = 1.0

    @property
    def rank(self) -> int:
        return self.a.shape[0]

    @property
    def shape(self):
        return (self.b.shape[0], self.a.shape[1])

    def product(self) -> np.ndarray:
        """The dense update ``scale * b @ a``."""
        ba = self.b @ self.a
        return ba if self.scale == 1.0 else self.scale * ba


def factors_from_svd(layer_name, svd: SvdResult, r, total_sq_energy=None) -> LoraFactors:
    """Split the top-``r`` triplets evenly: ``b = U sqrt(S)``, ``a = sqrt(S) Vt``."""
    r = min(int(r), svd.rank)
    root = np.sqrt(svd.sigma[:r])
    b = svd.u[:, :r] * root
    a = root[:, None] * svd.vt[:r]
    if total_sq_energy is None:
        total_sq_energy = float(np.sum(svd.sigma ** 2))
    return LoraFactors(layer_name, np.ascontiguousarray(a), np.ascontiguousarray(b),
                       svd.sigma[:r].copy(), float(total_sq_energy))


def factorize(delta, r, method="exact", rng=None) -> LoraFactors:
    """Rank-``r`` LoRA factors of a :class:`WeightDelta` (or bare matrix).

    ``r`` is clamped to ``min(d, k)`` with a warning. Convergence failures
    are re-raised with the layer name attached.
    """
    if isinstance(delta, WeightDelta):
        name, m = delta.layer_name, delta.delta
    else:
        name, m = "", delta
    m = as_matrix(m, name or None)
    r = clamp_rank(r, m.shape)
    try:
        if method == "exact":
            svd = svd_thin(m)
            total = float(np.sum(svd.sigma ** 2))
        else:
            svd = svd_truncated(m, r, method=method, rng=rng)
            total = float(np.linalg.norm(m) ** 2)
    except ConvergenceFailure as exc:
        raise ConvergenceFailure(str(exc), layer=name or None) from exc
    return factors_from_svd(name, svd, r, total)


def _check_shape(expected, f: LoraFactors, what):
    if tuple(expected) != f.shape or f.a.shape[0] != f.b.shape[1]:
        raise ShapeMismatch(
            f"{f.layer_name or 'factors'}: b {f.b.shape} @ a {f.a.shape} does not match {what} {tuple(expected)}"
        )


def reconstruction_error(delta, f: LoraFactors):
    """``(||delta - BA||_F, relative)``; relative is 0 for a zero delta."""
    m = delta.delta if isinstance(delta, WeightDelta) else np.asarray(delta, dtype=np.float64)
    _check_shape(m.shape, f, "delta")
    abs_err = float(np.linalg.norm(m - f.product()))
    norm = float(np.linalg.norm(m))
    return abs_err, (abs_err / norm if norm > 0 else 0.0)


def merge(w_base, f: LoraFactors) -> np.ndarray:
    """``w_base + scale * b @ a`` in float64."""
    w_base = as_matrix(w_base, f.layer_name or None)
    _check_shape(w_base.shape, f, "base weight")
    return w_base + f.product()
