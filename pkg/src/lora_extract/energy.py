"""Preserved energy of truncated spectra and energy-threshold rank selection.

The preserved energy at rank ``r`` is the share of the squared singular
values captured by the top ``r`` directions::

    E_r = sum(sigma[:r] ** 2) / sum(sigma ** 2)

A layer whose delta is zero has no energy to lose, so ``E_r = 1`` there.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidThreshold

__all__ = [
    "MODEL_MEAN",
    "MODEL_WEIGHTED_MEAN",
    "EnergyCurve",
    "EnergyReport",
    "build_report",
    "normalize_probe_ranks",
    "preserved_energy",
    "select_rank",
]

MODEL_MEAN = "__model_mean__"
MODEL_WEIGHTED_MEAN = "__model_weighted_mean__"


def _check_threshold(threshold):
    if not (0.0 < threshold <= 1.0):
        raise InvalidThreshold(f"energy threshold must lie in (0, 1], got {threshold}")


def _cumulative(sigma_sq, total=None):
    prefix = np.cumsum(np.asarray(sigma_sq, dtype=np.float64))
    if total is None:
        total = prefix[-1] if prefix.size else 0.0
    if total <= 0:
        return np.ones_like(prefix)
    return prefix / total


def preserved_energy(sigma, r) -> float:
    """``E_r`` for a descending spectrum; ``r`` beyond its length is clamped."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if r < 1:
        raise ValueError(f"rank must be >= 1, got {r}")
    if sigma.size == 0:
        return 1.0
    return float(_cumulative(sigma ** 2)[min(int(r), sigma.size) - 1])


def select_rank(sigma, threshold) -> int:
    """Smallest ``r >= 1`` with ``E_r >= threshold``."""
    _check_threshold(threshold)
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.size == 0:
        return 1
    hits = np.flatnonzero(_cumulative(sigma ** 2) >= threshold)
    return int(hits[0]) + 1


@dataclass(frozen=True)
class EnergyCurve:
    """Cumulative energy of one layer's delta.

    ``sigma_sq`` may be a leading part of the spectrum (randomized SVD); in
    that case ``total`` carries the full energy and ``max_rank`` the full
    rank ``min(d, k)``, so ``E_r`` stays exact for every ``r`` up to
    ``len(sigma_sq)``.
    """

    layer_name: str
    sigma_sq: np.ndarray
    total: float = None
    max_rank: int = None
    shape: tuple = None

    def __post_init__(self):
        sq = np.asarray(self.sigma_sq, dtype=np.float64)
        object.__setattr__(self, "sigma_sq", sq)
        if self.total is None:
            object.__setattr__(self, "total", float(np.cumsum(sq)[-1]) if sq.size else 0.0)
        if self.max_rank is None:
            object.__setattr__(self, "max_rank", int(sq.size))
        if self.shape is not None:
            object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))

    @classmethod
    def from_sigma(cls, layer_name, sigma, shape=None, total=None, max_rank=None):
        sigma = np.asarray(sigma, dtype=np.float64)
        if max_rank is None:
            max_rank = min(shape) if shape is not None else sigma.size
        return cls(layer_name, sigma ** 2, total, max_rank, shape)

    @property
    def complete(self) -> bool:
        return self.sigma_sq.size >= self.max_rank

    @property
    def cumulative(self) -> np.ndarray:
        if self.complete:
            return _cumulative(self.sigma_sq)
        return _cumulative(self.sigma_sq, self.total)

    @property
    def weight(self) -> int:
        return int(np.prod(self.shape)) if self.shape is not None else 1

    def energy_at(self, r) -> float:
        if r < 1:
            raise ValueError(f"rank must be >= 1, got {r}")
        if self.total <= 0 or r >= self.max_rank:
            return 1.0
        if r > self.sigma_sq.size:
            raise ValueError(
                f"{self.layer_name}: only {self.sigma_sq.size} singular values known, E_{r} undetermined"
            )
        return float(self.cumulative[r - 1])

    def select_rank(self, threshold):
        """Smallest rank reaching ``threshold``, or ``None`` if the known part of
        a partial spectrum does not reach it."""
        _check_threshold(threshold)
        if self.total <= 0 or self.sigma_sq.size == 0:
            return 1
        hits = np.flatnonzero(self.cumulative >= threshold)
        if hits.size:
            return int(hits[0]) + 1
        return self.max_rank if self.complete else None


def normalize_probe_ranks(ranks):
    """Sorted, de-duplicated probe ranks and a warning string if that changed anything."""
    ranks = [int(r) for r in ranks]
    if not ranks:
        raise ValueError("at least one probe rank is required")
    if any(r < 1 for r in ranks):
        raise ValueError(f"probe ranks must be positive, got {ranks}")
    clean = sorted(set(ranks))
    warning = None
    if clean != ranks:
        warning = f"probe ranks {ranks} normalized to {clean}"
    return clean, warning


@dataclass
class EnergyReport:
    curves: list
    probe_ranks: list
    mean: list
    weighted_mean: list
    selected_ranks: dict = None
    warnings: list = field(default_factory=list)

    def rows(self):
        """``(layer, rank, energy)`` rows: per layer, then the two model-level rows."""
        out = []
        for c in self.curves:
            out.extend((c.layer_name, r, c.energy_at(r)) for r in self.probe_ranks)
        if self.curves:
            out.extend((MODEL_MEAN, r, e) for r, e in zip(self.probe_ranks, self.mean))
            out.extend((MODEL_WEIGHTED_MEAN, r, e) for r, e in zip(self.probe_ranks, self.weighted_mean))
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["layer", "rank", "energy"])
        for layer, r, e in self.rows():
            writer.writerow([layer, r, f"{e:.6g}"])
        return buf.getvalue()

    def to_dict(self):
        return {
            "probe_ranks": list(self.probe_ranks),
            "rows": [{"layer": l, "rank": r, "energy": e} for l, r, e in self.rows()],
            "layers": [
                {"layer": c.layer_name, "shape": list(c.shape) if c.shape else None,
                 "max_rank": c.max_rank, "total_sq_energy": c.total}
                for c in self.curves
            ],
            "selected_ranks": self.selected_ranks,
            "warnings": list(self.warnings),
        }

    def write_csv(self, path):
        Path(path).write_text(self.to_csv())

    def write_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def build_report(curves, probe_ranks, threshold=None) -> EnergyReport:
    """Model-level energy at each probe rank.

    The plain mean weights layers equally; the weighted mean weights each by
    ``d * k``. Layers whose rank is below a probe rank count as fully
    preserved. With ``threshold`` set, per-layer selected ranks are included.
    """
    probes, warning = normalize_probe_ranks(probe_ranks)
    curves = list(curves)
    mean, weighted = [], []
    if curves:
        weights = np.array([c.weight for c in curves], dtype=np.float64)
        for r in probes:
            e = np.array([c.energy_at(r) for c in curves])
            mean.append(float(np.mean(e)))
            weighted.append(float(np.dot(weights, e) / weights.sum()))
    selected = None
    if threshold is not None:
        selected = {c.layer_name: c.select_rank(threshold) for c in curves}
    return EnergyReport(curves, probes, mean, weighted, selected, [warning] if warning else [])
