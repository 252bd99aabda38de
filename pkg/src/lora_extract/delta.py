"""Pairing base and fine-tuned tensors and computing per-layer weight deltas."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ShapeMismatch
from .linalg import as_matrix

__all__ = [
    "ZERO_DELTA_RTOL",
    "PairingReport",
    "TargetSpec",
    "WeightDelta",
    "collect_deltas",
    "compute_delta",
    "glob_match",
    "is_zero_delta",
    "layer_name_for",
    "pair_layers",
]

ZERO_DELTA_RTOL = 1e-12


@lru_cache(maxsize=256)
def _compile_glob(pattern: str):
    parts = []
    for ch in pattern:
        if ch == "*":
            parts.append(".*")
        elif ch == "?":
            parts.append(".")
        else:
            parts.append(re.escape(ch))
    return re.compile("".join(parts), re.DOTALL)


def glob_match(name: str, pattern: str) -> bool:
    """Case-sensitive whole-name match where ``*`` is any substring and ``?`` one character."""
    return _compile_glob(pattern).fullmatch(name) is not None


def layer_name_for(tensor_name: str) -> str:
    """Module name of a weight tensor: the tensor name minus a trailing ``.weight``."""
    return tensor_name[: -len(".weight")] if tensor_name.endswith(".weight") else tensor_name


@dataclass(frozen=True)
class TargetSpec:
    """Which tensors to extract adapters for."""

    include_patterns: tuple = ("*",)
    exclude_patterns: tuple = ()
    min_dim: int = 1

    def __post_init__(self):
        object.__setattr__(self, "include_patterns", tuple(self.include_patterns))
        object.__setattr__(self, "exclude_patterns", tuple(self.exclude_patterns))
        if not self.include_patterns:
            raise ValueError("TargetSpec needs at least one include pattern")
        if self.min_dim < 1:
            raise ValueError(f"min_dim must be >= 1, got {self.min_dim}")

    def selects(self, name: str) -> bool:
        return any(glob_match(name, p) for p in self.include_patterns) and not any(
            glob_match(name, p) for p in self.exclude_patterns
        )

    def to_dict(self):
        return {
            "include_patterns": list(self.include_patterns),
            "exclude_patterns": list(self.exclude_patterns),
            "min_dim": self.min_dim,
        }


@dataclass(frozen=True)
class WeightDelta:
    layer_name: str
    delta: np.ndarray
    tensor_name: str = ""

    @property
    def d(self) -> int:
        return self.delta.shape[0]

    @property
    def k(self) -> int:
        return self.delta.shape[1]

    @property
    def shape(self):
        return self.delta.shape


@dataclass
class PairingReport:
    """Where every tensor name from either checkpoint ended up.

    The six name lists are disjoint and together cover the union of names.
    ``reasons`` explains each skipped entry.
    """

    matched: list = field(default_factory=list)
    only_in_base: list = field(default_factory=list)
    only_in_ft: list = field(default_factory=list)
    skipped_non_2d: list = field(default_factory=list)
    skipped_by_pattern: list = field(default_factory=list)
    skipped_zero_delta: list = field(default_factory=list)
    reasons: dict = field(default_factory=dict)

    CATEGORIES = ("matched", "only_in_base", "only_in_ft", "skipped_non_2d",
                  "skipped_by_pattern", "skipped_zero_delta")

    def all_names(self):
        return [n for cat in self.CATEGORIES for n in getattr(self, cat)]

    @property
    def partial(self) -> bool:
        """True when some candidate layer could not be extracted.

        Pattern and dimensionality skips are by design and do not count.
        """
        return bool(self.only_in_base or self.only_in_ft or self.skipped_zero_delta)

    def to_dict(self):
        out = {cat: list(getattr(self, cat)) for cat in self.CATEGORIES}
        out["reasons"] = dict(sorted(self.reasons.items()))
        return out


def pair_layers(base, ft, spec: TargetSpec | None = None):
    """Match tensors of two checkpoints by exact name.

    Returns ``(pairs, report)`` where ``pairs`` is a name-sorted list of
    ``(name, base_record, ft_record)`` for 2-D target tensors. Raises
    :class:`ShapeMismatch` if a shared name has different shapes in the two
    checkpoints, since that means the wrong models were paired.
    """
    spec = spec or TargetSpec()
    report = PairingReport()
    pairs = []
    for name in sorted(set(base.tensors) | set(ft.tensors)):
        b_rec, f_rec = base.tensors.get(name), ft.tensors.get(name)
        if f_rec is None:
            report.only_in_base.append(name)
            report.reasons[name] = "absent from fine-tuned checkpoint"
            continue
        if b_rec is None:
            report.only_in_ft.append(name)
            report.reasons[name] = "absent from base checkpoint"
            continue
        if b_rec.shape != f_rec.shape:
            raise ShapeMismatch(
                f"{name}: base shape {list(b_rec.shape)} != fine-tuned shape {list(f_rec.shape)}"
            )
        shape = b_rec.shape
        if not spec.selects(name):
            report.skipped_by_pattern.append(name)
            report.reasons[name] = "not selected by target patterns"
        elif len(shape) != 2 or min(shape) == 0:
            report.skipped_non_2d.append(name)
            report.reasons[name] = f"shape {list(shape)} is not a non-empty 2-D matrix"
        elif min(shape) < spec.min_dim:
            report.skipped_by_pattern.append(name)
            report.reasons[name] = f"min(d, k) = {min(shape)} below min_dim {spec.min_dim}"
        else:
            report.matched.append(name)
            pairs.append((name, b_rec, f_rec))
    return pairs, report


def compute_delta(w_base, w_ft, layer_name: str = "", tensor_name: str = "") -> WeightDelta:
    """``w_ft - w_base`` in float64."""
    w_base = as_matrix(w_base, layer_name or None)
    w_ft = as_matrix(w_ft, layer_name or None)
    if w_base.shape != w_ft.shape:
        raise ShapeMismatch(f"{layer_name or 'delta'}: {w_base.shape} vs {w_ft.shape}")
    return WeightDelta(layer_name, w_ft - w_base, tensor_name or layer_name)


def is_zero_delta(delta, w_base, rtol=ZERO_DELTA_RTOL) -> bool:
    """``||delta||_F <= rtol * ||w_base||_F``."""
    delta = delta.delta if isinstance(delta, WeightDelta) else delta
    return float(np.linalg.norm(delta)) <= rtol * float(np.linalg.norm(w_base))


def collect_deltas(base, ft, pairs, report: PairingReport):
    """Compute deltas for ``pairs``, moving zero deltas into ``report.skipped_zero_delta``."""
    deltas = []
    for name, _, _ in pairs:
        w_base = base.matrix(name)
        wd = compute_delta(w_base, ft.matrix(name), layer_name_for(name), name)
        if is_zero_delta(wd, w_base):
            report.matched.remove(name)
            report.skipped_zero_delta.append(name)
            report.reasons[name] = "fine-tuned weights equal base weights"
        else:
            deltas.append(wd)
    return deltas
