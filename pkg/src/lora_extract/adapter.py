"""LoRA adapter directories: a JSON config next to a tensor file.

Layout, following the dominant PEFT convention::

    <dir>/adapter_config.json
    <dir>/adapter_model.safetensors   # <layer>.lora_A.weight (r x k), <layer>.lora_B.weight (d x r)

Extracted adapters set ``lora_alpha == r`` so the runtime scale
``alpha / r`` is exactly 1 and the applied update is ``B @ A``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import Checkpoint, encode_array, load_checkpoint, save_checkpoint
from .errors import (
    CheckpointError,
    DimensionMismatch,
    EmptyAdapter,
    InconsistentRank,
    MalformedConfig,
    MissingCounterpart,
)
from .factorize import LoraFactors

__all__ = [
    "CONFIG_NAME",
    "WEIGHTS_NAME",
    "AdapterConfig",
    "adapter_payload_size",
    "export_adapter",
    "import_adapter",
    "lora_tensor_names",
]

CONFIG_NAME = "adapter_config.json"
WEIGHTS_NAME = "adapter_model.safetensors"
_A_SUFFIX = ".lora_A.weight"
_B_SUFFIX = ".lora_B.weight"


def lora_tensor_names(layer_name):
    return layer_name + _A_SUFFIX, layer_name + _B_SUFFIX


def _module_suffix(layer_name):
    return layer_name.rsplit(".", 1)[-1]


def _pattern_lookup(pattern, layer_name, default):
    """Exact key first, then the longest key that is a dotted suffix of the layer name."""
    if not pattern:
        return default
    if layer_name in pattern:
        return pattern[layer_name]
    hits = [k for k in pattern if layer_name.endswith("." + k)]
    return pattern[max(hits, key=len)] if hits else default


@dataclass
class AdapterConfig:
    r: int
    lora_alpha: float
    target_modules: list
    base_model_name_or_path: str = ""
    rank_pattern: dict = None
    alpha_pattern: dict = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def for_factors(cls, factors, base_model="", method="exact", energy_threshold=None):
        """Config for freshly extracted factors, with ``alpha == r`` per layer."""
        if not factors:
            raise EmptyAdapter("no factors to describe")
        ranks = {f.layer_name: f.rank for f in factors}
        r = max(ranks.values())
        rank_pattern = alpha_pattern = None
        if len(set(ranks.values())) > 1:
            rank_pattern = dict(sorted(ranks.items()))
            alpha_pattern = {k: v for k, v in rank_pattern.items()}
        return cls(
            r=r,
            lora_alpha=r,
            target_modules=sorted({_module_suffix(n) for n in ranks}),
            base_model_name_or_path=str(base_model),
            rank_pattern=rank_pattern,
            alpha_pattern=alpha_pattern,
            meta={"method": method, "energy_threshold": energy_threshold, "version": __version__},
        )

    def rank_for(self, layer_name) -> int:
        return int(_pattern_lookup(self.rank_pattern, layer_name, self.r))

    def scale_for(self, layer_name) -> float:
        alpha = _pattern_lookup(self.alpha_pattern, layer_name, self.lora_alpha)
        return float(alpha) / self.rank_for(layer_name)

    def to_dict(self):
        out = {
            "peft_type": "LORA",
            "r": self.r,
            "lora_alpha": self.lora_alpha,
            "target_modules": list(self.target_modules),
            "base_model_name_or_path": self.base_model_name_or_path,
        }
        if self.rank_pattern:
            out["rank_pattern"] = dict(self.rank_pattern)
        if self.alpha_pattern:
            out["alpha_pattern"] = dict(self.alpha_pattern)
        out["phlora_meta"] = {
            "method": self.meta.get("method"),
            "energy_threshold": self.meta.get("energy_threshold"),
            "version": self.meta.get("version"),
        }
        return out

    @classmethod
    def from_dict(cls, data):
        if not isinstance(data, dict):
            raise MalformedConfig("adapter config must be a JSON object")
        try:
            r = data["r"]
            alpha = data["lora_alpha"]
            targets = data["target_modules"]
        except KeyError as exc:
            raise MalformedConfig(f"adapter config lacks required key {exc.args[0]!r}") from None
        if isinstance(r, bool) or not isinstance(r, int) or r < 1:
            raise MalformedConfig(f"r must be a positive integer, got {r!r}")
        if isinstance(alpha, bool) or not isinstance(alpha, (int, float)):
            raise MalformedConfig(f"lora_alpha must be a number, got {alpha!r}")
        if isinstance(targets, str):
            targets = [targets]
        if not isinstance(targets, list) or not targets:
            raise MalformedConfig("target_modules must be a non-empty list")
        for key in ("rank_pattern", "alpha_pattern"):
            if data.get(key) is not None and not isinstance(data[key], dict):
                raise MalformedConfig(f"{key} must be an object")
        meta = data.get("phlora_meta") or {}
        return cls(r, alpha, list(targets), data.get("base_model_name_or_path") or "",
                   data.get("rank_pattern") or None, data.get("alpha_pattern") or None, dict(meta))


def _check_targets(cfg, layer_names, error):
    suffixes = {_module_suffix(n) for n in layer_names}
    targets = set(cfg.target_modules)
    if not targets:
        raise error("target_modules is empty")
    uncovered = sorted(n for n in layer_names
                       if not any(n == t or n.endswith("." + t) for t in targets))
    if uncovered:
        raise error(f"layers not covered by target_modules {sorted(targets)}: {uncovered}")
    unused = sorted(t for t in targets if t not in suffixes and t not in layer_names)
    if unused:
        raise error(f"target_modules {unused} match no adapter layer")


def export_adapter(factors, cfg: AdapterConfig, directory, dtype="f32"):
    """Write ``factors`` and ``cfg`` into ``directory`` (created if needed).

    Factors are written in layer-name order. Without a ``rank_pattern`` in
    ``cfg`` every layer must have rank ``cfg.r``.
    """
    factors = sorted(factors, key=lambda f: f.layer_name)
    if not factors:
        raise EmptyAdapter("refusing to write an adapter with no layers")
    names = [f.layer_name for f in factors]
    if len(set(names)) != len(names):
        raise InconsistentRank(f"duplicate layer names in factors: {names}")
    for f in factors:
        expected = cfg.rank_for(f.layer_name)
        if f.rank != expected:
            where = "rank_pattern" if cfg.rank_pattern else "uniform rank config"
            raise InconsistentRank(f"{f.layer_name}: rank {f.rank} but {where} says {expected}")
        if f.b.shape[1] != f.rank:
            raise DimensionMismatch(f"{f.layer_name}: b {f.b.shape} vs a {f.a.shape}")
    _check_targets(cfg, names, MalformedConfig)

    entries = []
    for f in factors:
        a_name, b_name = lora_tensor_names(f.layer_name)
        entries.append((a_name, dtype, f.a.shape, encode_array(f.a, dtype)))
        entries.append((b_name, dtype, f.b.shape, encode_array(f.b, dtype)))
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_checkpoint(Checkpoint.from_entries(entries, {"format": "pt"}), directory / WEIGHTS_NAME)
    (directory / CONFIG_NAME).write_text(json.dumps(cfg.to_dict(), indent=2) + "\n")


def import_adapter(directory):
    """Read an adapter directory back into ``(factors, config)``.

    ``retained_sigma`` is recovered as the squared column norms of B, which
    is exact for adapters written by :func:`export_adapter` and only an
    estimate for adapters from other tools. ``scale`` is ``alpha / r``.
    """
    directory = Path(directory)
    try:
        raw = json.loads((directory / CONFIG_NAME).read_text())
    except FileNotFoundError:
        raise MalformedConfig(f"{directory / CONFIG_NAME} not found") from None
    except json.JSONDecodeError as exc:
        raise MalformedConfig(f"adapter config is not valid JSON: {exc}") from exc
    cfg = AdapterConfig.from_dict(raw)
    try:
        weights = load_checkpoint(directory / WEIGHTS_NAME)
    except FileNotFoundError:
        raise MalformedConfig(f"{directory / WEIGHTS_NAME} not found") from None

    a_layers = {n[: -len(_A_SUFFIX)] for n in weights if n.endswith(_A_SUFFIX)}
    b_layers = {n[: -len(_B_SUFFIX)] for n in weights if n.endswith(_B_SUFFIX)}
    lonely = sorted(a_layers ^ b_layers)
    if lonely:
        raise MissingCounterpart(f"lora_A/lora_B pairs incomplete for layers: {lonely}")
    if not a_layers:
        raise EmptyAdapter(f"{directory} contains no lora_A/lora_B tensors")

    factors = []
    for layer in sorted(a_layers):
        a_name, b_name = lora_tensor_names(layer)
        try:
            a, b = weights.matrix(a_name), weights.matrix(b_name)
        except CheckpointError as exc:
            raise DimensionMismatch(str(exc)) from exc
        if a.shape[0] != b.shape[1]:
            raise DimensionMismatch(f"{layer}: lora_A {a.shape} and lora_B {b.shape} disagree on rank")
        if a.shape[0] != cfg.rank_for(layer):
            raise DimensionMismatch(f"{layer}: tensors have rank {a.shape[0]}, config says {cfg.rank_for(layer)}")
        sigma = np.einsum("ij,ij->j", b, b)
        factors.append(LoraFactors(layer, a, b, sigma, float(np.sum(sigma ** 2)),
                                   scale=cfg.scale_for(layer)))
    return factors, cfg


def adapter_payload_size(factors, dtype_width=4) -> int:
    """Bytes of tensor data (header excluded) for ``factors``."""
    return sum((f.rank * f.shape[1] + f.shape[0] * f.rank) * dtype_width for f in factors)
