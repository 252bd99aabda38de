"""End-to-end runs: extract, analyze, merge and verify.

Each ``run_*`` function does the work of one CLI subcommand and returns
``(manifest, exit_code)``. Exit codes: 0 success, 2 partial success (some
candidate layers had nothing to extract), 1 hard error. Hard errors are
raised as exceptions; the CLI maps them to 1.
"""
from __future__ import annotations

import json
import os
import time
import warnings
import zlib
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .adapter import WEIGHTS_NAME, AdapterConfig, export_adapter, import_adapter
from .checkpoint import (
    Checkpoint,
    decode_array,
    encode_array,
    load_checkpoint,
    normalize_dtype,
    save_checkpoint,
)
from .delta import TargetSpec, WeightDelta, collect_deltas, compute_delta, pair_layers
from .energy import EnergyCurve, build_report, normalize_probe_ranks
from .errors import AdapterError, ConvergenceFailure, LoraExtractError
from .factorize import factors_from_svd, merge, reconstruction_error
from .linalg import RankClampWarning, randomized_svd, svd_thin

__all__ = [
    "AUTO_RANDOMIZED_DIM",
    "DEFAULT_RANK",
    "DEFAULT_SEED",
    "LayerOutcome",
    "analyze_layer",
    "choose_method",
    "extract_layer",
    "resolve_seed",
    "run_analyze",
    "run_extract",
    "run_merge",
    "run_verify",
    "write_manifest",
]

DEFAULT_RANK = 32
DEFAULT_SEED = 42
AUTO_RANDOMIZED_DIM = 2048
SEED_ENV = "PHLORA_SEED"
VERIFY_RTOL = 1e-6
MANIFEST_NAME = "extraction_manifest.json"


class UsageError(LoraExtractError, ValueError):
    """Bad combination of run options."""


def resolve_seed(default=DEFAULT_SEED) -> int:
    value = os.environ.get(SEED_ENV)
    if value is None or value.strip() == "":
        return int(default)
    try:
        return int(value)
    except ValueError:
        raise UsageError(f"{SEED_ENV} must be an integer, got {value!r}") from None


def layer_rng(seed, layer_name):
    """Per-layer generator; independent of processing order and worker count."""
    return np.random.default_rng([int(seed), zlib.crc32(layer_name.encode("utf-8"))])


def choose_method(method, shape) -> str:
    if method in (None, "auto"):
        return "randomized" if min(shape) > AUTO_RANDOMIZED_DIM else "exact"
    if method not in ("exact", "randomized"):
        raise UsageError(f"unknown method {method!r}")
    return method


@contextmanager
def _timer(timings, key):
    start = time.perf_counter()
    try:
        yield
    finally:
        timings[key] = round(timings.get(key, 0.0) + time.perf_counter() - start, 6)


def _randomized_spectrum(wd: WeightDelta, r, rng):
    """Randomized SVD plus an energy curve whose total is exact.

    The total is the captured energy plus the squared residual norm, which
    equals ``||delta||_F^2`` and keeps ``E_r <= 1`` even for deltas whose
    rank the sketch covers completely.
    """
    res = randomized_svd(wd.delta, r, rng=rng)
    resid = float(np.linalg.norm(wd.delta - res.reconstruct()) ** 2)
    total = float(np.sum(res.sigma ** 2)) + resid
    curve = EnergyCurve.from_sigma(wd.layer_name, res.sigma, wd.shape, total=total)
    return res, curve


def analyze_layer(wd: WeightDelta, method="exact", rank_hint=DEFAULT_RANK, threshold=None, rng=None):
    """Spectrum of one delta as ``(svd, curve)``.

    For the randomized method the sketch covers at least ``rank_hint``
    directions; with ``threshold`` it is doubled until the known part of
    the spectrum reaches the threshold.
    """
    try:
        if method == "exact":
            svd = svd_thin(wd.delta)
            return svd, EnergyCurve.from_sigma(wd.layer_name, svd.sigma, wd.shape)
        p = min(wd.shape)
        guess = max(1, min(int(rank_hint), p))
        while True:
            svd, curve = _randomized_spectrum(wd, guess, rng)
            if threshold is None or curve.select_rank(threshold) is not None:
                return svd, curve
            guess = min(2 * guess, p)
    except ConvergenceFailure as exc:
        raise ConvergenceFailure(str(exc), layer=wd.layer_name) from exc


@dataclass
class LayerOutcome:
    layer_name: str
    tensor_name: str
    shape: tuple
    method: str
    rank: int
    energy: float
    abs_error: float
    rel_error: float
    stored_rel_error: float
    factors: object
    warnings: list

    def to_dict(self):
        return {
            "layer": self.layer_name,
            "tensor": self.tensor_name,
            "shape": list(self.shape),
            "method": self.method,
            "rank": self.rank,
            "energy": self.energy,
            "abs_error": self.abs_error,
            "rel_error": self.rel_error,
            "stored_rel_error": self.stored_rel_error,
        }


def _stored(factors, dtype):
    """``factors`` after a round trip through the adapter storage dtype."""
    a = decode_array(encode_array(factors.a, dtype), dtype, factors.a.shape)
    b = decode_array(encode_array(factors.b, dtype), dtype, factors.b.shape)
    return replace(factors, a=a, b=b)


def extract_layer(wd: WeightDelta, rank=DEFAULT_RANK, threshold=None, method=None,
                  seed=DEFAULT_SEED, storage_dtype="f32"):
    """Factor one delta at a fixed rank or at the rank an energy threshold selects.

    ``rel_error`` is measured with the float64 factors, ``stored_rel_error``
    with the factors as they will be stored in ``storage_dtype``.
    """
    used = choose_method(method, wd.shape)
    notes = []
    p = min(wd.shape)
    hint = rank if threshold is None else min(DEFAULT_RANK, p)
    svd, curve = analyze_layer(wd, used, hint, threshold, rng=layer_rng(seed, wd.layer_name))
    if threshold is None:
        r = int(rank)
        if r > p:
            notes.append(f"{wd.layer_name}: rank {r} clamped to min(d, k) = {p}")
            r = p
    else:
        r = curve.select_rank(threshold)
    factors = factors_from_svd(wd.layer_name, svd, r, curve.total)
    abs_err, rel_err = reconstruction_error(wd, factors)
    _, stored_err = reconstruction_error(wd, _stored(factors, storage_dtype))
    return LayerOutcome(wd.layer_name, wd.tensor_name, tuple(wd.shape), used, factors.rank,
                        curve.energy_at(factors.rank), abs_err, rel_err, stored_err, factors, notes)


def _map_layers(fn, items, jobs):
    jobs = max(1, int(jobs or os.cpu_count() or 1))
    if jobs == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def _load_pair(base_path, ft_path, targets, timings):
    with _timer(timings, "load"):
        base = load_checkpoint(base_path)
        ft = load_checkpoint(ft_path)
    with _timer(timings, "delta"):
        pairs, report = pair_layers(base, ft, targets)
        deltas = collect_deltas(base, ft, pairs, report)
    return base, ft, deltas, report


def write_manifest(manifest, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(manifest, indent=2) + "\n")


def run_extract(base, finetuned, out, rank=None, energy_threshold=None, targets=None,
                method=None, jobs=None, report=None, adapter_dtype="f32", base_model_id=None):
    """Extract an adapter directory from a checkpoint pair.

    Exactly one of ``rank`` and ``energy_threshold`` may be given; neither
    means rank :data:`DEFAULT_RANK`.
    """
    if rank is not None and energy_threshold is not None:
        raise UsageError("--rank and --energy-threshold are mutually exclusive")
    if energy_threshold is not None and not (0 < energy_threshold <= 1):
        raise UsageError(f"energy threshold must lie in (0, 1], got {energy_threshold}")
    if energy_threshold is None:
        rank = DEFAULT_RANK if rank is None else int(rank)
        if rank < 1:
            raise UsageError(f"rank must be >= 1, got {rank}")
    targets = targets or TargetSpec()
    adapter_dtype = normalize_dtype(adapter_dtype)
    seed = resolve_seed()
    timings = {}
    base_ckpt, ft_ckpt, deltas, pairing = _load_pair(base, finetuned, targets, timings)

    with _timer(timings, "factorize"), warnings.catch_warnings():
        warnings.simplefilter("ignore", RankClampWarning)
        outcomes = _map_layers(
            lambda wd: extract_layer(wd, rank, energy_threshold, method, seed, adapter_dtype),
            deltas, jobs)

    run_warnings = [w for o in outcomes for w in o.warnings]
    out = Path(out)
    manifest_path = Path(report) if report else out / MANIFEST_NAME
    size = {}
    with _timer(timings, "write"):
        if outcomes:
            factors = [o.factors for o in outcomes]
            methods = sorted({o.method for o in outcomes})
            cfg = AdapterConfig.for_factors(
                factors, base_model=base_model_id or str(base),
                method=methods[0] if len(methods) == 1 else "mixed",
                energy_threshold=energy_threshold)
            export_adapter(factors, cfg, out, dtype=adapter_dtype)
            adapter_bytes = (out / WEIGHTS_NAME).stat().st_size
            ft_bytes = Path(finetuned).stat().st_size
            size = {
                "adapter_bytes": adapter_bytes,
                "finetuned_bytes": ft_bytes,
                "compression_ratio": ft_bytes / adapter_bytes,
            }
        else:
            run_warnings.append("no layers with a nonzero delta matched; no adapter written")

    exit_code = 2 if (pairing.partial or not outcomes) else 0
    manifest = {
        "command": "extract",
        "version": __version__,
        "inputs": {"base": str(base), "finetuned": str(finetuned), "out": str(out)},
        "target_spec": targets.to_dict(),
        "settings": {
            "rank": rank,
            "energy_threshold": energy_threshold,
            "method": method or "auto",
            "seed": seed,
            "adapter_dtype": adapter_dtype,
        },
        "pairing": pairing.to_dict(),
        "layers": [o.to_dict() for o in outcomes],
        "rank_pattern": {o.layer_name: o.rank for o in outcomes},
        "size": size,
        "warnings": run_warnings,
        "exit_code": exit_code,
        "timings": timings,
    }
    write_manifest(manifest, manifest_path)
    return manifest, exit_code


def run_analyze(base, finetuned, ranks=(32, 64, 512), csv_path=None, json_path=None,
                energy_threshold=None, targets=None, method=None, jobs=None, report=None):
    """Energy report for a checkpoint pair; no adapter is written."""
    probes, probe_warning = normalize_probe_ranks(ranks)
    if energy_threshold is not None and not (0 < energy_threshold <= 1):
        raise UsageError(f"energy threshold must lie in (0, 1], got {energy_threshold}")
    targets = targets or TargetSpec()
    seed = resolve_seed()
    timings = {}
    _, _, deltas, pairing = _load_pair(base, finetuned, targets, timings)

    def curve_for(wd):
        used = choose_method(method, wd.shape)
        _, curve = analyze_layer(wd, used, max(probes), energy_threshold,
                                 rng=layer_rng(seed, wd.layer_name))
        return curve

    with _timer(timings, "analyze"):
        curves = _map_layers(curve_for, deltas, jobs)
        energy = build_report(curves, probes, threshold=energy_threshold)
    if probe_warning:
        energy.warnings = [probe_warning]
    if not curves:
        energy.warnings.append("no layers with a nonzero delta matched")
    if csv_path:
        energy.write_csv(csv_path)
        energy.write_json(json_path or Path(csv_path).with_suffix(".json"))
    elif json_path:
        energy.write_json(json_path)

    exit_code = 2 if (pairing.partial or not curves) else 0
    manifest = {
        "command": "analyze",
        "version": __version__,
        "inputs": {"base": str(base), "finetuned": str(finetuned)},
        "target_spec": targets.to_dict(),
        "settings": {"ranks": probes, "energy_threshold": energy_threshold,
                     "method": method or "auto", "seed": seed},
        "pairing": pairing.to_dict(),
        "energy": energy.to_dict(),
        "warnings": list(energy.warnings),
        "exit_code": exit_code,
        "timings": timings,
    }
    if report:
        write_manifest(manifest, report)
    return manifest, exit_code


def _base_tensor_for(ckpt, layer_name):
    for name in (layer_name + ".weight", layer_name):
        if name in ckpt:
            return name
    return None


def run_merge(base, adapter, out, dtype=None, report=None):
    """Write ``base + B @ A`` for every adapter layer; other tensors are copied byte for byte.

    ``dtype`` only affects the modified tensors; ``None`` keeps each
    tensor's own dtype.
    """
    timings = {}
    with _timer(timings, "load"):
        base_ckpt = load_checkpoint(base)
        factors, cfg = import_adapter(adapter)
    targets = {f.layer_name: _base_tensor_for(base_ckpt, f.layer_name) for f in factors}
    missing = sorted(k for k, v in targets.items() if v is None)
    if missing:
        raise AdapterError(f"adapter layers absent from base checkpoint: {missing}")
    dtype = normalize_dtype(dtype) if dtype else None

    merged = {}
    with _timer(timings, "merge"):
        for f in factors:
            name = targets[f.layer_name]
            rec = base_ckpt.tensors[name]
            w = merge(base_ckpt.matrix(name), f)
            out_dtype = dtype or rec.dtype
            merged[name] = (out_dtype, encode_array(w, out_dtype))

    entries = []
    for name, rec in base_ckpt.tensors.items():
        if name in merged:
            dt, raw = merged[name]
            entries.append((name, dt, rec.shape, raw))
        else:
            entries.append((name, rec.dtype, rec.shape, base_ckpt.raw(name)))
    with _timer(timings, "write"):
        save_checkpoint(Checkpoint.from_entries(entries, base_ckpt.metadata), out)

    manifest = {
        "command": "merge",
        "version": __version__,
        "inputs": {"base": str(base), "adapter": str(adapter), "out": str(out)},
        "settings": {"dtype": dtype},
        "layers": [{"layer": f.layer_name, "tensor": targets[f.layer_name], "rank": f.rank,
                    "scale": f.scale, "dtype": merged[targets[f.layer_name]][0]} for f in factors],
        "untouched": [n for n in base_ckpt.tensors if n not in merged],
        "warnings": [],
        "exit_code": 0,
        "timings": timings,
    }
    if report:
        write_manifest(manifest, report)
    return manifest, 0


def run_verify(base, finetuned, adapter, rtol=VERIFY_RTOL, report=None):
    """Check each adapter layer against a fresh SVD of its delta.

    A layer passes when ``| ||dW - BA||_F^2 - sum_{i>r} sigma_i^2 | <=
    rtol * ||dW||_F^2``: the residual must be exactly the discarded tail,
    which only the truncated SVD achieves.
    """
    timings = {}
    with _timer(timings, "load"):
        base_ckpt = load_checkpoint(base)
        ft_ckpt = load_checkpoint(finetuned)
        factors, cfg = import_adapter(adapter)

    resolved, problems = [], []
    for f in factors:
        name = _base_tensor_for(base_ckpt, f.layer_name)
        if name is None or name not in ft_ckpt:
            problems.append(f"{f.layer_name}: tensor missing from base or fine-tuned checkpoint")
            continue
        shape = base_ckpt.tensors[name].shape
        if len(shape) != 2 or tuple(shape) != f.shape:
            problems.append(f"{f.layer_name}: adapter shape {f.shape} does not match tensor {list(shape)}")
        elif f.rank > min(shape):
            problems.append(f"{f.layer_name}: adapter rank {f.rank} exceeds min(d, k) = {min(shape)}")
        resolved.append((f, name))
    if problems:
        raise AdapterError("adapter does not fit the checkpoints: " + "; ".join(problems))

    results = []
    with _timer(timings, "verify"):
        for f, name in resolved:
            wd = compute_delta(base_ckpt.matrix(name), ft_ckpt.matrix(name), f.layer_name, name)
            sigma = svd_thin(wd.delta).sigma
            tail = float(np.sum(sigma[f.rank:] ** 2))
            total = float(np.sum(sigma ** 2))
            resid = float(np.linalg.norm(wd.delta - f.product()) ** 2)
            ok = abs(resid - tail) <= rtol * total
            results.append({"layer": f.layer_name, "rank": f.rank, "residual_sq": resid,
                            "tail_energy": tail, "total_energy": total, "passed": bool(ok)})
    failed = [r["layer"] for r in results if not r["passed"]]
    exit_code = 1 if failed else 0
    manifest = {
        "command": "verify",
        "version": __version__,
        "inputs": {"base": str(base), "finetuned": str(finetuned), "adapter": str(adapter)},
        "settings": {"rtol": rtol},
        "layers": results,
        "failed": failed,
        "warnings": [],
        "exit_code": exit_code,
        "timings": timings,
    }
    if report:
        write_manifest(manifest, report)
    return manifest, exit_code
