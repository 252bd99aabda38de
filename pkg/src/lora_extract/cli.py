"""Command-line entry point: ``lora-extract {extract,analyze,merge,verify}``.

Exit codes: 0 success, 2 partial success (some candidate layers had a zero
delta or were missing from one checkpoint), 1 usage or hard error.
"""
from __future__ import annotations

import argparse
import sys

from . import __version__
from .delta import TargetSpec
from .errors import LoraExtractError
from .pipeline import DEFAULT_RANK, run_analyze, run_extract, run_merge, run_verify

DTYPES = ("f32", "f16", "bf16", "f64")


class _Parser(argparse.ArgumentParser):
    """Usage errors exit with 1, not argparse's default 2 (reserved for partial success)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _positive_int(text):
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def _threshold(text):
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not (0 < value <= 1):
        raise argparse.ArgumentTypeError(f"must lie in (0, 1], got {value}")
    return value


def _rank_list(text):
    try:
        ranks = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not ranks or any(r < 1 for r in ranks):
        raise argparse.ArgumentTypeError(f"ranks must be positive integers, got {text!r}")
    return ranks


def _add_targets(p):
    p.add_argument("--target-pattern", action="append", metavar="GLOB",
                   help="include tensors whose name matches GLOB (* any substring, ? one char); "
                        "repeatable; default: every 2-D tensor")
    p.add_argument("--exclude-pattern", action="append", default=[], metavar="GLOB",
                   help="exclude matching tensors; repeatable")
    p.add_argument("--min-dim", type=_positive_int, default=1,
                   help="skip layers with min(d, k) below this (default: 1)")


def _add_compute(p):
    p.add_argument("--method", choices=("exact", "randomized"), default=None,
                   help="SVD method; default picks randomized when min(d, k) > 2048 "
                        "(seed 42, override with PHLORA_SEED)")
    p.add_argument("--jobs", type=_positive_int, default=None,
                   help="layers processed in parallel (default: number of processors)")


def _targets(args):
    return TargetSpec(tuple(args.target_pattern or ("*",)), tuple(args.exclude_pattern), args.min_dim)


def build_parser():
    parser = _Parser(prog="lora-extract", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("extract", help="extract a LoRA adapter from a base/fine-tuned pair")
    p.add_argument("--base", required=True, help="base checkpoint file")
    p.add_argument("--finetuned", required=True, help="fine-tuned checkpoint file")
    p.add_argument("--out", required=True, help="adapter output directory")
    group = p.add_mutually_exclusive_group()
    group.add_argument("--rank", type=_positive_int, help=f"global adapter rank (default: {DEFAULT_RANK})")
    group.add_argument("--energy-threshold", type=_threshold,
                       help="per-layer rank: smallest r whose preserved energy reaches this")
    _add_targets(p)
    _add_compute(p)
    p.add_argument("--adapter-dtype", choices=DTYPES, default="f32",
                   help="storage dtype of A and B (default: f32)")
    p.add_argument("--base-model-id", default=None,
                   help="base_model_name_or_path written to the config (default: --base path)")
    p.add_argument("--report", default=None,
                   help="manifest path (default: <out>/extraction_manifest.json)")

    p = sub.add_parser("analyze", help="preserved-energy report, no adapter written")
    p.add_argument("--base", required=True)
    p.add_argument("--finetuned", required=True)
    p.add_argument("--ranks", type=_rank_list, default=[32, 64, 512],
                   help="comma-separated probe ranks (default: 32,64,512)")
    p.add_argument("--csv", default=None, help="CSV output; a JSON mirror is written next to it")
    p.add_argument("--json", default=None, help="JSON output path (default: CSV path with .json)")
    p.add_argument("--energy-threshold", type=_threshold, default=None,
                   help="also report the rank each layer needs to reach this energy")
    _add_targets(p)
    _add_compute(p)
    p.add_argument("--report", default=None, help="manifest path")

    p = sub.add_parser("merge", help="write base + B @ A as a new checkpoint")
    p.add_argument("--base", required=True)
    p.add_argument("--adapter", required=True, help="adapter directory")
    p.add_argument("--out", required=True, help="merged checkpoint file")
    p.add_argument("--dtype", choices=DTYPES, default=None,
                   help="dtype of merged layers only (default: keep each tensor's dtype); "
                        "other tensors are copied unchanged")
    p.add_argument("--report", default=None, help="manifest path")

    p = sub.add_parser("verify", help="check an adapter against the optimal truncated SVD")
    p.add_argument("--base", required=True)
    p.add_argument("--finetuned", required=True)
    p.add_argument("--adapter", required=True)
    p.add_argument("--report", default=None, help="manifest path")
    return parser


def _summarize(manifest):
    cmd = manifest["command"]
    if cmd == "extract":
        layers = manifest["layers"]
        print(f"extracted {len(layers)} layer(s) into {manifest['inputs']['out']}")
        size = manifest.get("size") or {}
        if size:
            print(f"adapter {size['adapter_bytes']} bytes, fine-tuned checkpoint "
                  f"{size['finetuned_bytes']} bytes (ratio {size['compression_ratio']:.1f}x)")
    elif cmd == "analyze":
        energy = manifest["energy"]
        means = {row["rank"]: row["energy"] for row in energy["rows"]
                 if row["layer"] == "__model_mean__"}
        for r in energy["probe_ranks"]:
            if r in means:
                print(f"rank {r}: mean preserved energy {means[r]:.6g}")
    elif cmd == "merge":
        print(f"merged {len(manifest['layers'])} layer(s) into {manifest['inputs']['out']}")
    elif cmd == "verify":
        for row in manifest["layers"]:
            status = "ok  " if row["passed"] else "FAIL"
            print(f"{status} {row['layer']}: residual^2 {row['residual_sq']:.6e} "
                  f"tail {row['tail_energy']:.6e}")
    for w in manifest.get("warnings", []):
        print(f"warning: {w}", file=sys.stderr)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "extract":
            manifest, code = run_extract(
                args.base, args.finetuned, args.out, rank=args.rank,
                energy_threshold=args.energy_threshold, targets=_targets(args),
                method=args.method, jobs=args.jobs, report=args.report,
                adapter_dtype=args.adapter_dtype, base_model_id=args.base_model_id)
        elif args.command == "analyze":
            manifest, code = run_analyze(
                args.base, args.finetuned, ranks=args.ranks, csv_path=args.csv,
                json_path=args.json, energy_threshold=args.energy_threshold,
                targets=_targets(args), method=args.method, jobs=args.jobs, report=args.report)
        elif args.command == "merge":
            manifest, code = run_merge(args.base, args.adapter, args.out, dtype=args.dtype,
                                       report=args.report)
        else:
            manifest, code = run_verify(args.base, args.finetuned, args.adapter, report=args.report)
    except (LoraExtractError, OSError) as exc:
        print(f"lora-extract {args.command}: error: {exc}", file=sys.stderr)
        return 1
    _summarize(manifest)
    if args.command == "verify" and code:
        for row in manifest["layers"]:
            if not row["passed"]:
                print(f"{row['layer']} failed: residual^2 {row['residual_sq']!r} "
                      f"!= tail {row['tail_energy']!r}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
