"""Post-hoc LoRA adapter extraction from base / fine-tuned checkpoint pairs.

The weight delta of every target layer is factored by truncated SVD into
``B @ A`` with the singular values split evenly between the two factors.
The package also measures how much of each delta's energy a given rank
keeps, writes PEFT-style adapter directories, and merges adapters back.
"""

__version__ = "0.1.0"

from .adapter import AdapterConfig, export_adapter, import_adapter
from .checkpoint import (
    Checkpoint,
    TensorRecord,
    from_matrix,
    load_checkpoint,
    save_checkpoint,
    to_matrix,
)
from .delta import PairingReport, TargetSpec, WeightDelta, compute_delta, pair_layers
from .energy import EnergyCurve, EnergyReport, build_report, preserved_energy, select_rank
from .errors import *  # noqa: F401,F403
from .factorize import LoraFactors, factorize, merge, reconstruction_error
from .linalg import SvdResult, frobenius_norm, matmul, svd_thin, svd_truncated

__all__ = [
    "AdapterConfig",
    "Checkpoint",
    "EnergyCurve",
    "EnergyReport",
    "LoraFactors",
    "PairingReport",
    "SvdResult",
    "TargetSpec",
    "TensorRecord",
    "WeightDelta",
    "build_report",
    "compute_delta",
    "export_adapter",
    "factorize",
    "frobenius_norm",
    "from_matrix",
    "import_adapter",
    "load_checkpoint",
    "matmul",
    "merge",
    "pair_layers",
    "preserved_energy",
    "reconstruction_error",
    "save_checkpoint",
    "select_rank",
    "svd_thin",
    "svd_truncated",
    "to_matrix",
]
