import numpy as np
import pytest

from lora_extract.checkpoint import Checkpoint, save_checkpoint


def orthonormal(rng, n, k):
    q, _ = np.linalg.qr(rng.standard_normal((n, k)))
    return q


def low_rank(rng, shape, sigma):
    """``U diag(sigma) V^T`` with random orthonormal U, V; singular values known exactly."""
    sigma = np.asarray(sigma, dtype=np.float64)
    u = orthonormal(rng, shape[0], sigma.size)
    v = orthonormal(rng, shape[1], sigma.size)
    return (u * sigma) @ v.T


def decaying(rng, shape, ratio=0.8):
    """Full-rank matrix with geometrically decaying spectrum ``ratio**i``."""
    p = min(shape)
    return low_rank(rng, shape, ratio ** np.arange(p))


def write_pair(tmp_path, layers, dtype="f64", extra=True, seed=0):
    """Base and fine-tuned checkpoints whose layer deltas are given.

    ``layers`` maps tensor name -> delta matrix (``None`` for an unchanged
    layer). With ``extra`` a 1-D bias and an untargeted embedding are added;
    both differ between base and fine-tuned.
    """
    rng = np.random.default_rng(seed)
    base, ft = {}, {}
    for name, delta in layers.items():
        shape = delta.shape if delta is not None else (8, 8)
        w = rng.standard_normal(shape)
        base[name] = w
        ft[name] = w if delta is None else w + delta
    if extra:
        base["model.norm.bias"] = rng.standard_normal(7)
        ft["model.norm.bias"] = base["model.norm.bias"] + 0.5
        base["model.embed.table"] = rng.standard_normal((5, 3))
        ft["model.embed.table"] = base["model.embed.table"] + 1.0
    bp, fp = tmp_path / "base.safetensors", tmp_path / "ft.safetensors"
    save_checkpoint(Checkpoint.from_arrays(base, dtype, {"origin": "base"}), bp)
    save_checkpoint(Checkpoint.from_arrays(ft, dtype, {"origin": "ft"}), fp)
    return bp, fp


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# ---------------------------------------------------------------- acceptance summary

_CRITERIA = {}


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.failed):
        return
    for key in report.keywords:
        if key.startswith("criterion_"):
            n = int(key.split("_", 1)[1])
            prev = _CRITERIA.get(n, True)
            _CRITERIA[n] = prev and report.passed


def pytest_collection_modifyitems(items):
    for item in items:
        marker = item.get_closest_marker("criterion")
        if marker is not None:
            item.add_marker(f"criterion_{marker.args[0]}")


def pytest_configure(config):
    for n in range(1, 8):
        config.addinivalue_line("markers", f"criterion_{n}: acceptance criterion {n}")


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status = "PASS" if _CRITERIA[n] else "FAIL"
        terminalreporter.write_line(f"criterion {n}: {status}")
