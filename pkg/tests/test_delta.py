import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lora_extract.checkpoint import Checkpoint
from lora_extract.delta import (
    PairingReport,
    TargetSpec,
    collect_deltas,
    compute_delta,
    glob_match,
    is_zero_delta,
    layer_name_for,
    pair_layers,
)
from lora_extract.errors import ShapeMismatch


def ckpt(**arrays):
    return Checkpoint.from_arrays({k.replace("__", "."): v for k, v in arrays.items()}, "f64")


def test_pairing_skips_bias_and_unselected():
    base = ckpt(q_proj__weight=np.zeros((4, 4)), q_proj__bias=np.zeros(4), lm_head__weight=np.zeros((3, 4)))
    ft = ckpt(q_proj__weight=np.ones((4, 4)), q_proj__bias=np.ones(4), lm_head__weight=np.ones((3, 4)))
    pairs, report = pair_layers(base, ft, TargetSpec(include_patterns=("*_proj*",)))
    assert [p[0] for p in pairs] == ["q_proj.weight"]
    assert report.skipped_non_2d == ["q_proj.bias"]
    assert report.skipped_by_pattern == ["lm_head.weight"]
    assert not report.partial


def test_only_in_one_side():
    base = ckpt(a=np.zeros((2, 2)), gone=np.zeros((2, 2)))
    ft = ckpt(a=np.ones((2, 2)), new=np.zeros((2, 2)))
    _, report = pair_layers(base, ft)
    assert report.only_in_base == ["gone"]
    assert report.only_in_ft == ["new"]
    assert report.partial
    assert "gone" in report.reasons and "new" in report.reasons


def test_shape_mismatch_names_layer():
    with pytest.raises(ShapeMismatch, match="w"):
        pair_layers(ckpt(w=np.zeros((2, 3))), ckpt(w=np.zeros((3, 2))))


def test_min_dim_filter():
    base = ckpt(small=np.zeros((2, 16)), big=np.zeros((16, 16)))
    pairs, report = pair_layers(base, base, TargetSpec(min_dim=8))
    assert [p[0] for p in pairs] == ["big"]
    assert report.skipped_by_pattern == ["small"]


def test_exclude_wins_over_include():
    base = ckpt(a__q=np.zeros((2, 2)), a__k=np.zeros((2, 2)))
    pairs, _ = pair_layers(base, base, TargetSpec(("a.*",), ("*.k",)))
    assert [p[0] for p in pairs] == ["a.q"]


@pytest.mark.parametrize("spec_args", [dict(include_patterns=()), dict(min_dim=0)])
def test_target_spec_validation(spec_args):
    with pytest.raises(ValueError):
        TargetSpec(**spec_args)


@pytest.mark.parametrize("name, pattern, expected", [
    ("model.layers.0.self_attn.q_proj.weight", "*q_proj*", True),
    ("model.layers.0.self_attn.q_proj.weight", "*Q_PROJ*", False),
    ("layers.1.mlp", "layers.?.mlp", True),
    ("layers.10.mlp", "layers.?.mlp", False),
    ("a+b", "a+b", True),
    ("axb", "a.b", False),
    ("anything", "*", True),
    ("", "*", True),
    ("x[0]", "x[0]", True),
])
def test_glob_match(name, pattern, expected):
    assert glob_match(name, pattern) is expected


@pytest.mark.parametrize("tensor, layer", [
    ("model.q_proj.weight", "model.q_proj"),
    ("model.embed.table", "model.embed.table"),
    ("weight", "weight"),
])
def test_layer_name_for(tensor, layer):
    assert layer_name_for(tensor) == layer


def test_delta_examples():
    wd = compute_delta([[1.0, 2.0], [3.0, 4.0]], [[1.5, 2.0], [3.0, 3.0]], "l")
    np.testing.assert_array_equal(wd.delta, [[0.5, 0.0], [0.0, -1.0]])
    assert (wd.d, wd.k, wd.layer_name) == (2, 2, "l")
    same = compute_delta(np.eye(3), np.eye(3))
    np.testing.assert_array_equal(same.delta, np.zeros((3, 3)))
    with pytest.raises(ShapeMismatch):
        compute_delta(np.zeros((2, 3)), np.zeros((3, 2)))


def test_delta_is_antisymmetric(rng):
    a, b = rng.standard_normal((2, 5, 4))
    np.testing.assert_array_equal(compute_delta(a, b).delta, -compute_delta(b, a).delta)
    np.testing.assert_allclose(compute_delta(a, b).delta + a, b, rtol=0, atol=4e-16 * np.abs(b).max())


def test_zero_delta_detection():
    w = np.eye(4)
    assert is_zero_delta(np.zeros((4, 4)), w)
    assert is_zero_delta(np.full((4, 4), 1e-14), w)
    assert not is_zero_delta(np.full((4, 4), 1e-6), w)


def test_collect_moves_zero_deltas(rng):
    w = rng.standard_normal((4, 3))
    base = ckpt(same__weight=w, moved__weight=w)
    ft = ckpt(same__weight=w, moved__weight=w + 1.0)
    pairs, report = pair_layers(base, ft)
    deltas = collect_deltas(base, ft, pairs, report)
    assert [d.layer_name for d in deltas] == ["moved"]
    assert deltas[0].tensor_name == "moved.weight"
    assert report.matched == ["moved.weight"]
    assert report.skipped_zero_delta == ["same.weight"]
    assert report.partial


names = st.text(alphabet="abq._", min_size=1, max_size=6)


@settings(max_examples=100, deadline=None)
@given(st.sets(names, max_size=6), st.sets(names, max_size=6), st.sampled_from(["*", "*q*", "a*", "?"]))
def test_report_partitions_union(base_names, ft_names, pattern):
    shapes = [(2, 2), (3,), (2, 1)]
    base = Checkpoint.from_arrays({n: np.zeros(shapes[len(n) % 3]) for n in base_names}, "f64")
    ft = Checkpoint.from_arrays({n: np.ones(shapes[len(n) % 3]) for n in ft_names}, "f64")
    pairs, report = pair_layers(base, ft, TargetSpec((pattern,)))
    collect_deltas(base, ft, pairs, report)
    listed = report.all_names()
    assert len(listed) == len(set(listed))
    assert set(listed) == base_names | ft_names
    assert set(report.reasons) == set(listed) - set(report.matched)
    assert isinstance(report, PairingReport)
