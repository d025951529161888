"""Self-checks for the finite-difference harness (subsampled for speed)."""

import pytest

from fectek.gradcheck import GradCheckReport, GroupResult, run_gradient_check


def test_subsampled_run_passes_default_seed():
    report = run_gradient_check(seed=42, max_coords_per_group=3)
    assert report.passed
    assert report.worst <= report.tolerance


def test_every_parameter_group_listed_exactly_once():
    report = run_gradient_check(seed=42, max_coords_per_group=1)
    names = [g.name for g in report.groups]
    assert len(names) == len(set(names))
    assert "embeddings.token" in names
    assert "feature_gate.excite.weight" in names
    assert "weight_head.weight" in names
    assert "prob_head.bias" in names
    assert any(name.startswith("layers.0.attn") for name in names)


def test_every_group_has_live_analytic_gradient():
    # A probe batch where some group's gradient is identically zero would
    # make that group's comparison vacuous.
    report = run_gradient_check(seed=42, max_coords_per_group=2)
    for group in report.groups:
        assert group.checked > 0, group.name


def test_corrupted_group_fails_and_is_worst():
    report = run_gradient_check(
        seed=42, corrupt_group="prob_head.weight", max_coords_per_group=3
    )
    assert not report.passed
    worst = max(report.groups, key=lambda g: g.max_error)
    assert worst.name == "prob_head.weight"
    assert worst.max_error > report.tolerance


def test_unknown_corrupt_group_rejected():
    with pytest.raises(ValueError, match="unknown parameter group"):
        run_gradient_check(seed=42, corrupt_group="nope.weight")


def test_report_properties():
    report = GradCheckReport(
        eps=1e-3,
        tolerance=1e-4,
        groups=[GroupResult("a", 2e-5, 4), GroupResult("b", 9e-5, 2)],
    )
    assert report.worst == 9e-5
    assert report.passed
    report.groups.append(GroupResult("c", 2e-4, 1))
    assert not report.passed
