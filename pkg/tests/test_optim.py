from __future__ import annotations

import numpy as np
import pytest

from app.autodiff import mul, parameter, tsum
from app.optim import (
    AdamState,
    NonFiniteGradientError,
    adam_step,
    clamp_parameters,
    grad_check,
    relative_error,
)


def test_first_adam_step_moves_by_learning_rate():
    p = parameter([1.0, -1.0, 2.0], name="p")
    state = AdamState(lr=0.01)
    adam_step(state, {"p": p}, {"p": np.array([0.5, -3.0, 0.0])})
    # bias-corrected first step is lr * sign(g) for non-zero gradients
    np.testing.assert_allclose(p.value, [0.99, -0.99, 2.0], atol=1e-6)
    assert state.t == 1
    np.testing.assert_allclose(state.m["p"], [0.05, -0.3, 0.0])


def test_adam_minimizes_a_quadratic():
    p = parameter([3.0, -2.0], name="p")
    state = AdamState(lr=0.1)
    for _ in range(500):
        adam_step(state, {"p": p}, {"p": 2.0 * p.value})
    np.testing.assert_allclose(p.value, [0.0, 0.0], atol=0.1)


def test_adam_rejects_non_finite_gradients_without_updating():
    p = parameter([1.0], name="p")
    state = AdamState()
    with pytest.raises(NonFiniteGradientError) as info:
        adam_step(state, {"p": p}, {"p": np.array([np.nan])})
    assert info.value.names == ["p"]
    assert state.t == 0
    np.testing.assert_array_equal(p.value, [1.0])


def test_adam_rejects_bad_learning_rate_and_shapes():
    p = parameter([1.0], name="p")
    with pytest.raises(ValueError):
        adam_step(AdamState(lr=0.0), {"p": p}, {"p": np.array([1.0])})
    with pytest.raises(ValueError):
        adam_step(AdamState(), {"p": p}, {"p": np.array([1.0, 2.0])})


def test_clamp_parameters_enforces_ranges():
    params = {
        "frontend/cochlea.alpha": parameter([0.5, -1.0]),
        "frontend/cochlea.tau": parameter(0.01),
        "frontend/cortex.scale": parameter([0.0, 20.0, 1.0]),
        "frontend/cortex.rate": parameter([-0.01, 150.0, 4.0]),
        "backend/classifier.head.bias": parameter([-1e6]),
    }
    changed = clamp_parameters(params)
    np.testing.assert_allclose(params["frontend/cochlea.alpha"].value, [0.5, 0.01])
    assert float(params["frontend/cochlea.tau"].value) == pytest.approx(0.1)
    np.testing.assert_allclose(params["frontend/cortex.scale"].value, [0.05, 12.0, 1.0])
    np.testing.assert_allclose(params["frontend/cortex.rate"].value, [-0.1, 100.0, 4.0])
    np.testing.assert_array_equal(params["backend/classifier.head.bias"].value, [-1e6])
    assert "backend/classifier.head.bias" not in changed
    assert len(changed) == 4


def test_grad_check_passes_for_correct_gradients():
    x = parameter([0.3, -1.2, 2.0], name="x")
    report = grad_check(lambda: tsum(mul(mul(x, x), x)), {"x": x}, tol=1e-6)
    assert report.passed
    assert len(report.rows) == 3
    np.testing.assert_array_equal(x.value, [0.3, -1.2, 2.0])


def test_grad_check_component_subset():
    x = parameter(np.arange(6.0).reshape(2, 3), name="x")
    report = grad_check(lambda: tsum(mul(x, x)), {"x": x}, components={"x": [(1, 2), (0, 0)]}, atol=1e-8)
    assert [row.index for row in report.rows] == [(1, 2), (0, 0)]
    assert report.passed


def test_relative_error_is_symmetric():
    assert relative_error(1.0, 1.1) == pytest.approx(relative_error(1.1, 1.0))
    assert relative_error(0.0, 0.0) == 0.0


def test_grad_check_goes_one_sided_at_a_domain_edge():
    x = parameter([0.0, 1.0], name="x")

    def f():
        if np.any(x.value < 0.0):
            raise ValueError("x must be non-negative")
        return tsum(mul(x, x) + x)

    report = grad_check(f, {"x": x}, tol=1e-6, atol=1e-8)
    assert [row.status for row in report.rows] == ["pass", "pass"]
    assert report.rows[0].numeric == pytest.approx(1.0, rel=1e-6)
    np.testing.assert_array_equal(x.value, [0.0, 1.0])


def test_grad_check_flags_components_with_no_evaluable_side():
    x = parameter([2.0], name="x")
    pinned = x.value.copy()

    def f():
        if not np.array_equal(x.value, pinned):
            raise ValueError("x is pinned")
        return tsum(mul(x, x))

    report = grad_check(f, {"x": x})
    assert report.rows[0].status == "non-evaluable"
    assert np.isnan(report.rows[0].numeric)
    assert not report.passed
    assert report.failures == report.rows
    np.testing.assert_array_equal(x.value, [2.0])
