from __future__ import annotations

import numpy as np
import pytest
from scipy import signal

from app.autodiff import Tape, constant, parameter, tsum
from app.frontend.cochlea import InputTooShortError
from app.frontend.cortex import (
    N_FILTERS,
    CorticalParams,
    CorticalRangeError,
    cortical_forward,
    init_cortical,
    kernel_half_extents,
    strf_kernel,
)
from app.optim import grad_check
from app.signal_io import gen_moving_ripple


def test_log_grid_covers_both_directions():
    p = init_cortical("log")
    pairs = p.pairs()
    assert len(pairs) == N_FILTERS
    assert pairs[0] == (0.5, 1.0)
    assert pairs[20] == (0.5, -1.0)
    assert sum(1 for _, r in pairs if r < 0) == 20
    assert {s for s, _ in pairs} == {0.5, 1.0, 2.0, 4.0}
    assert {abs(r) for _, r in pairs} == {1.0, 2.0, 4.0, 8.0, 16.0}


def test_random_init_is_seeded_and_in_range():
    a = init_cortical("random", seed=3)
    b = init_cortical("random", seed=3)
    c = init_cortical("random", seed=4)
    np.testing.assert_array_equal(a.scale.value, b.scale.value)
    assert not np.array_equal(a.rate.value, c.rate.value)
    assert np.all((a.scale.value >= 0.05) & (a.scale.value <= 9.0))
    assert np.all((np.abs(a.rate.value) >= 0.1) & (np.abs(a.rate.value) <= 9.0))
    with pytest.raises(ValueError):
        init_cortical("uniform")


def test_kernel_extents():
    assert kernel_half_extents(1.0, 4.0) == (24, 50)
    assert kernel_half_extents(0.5, 1.0) == (48, 200)
    assert kernel_half_extents(4.0, -16.0) == (6, 13)


def test_kernel_is_zero_mean_unit_norm():
    kernel = strf_kernel(2.0, -8.0).value
    assert kernel.shape == (2 * 12 + 1, 2 * 25 + 1)
    assert abs(kernel.sum()) < 1e-10
    assert np.sum(kernel**2) == pytest.approx(1.0)


def test_rate_sign_flips_time_direction():
    up = strf_kernel(1.0, 4.0).value
    down = strf_kernel(1.0, -4.0).value
    np.testing.assert_allclose(down, up[:, ::-1], atol=1e-12)


def test_kernel_range_checks():
    with pytest.raises(CorticalRangeError):
        strf_kernel(0.01, 4.0)
    with pytest.raises(CorticalRangeError):
        strf_kernel(1.0, 0.0)
    with pytest.raises(CorticalRangeError):
        strf_kernel(1.0, 150.0)


def test_clipped_support_crops_the_full_kernel():
    full = strf_kernel(0.5, 1.0).value
    kernel = strf_kernel(0.5, 1.0, max_extents=(30, 40)).value
    assert kernel.shape == (61, 81)
    np.testing.assert_array_equal(kernel, full[48 - 30 : 48 + 31, 200 - 40 : 200 + 41])
    assert np.sum(kernel**2) < 1.0


def test_clipped_output_matches_the_full_kernel():
    spec = np.random.default_rng(2).standard_normal((20, 60))
    p = CorticalParams(scale=parameter([0.5]), rate=parameter([-1.0]))
    full = strf_kernel(0.5, -1.0).value
    expected = signal.correlate(spec, full, mode="same")
    np.testing.assert_allclose(cortical_forward(constant(spec), p).value[0], expected, atol=1e-10)


def test_gradients_at_the_lower_scale_bound():
    p = CorticalParams(scale=parameter([0.05], name="scale"), rate=parameter([-3.3], name="rate"))
    spec = constant(np.random.default_rng(0).standard_normal((20, 60)))
    report = grad_check(lambda: tsum(cortical_forward(spec, p) ** 2.0), p.tensors(), tol=1e-4, atol=1e-8)
    assert [row.status for row in report.rows] == ["pass", "pass"]
    np.testing.assert_array_equal(p.scale.value, [0.05])


def test_forward_shape():
    spec = constant(gen_moving_ripple(1.0, 4.0, 0.5))
    out = cortical_forward(spec, init_cortical("log"))
    assert out.shape == (40, 129, 100)
    assert np.all(np.isfinite(out.value))


def test_forward_is_linear_in_the_spectrogram():
    rng = np.random.default_rng(5)
    s1, s2 = rng.standard_normal((2, 30, 80))
    p = CorticalParams(scale=parameter([0.5, 2.0, 1.3]), rate=parameter([1.0, -8.0, 3.3]))
    combined = cortical_forward(constant(2.5 * s1 - 0.75 * s2), p).value
    expected = 2.5 * cortical_forward(constant(s1), p).value - 0.75 * cortical_forward(constant(s2), p).value
    np.testing.assert_allclose(combined, expected, atol=1e-10)


def test_strict_support_rejects_short_input():
    spec = constant(gen_moving_ripple(1.0, 4.0, 0.5))
    with pytest.raises(InputTooShortError, match="use at least"):
        cortical_forward(spec, init_cortical("log"), clip_support=False)


def test_filter_prefers_its_own_direction():
    p = CorticalParams(scale=parameter([1.0, 1.0]), rate=parameter([4.0, -4.0]))
    ripple = constant(gen_moving_ripple(1.0, -4.0, 2.0, amplitude=1.0) - 1.0)
    energy = np.mean(cortical_forward(ripple, p).value ** 2, axis=(1, 2))
    # a downward-moving ripple (negative rate) excites the negative-rate filter
    assert energy[1] > 5.0 * energy[0]


def test_gradients_reach_scale_and_rate():
    p = CorticalParams(scale=parameter([1.5, 0.7], name="scale"), rate=parameter([3.0, -5.0], name="rate"))
    spec = constant(gen_moving_ripple(1.0, 4.0, 0.5))
    with Tape() as tape:
        loss = tsum(cortical_forward(spec, p) ** 2.0)
    tape.backward(loss)
    assert np.all(p.scale.grad != 0.0)
    assert np.all(p.rate.grad != 0.0)


def test_gradients_match_finite_differences():
    # off the support-size boundaries, where the response is smooth in (scale, rate)
    p = CorticalParams(scale=parameter([1.3], name="scale"), rate=parameter([-3.3], name="rate"))
    spec = constant(np.random.default_rng(0).standard_normal((20, 60)))
    report = grad_check(lambda: tsum(cortical_forward(spec, p) ** 2.0), p.tensors(), tol=1e-4, atol=1e-8)
    assert report.passed, report.failures


def _energy(scale: float, rate: float, ripple_params: tuple[float, float]) -> float:
    p = CorticalParams(scale=parameter([scale]), rate=parameter([rate]))
    ripple = constant(gen_moving_ripple(ripple_params[0], ripple_params[1], 2.0, amplitude=1.0) - 1.0)
    return float(np.mean(cortical_forward(ripple, p).value ** 2))


def test_orientation_selectivity_exceeds_6db():
    matched = _energy(2.0, 4.0, (2.0, 4.0))
    flipped = _energy(2.0, 4.0, (2.0, -4.0))
    assert 10.0 * np.log10(matched / flipped) > 6.0


def test_matched_ripple_beats_distant_ripple():
    matched = _energy(1.0, 2.0, (1.0, 2.0))
    distant = _energy(1.0, 2.0, (4.0, 8.0))
    assert 10.0 * np.log10(matched / distant) > 6.0
