import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from bayesccp.mortality_basis import (
    BasisError,
    build_basis,
    logit_schedule,
    principal_components,
    projection_residuals,
    reconstruct_schedule,
)
from bayesccp.synth import schedule_years_for, wpp_mortality_stand_in

AGES = tuple(range(15, 50, 5))
MODEL_YEARS = tuple(range(1979, 2020, 5))


@pytest.fixture(scope="module")
def wpp():
    years = schedule_years_for(1979)
    return wpp_mortality_stand_in(AGES, years), years


def test_stand_in_shape(wpp):
    x, years = wpp
    assert x.shape == (16, 7)
    assert years[0] == 1950 and years[-1] == 2025


def test_diagonal_hand_svd():
    v, coeffs, s, flips = principal_components(np.array([[2.0, 0.0], [0.0, 1.0], [0.0, 0.0]]))
    np.testing.assert_allclose(v, np.eye(2), atol=1e-15)
    np.testing.assert_allclose(coeffs, [[2, 0], [0, 1], [0, 0]], atol=1e-15)
    np.testing.assert_allclose(s, [2, 1])


def test_equal_rows_are_degenerate():
    x = np.tile(np.array([-5.0, -4.5, -4.0]), (5, 1))
    with pytest.raises(BasisError, match="rank"):
        build_basis(x, range(5))


def test_too_few_schedules():
    with pytest.raises(BasisError):
        build_basis(np.zeros((2, 4)), range(2))


def test_orthonormal_and_sign_convention(wpp):
    x, years = wpp
    b = build_basis(x, MODEL_YEARS, years)
    v = b.components
    np.testing.assert_allclose(v.T @ v, np.eye(2), atol=1e-10)
    assert b.pc1.sum() >= 0 and b.pc2.sum() >= 0
    np.testing.assert_allclose(b.mean_schedule, x.mean(axis=0), rtol=1e-14)


def test_coefficients_match_nearest_years(wpp):
    x, years = wpp
    b = build_basis(x, MODEL_YEARS, years)
    # 1979 is nearest 1980, 2019 nearest 2020
    assert b.matched_years[0] == 1980 and b.matched_years[-1] == 2020
    row = list(years).index(1980)
    np.testing.assert_allclose(b.national_coeffs[0], (x[row] - b.mean_schedule) @ b.components,
                               rtol=1e-12)


def test_projection_beats_mean_only(wpp):
    x, years = wpp
    b = build_basis(x, MODEL_YEARS, years)
    mean_only, full = projection_residuals(x, b)
    assert np.all(full <= mean_only + 1e-12)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 15), st.sampled_from([-0.01, 0.01]), st.integers(0, 1))
def test_national_coefficients_are_least_squares(wpp, row, step, k):
    x, years = wpp
    b = build_basis(x, years, years)
    coeffs = b.national_coeffs[row].copy()
    base = np.linalg.norm(x[row] - logit_schedule(b, coeffs[0], coeffs[1]))
    coeffs[k] += step
    assert np.linalg.norm(x[row] - logit_schedule(b, coeffs[0], coeffs[1])) >= base


def test_bit_stable(wpp):
    x, years = wpp
    a = build_basis(x, MODEL_YEARS, years)
    b = build_basis(x.copy(), MODEL_YEARS, years)
    assert a.pc1.tobytes() == b.pc1.tobytes()
    assert a.national_coeffs.tobytes() == b.national_coeffs.tobytes()


def test_reconstruct_identity_case(wpp):
    x, years = wpp
    b = build_basis(x, MODEL_YEARS, years)
    np.testing.assert_allclose(reconstruct_schedule(b, 0, 0), 1 / (1 + np.exp(-b.mean_schedule)))


def test_reconstruct_logit_zero_is_half(wpp):
    x, years = wpp
    b = build_basis(x, MODEL_YEARS, years)
    alpha = -b.mean_schedule[3]
    assert reconstruct_schedule(b, 0, 0, alpha)[3] == pytest.approx(0.5)


def test_intercept_raises_every_age(wpp):
    x, years = wpp
    b = build_basis(x, MODEL_YEARS, years)
    b1, b2 = b.national_coeffs[4]
    low = reconstruct_schedule(b, b1, b2, 0.0)
    high = reconstruct_schedule(b, b1, b2, 0.3)
    assert np.all(high > low)


def test_reconstruct_saturates(wpp):
    x, years = wpp
    b = build_basis(x, MODEL_YEARS, years)
    q = reconstruct_schedule(b, 0, 0, 1e6)
    assert np.all(np.isfinite(q)) and np.all(q <= 1)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (6, 4), elements=st.floats(-6, 0)))
def test_sign_flip_leaves_reconstruction_unchanged(x):
    try:
        b = build_basis(x, range(6))
    except BasisError:
        return
    recon = b.mean_schedule + b.national_coeffs @ b.components.T
    v, c, _, _ = principal_components(x - x.mean(axis=0))
    np.testing.assert_allclose(recon, b.mean_schedule + (-c) @ (-v).T, atol=1e-9)
