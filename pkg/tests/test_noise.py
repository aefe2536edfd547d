import math

import numpy as np
import pytest
from hypothesis import assume, example, given, settings
from hypothesis import strategies as st

from qhefl.errors import InputError, NoPeriodError
from qhefl.noise import (
    EulerAngles,
    angular_errors,
    build_j,
    estimate_period,
    exp_tj,
    fundamental_period,
    generator_rate,
    wrap_angle,
)

angle = st.floats(-2 * math.pi, 2 * math.pi, allow_nan=False)
angles = st.builds(EulerAngles, angle, angle, angle)
times = st.floats(-20, 20, allow_nan=False)


def rodrigues(J, t):
    """exp(tJ) for antisymmetric 3x3 J via the axis-angle closed form."""
    w = np.array([J[2, 1], J[0, 2], J[1, 0]])
    rate = np.linalg.norm(w)
    if rate == 0:
        return np.eye(3)
    K = J / rate
    a = rate * t
    return np.eye(3) + math.sin(a) * K + (1 - math.cos(a)) * K @ K


def test_build_j_read_off():
    assert np.array_equal(build_j(EulerAngles(0, 0, 0)), np.zeros((3, 3)))
    J = build_j(EulerAngles(0.0, 1.0, 0.0))
    expect = np.zeros((3, 3))
    expect[0, 2], expect[2, 0] = 1.0, -1.0
    assert np.array_equal(J, expect)
    J = build_j(EulerAngles(0.5, 0.2, 0.25))
    assert J[0, 1] == -0.75 and J[1, 0] == 0.75


def test_angles_must_be_finite():
    with pytest.raises(InputError):
        EulerAngles(math.nan, 0, 0)


@settings(max_examples=200, deadline=None)
@given(angles)
def test_j_is_antisymmetric_and_traceless(a):
    J = build_j(a)
    assert np.max(np.abs(J + J.T)) <= 1e-15
    assert abs(np.trace(J)) <= 1e-15


@settings(max_examples=200, deadline=None)
@given(angles)
def test_characteristic_polynomial(a):
    J = build_j(a)
    c = a.theta**2 + (a.phi + a.psi) ** 2
    for lam in np.linalg.eigvals(J):
        assert abs(lam * (lam**2 + c)) <= 1e-9 * max(1.0, c**1.5)


def test_exp_identities():
    J = build_j(EulerAngles(0.3, 1.1, -0.4))
    assert np.array_equal(exp_tj(J, 0.0), np.eye(3))
    assert np.max(np.abs(exp_tj(J, 2.5) @ exp_tj(J, -2.5) - np.eye(3))) <= 1e-12


@settings(max_examples=300, deadline=None)
@given(angles, times)
def test_exp_matches_rodrigues_and_is_a_rotation(a, t):
    J = build_j(a)
    R = exp_tj(J, t)
    assert np.max(np.abs(R - rodrigues(J, t))) <= 1e-12
    assert np.max(np.abs(R.T @ R - np.eye(3))) <= 1e-12
    assert abs(np.linalg.det(R) - 1.0) <= 1e-12


def test_period_closed_forms():
    assert fundamental_period(EulerAngles(0.0, 2 * math.pi, 0.0)) == pytest.approx(1.0, abs=1e-15)
    assert fundamental_period(EulerAngles(math.pi, 0.0, math.pi)) == pytest.approx(1.0, abs=1e-15)
    assert generator_rate(EulerAngles(3.0, 4.0, 0.0)) == 5.0
    with pytest.raises(NoPeriodError):
        fundamental_period(EulerAngles(0.0, 0.0, 0.0))
    with pytest.raises(NoPeriodError):
        fundamental_period(EulerAngles(1.0, 0.0, -1.0))


@settings(max_examples=200, deadline=None)
@given(angles, times)
def test_rotation_is_periodic(a, t):
    assume(generator_rate(a) > 1e-3)
    J = build_j(a)
    w = fundamental_period(a)
    assert np.max(np.abs(exp_tj(J, w) - np.eye(3))) <= 1e-9
    assert np.max(np.abs(exp_tj(J, t + w) - exp_tj(J, t))) <= 1e-9


def test_identical_vectors_have_no_error():
    J = build_j(EulerAngles(0.2, 0.7, 0.1))
    tr = angular_errors([1.0, 2.0, 0.5], [1.0, 2.0, 0.5], np.linspace(0, 10, 50), J)
    assert not tr.delta_az.any() and not tr.delta_el.any()


def test_angular_errors_input_checks():
    J = build_j(EulerAngles(0.2, 0.7, 0.1))
    with pytest.raises(InputError):
        angular_errors([0, 0, 0], [1, 0, 0], [0.0], J)
    with pytest.raises(InputError):
        angular_errors([1, 0], [1, 0, 0], [0.0], J)


vectors = st.lists(st.floats(-5, 5, allow_nan=False), min_size=3, max_size=3).filter(lambda v: np.linalg.norm(v) > 0.1)


@settings(max_examples=100, deadline=None)
@given(angles, vectors, vectors)
def test_error_traces_bounded_and_rigid(a, v, u):
    J = build_j(a)
    t = np.linspace(0, 7, 40)
    tr = angular_errors(v, u, t, J)
    assert np.all(np.abs(tr.delta_az) <= math.pi) and np.all(np.abs(tr.delta_el) <= math.pi)
    R = np.stack([exp_tj(J, x) for x in t])
    va, vb = np.asarray(v) @ R, np.asarray(u) @ R
    cosang = np.sum(va * vb, axis=1) / (np.linalg.norm(va, axis=1) * np.linalg.norm(vb, axis=1))
    assert np.max(np.abs(cosang - cosang[0])) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(angles, vectors, vectors)
@example(EulerAngles(0.0, 1.0, 0.0), [0.0, 0.0, 1.0], [1.0, 0.0, 0.0])
def test_error_trace_repeats_after_one_period(a, v, u):
    assume(generator_rate(a) > 0.05)
    J = build_j(a)
    w = fundamental_period(a)
    t = np.linspace(0, w, 25)
    base = angular_errors(v, u, t, J)
    later = angular_errors(v, u, t + w, J)
    # azimuth is undefined at the poles, so skip samples where either vector sits on one
    R = np.stack([exp_tj(J, x) for x in t])
    off_pole = np.ones(t.size, bool)
    for vec in (v, u):
        r = np.asarray(vec) @ R
        off_pole &= np.hypot(r[:, 0], r[:, 1]) > 1e-6 * np.linalg.norm(vec)
    assert np.max(np.abs(wrap_angle(base.delta_az - later.delta_az)[off_pole]), initial=0.0) <= 1e-9
    assert np.max(np.abs(base.delta_el - later.delta_el)) <= 1e-9


def test_wrap_angle_range():
    x = np.linspace(-20, 20, 1001)
    w = wrap_angle(x)
    assert np.all(w > -math.pi) and np.all(w <= math.pi)
    assert np.allclose(np.cos(w), np.cos(x)) and wrap_angle(-math.pi) == math.pi


@pytest.mark.parametrize("T", [0.7, 3.0, 12.5])
def test_estimate_sine_period(T):
    t = np.linspace(0, 4 * T, 4 * 64, endpoint=False)
    est = estimate_period(np.sin(2 * math.pi * t / T), t=t)
    assert abs(est - T) / T <= 0.005


def test_estimate_matches_fundamental_period():
    rng = np.random.default_rng(11)
    for _ in range(10):
        a = EulerAngles(*rng.uniform(-1.5, 1.5, 3))
        w = fundamental_period(a)
        v = rng.normal(size=3)
        t = np.linspace(0, 4 * w, 4 * 64, endpoint=False)
        tr = angular_errors(v, v + 0.05 * rng.normal(size=3), t, build_j(a))
        est = estimate_period(tr.delta_az, t=t)
        assert abs(est - w) / w <= 0.01


def test_constant_trace_has_no_period():
    with pytest.raises(NoPeriodError):
        estimate_period(np.full(300, 0.25))
