"""Rotation-generator error model: J, exp(tJ), angular error traces and their period.

Vectors are rows and rotate as ``v @ SP(t)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .errors import InputError, NoPeriodError


@dataclass(frozen=True)
class EulerAngles:
    phi: float
    theta: float
    psi: float

    def __post_init__(self):
        if not all(math.isfinite(a) for a in (self.phi, self.theta, self.psi)):
            raise InputError("Euler angles must be finite")


def build_j(angles: EulerAngles) -> np.ndarray:
    """Antisymmetric generator with rows [0, -(phi+psi), theta], [phi+psi, 0, 0], [-theta, 0, 0]."""
    s = angles.phi + angles.psi
    th = angles.theta
    return np.array([[0.0, -s, th], [s, 0.0, 0.0], [-th, 0.0, 0.0]])


def exp_tj(J, t: float) -> np.ndarray:
    """exp(t J) by scaling and squaring around a truncated Taylor series."""
    A = t * np.asarray(J, dtype=np.float64)
    norm = np.abs(A).sum(axis=0).max()
    squarings = max(0, math.ceil(math.log2(norm)) + 1) if norm > 0 else 0
    A = A / 2.0**squarings
    out = np.eye(A.shape[0])
    term = np.eye(A.shape[0])
    for k in range(1, 30):
        term = term @ A / k
        out = out + term
        if np.abs(term).max() < 1e-18:
            break
    for _ in range(squarings):
        out = out @ out
    return out


def generator_rate(angles: EulerAngles) -> float:
    """sqrt(theta^2 + (phi+psi)^2): magnitude of J's imaginary eigenvalues."""
    return math.hypot(angles.theta, angles.phi + angles.psi)


def fundamental_period(angles: EulerAngles) -> float:
    """2*pi / sqrt(theta^2 + (phi+psi)^2), the smallest t > 0 with exp(tJ) = I."""
    rate = generator_rate(angles)
    if rate == 0.0:
        raise NoPeriodError("J vanishes for these angles; exp(tJ) is constant")
    return 2.0 * math.pi / rate


def wrap_angle(a):
    """Map angles to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=np.float64), 2.0 * np.pi)


def azimuth(v) -> np.ndarray:
    v = np.asarray(v)
    return np.arctan2(v[..., 1], v[..., 0])


def elevation(v) -> np.ndarray:
    v = np.asarray(v)
    return np.arcsin(np.clip(v[..., 2] / np.linalg.norm(v, axis=-1), -1.0, 1.0))


@dataclass
class ErrorTrace:
    t: np.ndarray
    delta_az: np.ndarray
    delta_el: np.ndarray
    v: np.ndarray
    v_err: np.ndarray


def rotation_stack(J, t_grid) -> np.ndarray:
    return np.stack([exp_tj(J, t) for t in np.asarray(t_grid, dtype=np.float64)])


def angular_errors(v, v_err, t_grid, J) -> ErrorTrace:
    v = np.asarray(v, dtype=np.float64)
    v_err = np.asarray(v_err, dtype=np.float64)
    if v.shape != (3,) or v_err.shape != (3,):
        raise InputError("vectors must have 3 components")
    if not np.linalg.norm(v) or not np.linalg.norm(v_err):
        raise InputError("vectors must be nonzero")
    t = np.asarray(t_grid, dtype=np.float64)
    R = rotation_stack(J, t)
    a = v @ R
    b = v_err @ R
    return ErrorTrace(
        t,
        wrap_angle(azimuth(b) - azimuth(a)),
        wrap_angle(elevation(b) - elevation(a)),
        v,
        v_err,
    )


def _parabolic_peak(y, i) -> float:
    if i <= 0 or i >= len(y) - 1:
        return float(i)
    a, b, c = y[i - 1], y[i], y[i + 1]
    den = a - 2 * b + c
    return float(i) if den == 0 else i + 0.5 * (a - c) / den


def _local_max_near(y, centre, radius) -> int:
    lo = max(1, int(round(centre - radius)))
    hi = min(len(y) - 2, int(round(centre + radius)))
    if hi < lo:
        return int(round(centre))
    return lo + int(np.argmax(y[lo : hi + 1]))


def _shift_mismatch(x, lag):
    idx = np.arange(x.size - math.ceil(lag))
    return float(np.mean((np.interp(idx + lag, np.arange(x.size), x) - x[idx]) ** 2))


def _refine_lag(x, period, k):
    """Minimise the mismatch between the trace and itself shifted by k periods."""
    centre = k * period
    half = max(2.0, 0.03 * centre)
    grid = centre + np.linspace(-half, half, 401)
    grid = grid[(grid > 1) & (grid < x.size - 2)]
    if grid.size == 0:
        return period
    errs = [_shift_mismatch(x, g) for g in grid]
    i = int(np.argmin(errs))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    res = minimize_scalar(
        lambda g: _shift_mismatch(x, g), bounds=(lo, hi), method="bounded", options={"xatol": 1e-6}
    )
    return float(res.x) / k


def estimate_period(trace, t=None, dt: float | None = None) -> float:
    """Dominant period from the autocorrelation of a uniformly sampled trace.

    The first lag whose correlation is within 10% of the best non-zero lag is
    taken as a coarse period, then refined on the furthest multiple of it the
    data supports by minimising the trace's mismatch with its shifted self.
    Falls back to mean zero-crossing spacing when the autocorrelation has no
    usable peak.
    """
    x = np.asarray(trace, dtype=np.float64)
    if dt is None:
        if t is None:
            dt = 1.0
        else:
            t = np.asarray(t, dtype=np.float64)
            dt = float(np.mean(np.diff(t)))
    n = x.size
    x = x - x.mean()
    if n < 4 or np.max(np.abs(x)) < 1e-12 * max(1.0, np.max(np.abs(trace))):
        raise NoPeriodError("trace is constant")
    m = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(x, m)
    ac = np.fft.irfft(f * np.conj(f), m)[:n]
    ac = ac / (ac[0] * (n - np.arange(n)) / n)  # unbiased, normalised
    limit = int(n * 2 / 3)
    neg = np.flatnonzero(ac[:limit] < 0)
    if neg.size:
        start = int(neg[0])
        seg = ac[start:limit]
        peaks = [start + i for i in range(1, len(seg) - 1) if seg[i] >= seg[i - 1] and seg[i] > seg[i + 1]]
        if peaks:
            best = max(ac[p] for p in peaks)
            if best > 0.3:
                first = next(p for p in peaks if ac[p] >= 0.9 * best)
                period = _parabolic_peak(ac, first)
                k = int((n - 1) * 2 / 3 // period)
                if k > 1:
                    j = _local_max_near(ac, k * period, period / 4)
                    period = _parabolic_peak(ac, j) / k
                return _refine_lag(x, period, max(k, 1)) * dt
    signs = np.signbit(x)
    ups = np.flatnonzero(signs[:-1] & ~signs[1:])
    if ups.size < 2:
        raise NoPeriodError("no periodic structure detected")
    frac = x[ups] / (x[ups] - x[ups + 1])
    pos = ups + frac
    return float(np.mean(np.diff(pos))) * dt
