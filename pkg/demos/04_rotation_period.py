"""Rotation-error traces and their period.

Two nearby vectors are rotated by SP(t) = exp(tJ).  Their azimuth and
elevation differences oscillate, and the oscillation repeats with period
2 pi / sqrt(theta^2 + (phi + psi)^2).  The script estimates that period from
the sampled trace alone and compares.

    python3 demos/04_rotation_period.py
"""

import numpy as np

from qhefl.noise import EulerAngles, angular_errors, build_j, estimate_period, exp_tj, fundamental_period

rng = np.random.default_rng(4)
for _ in range(5):
    a = EulerAngles(*rng.uniform(-np.pi, np.pi, 3))
    J = build_j(a)
    w = fundamental_period(a)
    t = np.linspace(0, 4 * w, 256, endpoint=False)
    v = rng.normal(size=3)
    trace = angular_errors(v, v + 0.05 * rng.normal(size=3), t, J)
    est = estimate_period(trace.delta_az, t=t)
    print(f"phi={a.phi:+.2f} theta={a.theta:+.2f} psi={a.psi:+.2f}  period {w:7.4f}  estimate {est:7.4f}"
          f"  |SP(period) - I| = {np.max(np.abs(exp_tj(J, w) - np.eye(3))):.1e}"
          f"  max|d_az| = {np.max(np.abs(trace.delta_az)):.3f}")
