"""A parameterised quantum layer and its exact gradient.

Features enter as RX rotations, trainable RX layers alternate with a CNOT
chain, and each wire reports <Z>.  Because every trainable gate is a
rotation, shifting one angle by +/- pi/2 gives its exact derivative; the
script compares that to finite differences.

    python3 demos/02_quantum_layer.py
"""

import numpy as np

from qhefl import quantum as qm

rng = np.random.default_rng(1)
x = rng.uniform(-np.pi, np.pi, 4)
cfg = qm.PqcConfig(rng.uniform(-np.pi, np.pi, (2, 4)))

state = qm.run_pqc(qm.angle_encode(x), cfg)
print("input   :", np.round(x, 3))
print("<Z>     :", np.round(qm.quantum_layer_forward(x, cfg), 4))
print("norm    :", state.norm())

print("\nsingle qubit check: <Z> = cos(theta - x)")
for xi, th in [(0.3, 1.1), (-2.0, 0.5)]:
    print(f"  x={xi:+.1f} theta={th:+.1f}: {qm.quantum_layer_forward([xi], qm.PqcConfig([[th]]))[0]:+.6f}"
          f"  cos={np.cos(th - xi):+.6f}")

upstream = rng.normal(size=4)
shift = qm.param_shift_grad(x, cfg, upstream)
fd = np.zeros_like(cfg.thetas)
h = 1e-6
for idx in np.ndindex(fd.shape):
    tp, tm = cfg.thetas.copy(), cfg.thetas.copy()
    tp[idx] += h
    tm[idx] -= h
    fd[idx] = upstream @ (qm.quantum_layer_forward(x, qm.PqcConfig(tp)) - qm.quantum_layer_forward(x, qm.PqcConfig(tm))) / (2 * h)
print("\nparameter-shift gradient:\n", np.round(shift, 6))
print("max deviation from finite differences:", f"{np.max(np.abs(shift - fd)):.1e}")
