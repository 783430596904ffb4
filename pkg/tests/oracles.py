"""Independent reference computations, written without the package's helpers."""

import numpy as np


def scalar_forward(weights, biases, x):
    """Per-neuron loops, no matrix products; returns (value, per-layer pre-activations)."""
    h = [float(v) for v in x]
    pre = []
    for i, (W, b) in enumerate(zip(weights, biases)):
        z = []
        for j in range(len(b)):
            s = float(b[j])
            for k in range(len(h)):
                s += float(W[j][k]) * h[k]
            z.append(s)
        if i == len(weights) - 1:
            return z[0], pre
        pre.append(z)
        h = [v if v > 0 else 0.0 for v in z]


def rk4(f, x0, t, n):
    x = np.array(x0, dtype=float)
    dt = t / n
    for _ in range(n):
        k1 = f(x)
        k2 = f(x + 0.5 * dt * k1)
        k3 = f(x + 0.5 * dt * k2)
        k4 = f(x + dt * k3)
        x = x + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    return x
