"""Shared numerical oracles for the test suite (independent of the engine)."""

import numpy as np


def central_diff_grad(f, x, h=1e-6):
    """Elementwise central-difference gradient of scalar f at ndarray x."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def central_diff_jacobian(f, x, h=1e-6):
    """Central-difference Jacobian (n_out, n_in) of vector f at 1-D x."""
    x = np.asarray(x, dtype=np.float64)
    y0 = np.asarray(f(x))
    jac = np.zeros((y0.size, x.size))
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        jac[:, i] = (np.asarray(f(xp)) - np.asarray(f(xm))).reshape(-1) / (2.0 * h)
    return jac


def directional_diff(f, x, v, h=1e-6):
    """Central difference of scalar f along direction v at ndarray x."""
    x = np.asarray(x, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return (f(x + h * v) - f(x - h * v)) / (2.0 * h)


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12)
    return np.max(np.abs(a - b)) / denom
