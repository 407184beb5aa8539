"""Central finite-difference gradient checking used across the test suite."""

import numpy as np


def numerical_grad(f, x, h=1e-5):
    """Central finite differences of scalar f at array x (float64)."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def rel_error(a, b, floor=1e-8):
    """Max relative error with an absolute floor for near-zero entries."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.abs(a) + np.abs(b), floor)
    return float(np.max(np.abs(a - b) / denom))


def check_param_grad(loss_and_grad, param, h=1e-5, tol=1e-4):
    """Compare an analytic gradient against central differences.

    ``loss_and_grad()`` must return ``(loss, grad_wrt_param)`` with the
    gradient evaluated at the current value of ``param`` (which this
    helper perturbs in place).
    """
    _, analytic = loss_and_grad()
    numeric = np.zeros_like(param, dtype=np.float64)
    flat = param.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        lp, _ = loss_and_grad()
        flat[i] = orig - h
        lm, _ = loss_and_grad()
        flat[i] = orig
        nflat[i] = (lp - lm) / (2 * h)
    err = rel_error(analytic, numeric)
    assert err < tol, f"gradient mismatch: rel error {err:.3e} >= {tol}"
    return err
