"""Differentiable layers with hand-derived reverse-mode gradients.

Everything is functional: ``*_forward`` returns ``(y, cache)`` and the
matching ``*_backward`` consumes the cache.  Layers never mutate their
parameters; optimizers do that.  Parameters are plain numpy arrays so
the whole stack runs in float32 for speed or float64 for gradient
checking.
"""

from __future__ import annotations

import numpy as np


class LayerError(ValueError):
    pass


def _check_finite(arr, what):
    if not np.isfinite(arr).all():
        raise LayerError(f"non-finite values in {what}")


# ---------------------------------------------------------- chebyshev --

class ChebLayer:
    """Order-K Chebyshev filter bank theta[k] in R^{Fin x Fout} plus bias."""

    def __init__(self, k, f_in, f_out, rng=None, dtype=np.float32,
                 use_bias=True):
        if k < 1:
            raise LayerError(f"Chebyshev order must be >= 1, got {k}")
        self.k, self.f_in, self.f_out = k, f_in, f_out
        scale = np.sqrt(2.0 / (k * f_in + f_out))
        rng = rng or np.random.default_rng(0)
        self.theta = (rng.standard_normal((k, f_in, f_out)) * scale).astype(dtype)
        self.bias = np.zeros(f_out, dtype=dtype) if use_bias else None

    def params(self):
        out = {"theta": self.theta}
        if self.bias is not None:
            out["bias"] = self.bias
        return out


def cheb_stack(L_scaled, x, k):
    """T_j(L~) x for j < k via the three-term recursion; (k, n, F)."""
    n, f = x.shape
    stack = np.empty((k, n, f), dtype=x.dtype)
    stack[0] = x
    if k > 1:
        stack[1] = L_scaled @ x
    for j in range(2, k):
        stack[j] = 2.0 * (L_scaled @ stack[j - 1]) - stack[j - 2]
    return stack


def cheb_poly_apply(L_scaled, coeffs):
    """sum_k T_k(L~) coeffs[k] by Clenshaw's recurrence."""
    k = len(coeffs)
    if k == 1:
        return coeffs[0].copy()
    b1 = coeffs[k - 1].copy()
    b2 = np.zeros_like(b1)
    for j in range(k - 2, 0, -1):
        b1, b2 = 2.0 * (L_scaled @ b1) - b2 + coeffs[j], b1
    return (L_scaled @ b1) - b2 + coeffs[0]


def cheb_forward(L_scaled, x, layer: ChebLayer, want_cache=False):
    """y = sum_k (T_k(L~) x) theta_k + bias.

    The scaled Laplacian is applied through the recursion only; dense
    T_k matrices are never formed, so the sparse work is O(K |E| Fin).
    """
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != layer.f_in:
        raise LayerError(
            f"input shape {x.shape} does not match Fin={layer.f_in}")
    if L_scaled.shape[0] != x.shape[0]:
        raise LayerError(
            f"Laplacian size {L_scaled.shape[0]} != vertex count {x.shape[0]}")
    _check_finite(x, "cheb input")
    stack = cheb_stack(L_scaled, x, layer.k)
    flat = stack.transpose(1, 0, 2).reshape(x.shape[0], layer.k * layer.f_in)
    y = flat @ layer.theta.reshape(layer.k * layer.f_in, layer.f_out)
    if layer.bias is not None:
        y = y + layer.bias
    _check_finite(y, "cheb output")
    if want_cache:
        return y, (L_scaled, stack, layer)
    return y


def cheb_backward(cache, dy):
    """Gradients of cheb_forward; returns (dx, grads dict)."""
    L_scaled, stack, layer = cache
    dy = np.asarray(dy)
    if dy.shape != (stack.shape[1], layer.f_out):
        raise LayerError(f"dy shape {dy.shape} mismatches layer output")
    k = layer.k
    dtheta = np.einsum("knf,no->kfo", stack, dy)
    dbias = dy.sum(axis=0) if layer.bias is not None else None
    # dx = sum_k T_k(L~) (dy theta_k^T), using the symmetry of T_k(L~)
    coeffs = [dy @ layer.theta[j].T for j in range(k)]
    dx = cheb_poly_apply(L_scaled, coeffs)
    grads = {"theta": dtheta}
    if dbias is not None:
        grads["bias"] = dbias
    return dx, grads


def spectral_oracle(L, lambda_max, x, layer: ChebLayer):
    """Dense eigendecomposition reference for cheb_forward (tests only).

    Filters are evaluated as scalar Chebyshev polynomials on the scaled
    eigenvalues; the result comes back through the inverse transform.
    """
    n = L.shape[0]
    if n > 200:
        raise LayerError("oracle limited to n <= 200")
    dense = L.toarray() if hasattr(L, "toarray") else np.asarray(L)
    lam, u = np.linalg.eigh(dense)
    lam_t = 2.0 * lam / lambda_max - 1.0
    xhat = u.T @ np.asarray(x, dtype=np.float64)
    t_prev = np.ones_like(lam_t)
    t_cur = lam_t.copy()
    yhat = np.zeros((n, layer.f_out))
    for j in range(layer.k):
        tj = t_prev if j == 0 else (t_cur if j == 1 else None)
        if tj is None:
            tj = 2.0 * lam_t * t_cur - t_prev
            t_prev, t_cur = t_cur, tj
        yhat += tj[:, None] * (xhat @ layer.theta[j].astype(np.float64))
    y = u @ yhat
    if layer.bias is not None:
        y = y + layer.bias.astype(np.float64)
    return y


# -------------------------------------------------------------- dense --

class DenseLayer:
    def __init__(self, f_in, f_out, rng=None, dtype=np.float32,
                 zero_init=False):
        rng = rng or np.random.default_rng(0)
        scale = np.sqrt(2.0 / (f_in + f_out))
        if zero_init:
            self.weight = np.zeros((f_in, f_out), dtype=dtype)
        else:
            self.weight = (rng.standard_normal((f_in, f_out)) * scale).astype(dtype)
        self.bias = np.zeros(f_out, dtype=dtype)

    def params(self):
        return {"weight": self.weight, "bias": self.bias}


def dense_forward(x, layer: DenseLayer, want_cache=False):
    x = np.asarray(x)
    if x.shape[-1] != layer.weight.shape[0]:
        raise LayerError(
            f"input width {x.shape[-1]} != Fin {layer.weight.shape[0]}")
    y = x @ layer.weight + layer.bias
    if want_cache:
        return y, (x, layer)
    return y


def dense_backward(cache, dy):
    x, layer = cache
    dy = np.asarray(dy)
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    dw = x2.T @ dy2
    db = dy2.sum(axis=0)
    dx = (dy2 @ layer.weight.T).reshape(x.shape)
    return dx, {"weight": dw, "bias": db}


# --------------------------------------------------------------- relu --

def relu_forward(x, want_cache=False):
    y = np.maximum(x, 0)
    if want_cache:
        return y, (x > 0)
    return y


def relu_backward(cache, dy):
    return dy * cache


# ---------------------------------------------------------- batchnorm --

class BatchNormState:
    """Per-channel scale/shift with running statistics for eval mode."""

    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.gamma = np.ones(channels, dtype=dtype)
        self.beta = np.zeros(channels, dtype=dtype)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum
        self.eps = eps

    def params(self):
        return {"gamma": self.gamma, "beta": self.beta}


def batchnorm_forward(x, bn: BatchNormState, training, want_cache=False):
    """Standardize over every axis but the last (the channel axis)."""
    x = np.asarray(x)
    flat = x.reshape(-1, x.shape[-1])
    if training:
        if flat.shape[0] < 2:
            raise LayerError("batchnorm needs >= 2 samples in training mode")
        mean = flat.mean(axis=0)
        var = flat.var(axis=0)
        bn.running_mean += bn.momentum * (mean.astype(bn.running_mean.dtype)
                                          - bn.running_mean)
        bn.running_var += bn.momentum * (var.astype(bn.running_var.dtype)
                                         - bn.running_var)
    else:
        mean = bn.running_mean
        var = bn.running_var
    inv = 1.0 / np.sqrt(var + bn.eps)
    xhat = (flat - mean) * inv
    y = (xhat * bn.gamma + bn.beta).reshape(x.shape)
    if want_cache:
        return y, (xhat, inv, bn, training, x.shape)
    return y


def batchnorm_backward(cache, dy):
    xhat, inv, bn, training, shape = cache
    dy2 = np.asarray(dy).reshape(-1, dy.shape[-1])
    m = dy2.shape[0]
    dgamma = (dy2 * xhat).sum(axis=0)
    dbeta = dy2.sum(axis=0)
    if training:
        dxhat = dy2 * bn.gamma
        dx = (inv / m) * (m * dxhat - dxhat.sum(axis=0)
                          - xhat * (dxhat * xhat).sum(axis=0))
    else:
        dx = dy2 * bn.gamma * inv
    return dx.reshape(shape), {"gamma": dgamma, "beta": dbeta}


# --------------------------------------------------------------- conv --

class Conv2DLayer:
    """3x3 convolution in NHWC layout with 'same' padding."""

    def __init__(self, c_in, c_out, stride=1, rng=None, dtype=np.float32,
                 kernel=3):
        rng = rng or np.random.default_rng(0)
        scale = np.sqrt(2.0 / (kernel * kernel * c_in))
        self.weight = (rng.standard_normal((kernel, kernel, c_in, c_out))
                       * scale).astype(dtype)
        self.bias = np.zeros(c_out, dtype=dtype)
        self.stride = stride
        self.kernel = kernel

    def params(self):
        return {"weight": self.weight, "bias": self.bias}


def conv2d_forward(x, layer: Conv2DLayer, want_cache=False):
    x = np.asarray(x)
    if x.ndim != 4 or x.shape[3] != layer.weight.shape[2]:
        raise LayerError(
            f"conv input must be (B, H, W, {layer.weight.shape[2]}), "
            f"got {x.shape}")
    k, s = layer.kernel, layer.stride
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    win = win[:, ::s, ::s]                       # (B, Ho, Wo, C, k, k)
    b, ho, wo = win.shape[:3]
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(b * ho * wo, k * k * x.shape[3])
    wmat = layer.weight.reshape(k * k * x.shape[3], -1)
    y = (cols @ wmat + layer.bias).reshape(b, ho, wo, -1)
    if want_cache:
        return y, (cols, x.shape, layer)
    return y


def conv2d_backward(cache, dy):
    cols, x_shape, layer = cache
    k, s = layer.kernel, layer.stride
    b, h, w, c = x_shape
    dy = np.asarray(dy)
    bb, ho, wo, co = dy.shape
    dy_flat = dy.reshape(b * ho * wo, co)
    wmat = layer.weight.reshape(k * k * c, co)
    dw = (cols.T @ dy_flat).reshape(layer.weight.shape)
    db = dy_flat.sum(axis=0)
    dcols = (dy_flat @ wmat.T).reshape(b, ho, wo, k, k, c)
    pad = k // 2
    dxp = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=dy.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, i:i + s * ho:s, j:j + s * wo:s, :] += dcols[:, :, :, i, j, :]
    dx = dxp[:, pad:pad + h, pad:pad + w, :]
    return dx, {"weight": dw, "bias": db}
