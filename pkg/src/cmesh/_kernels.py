"""ctypes bindings for the compiled CSR kernels, with scipy fallbacks.

Every function here computes in float32 on C-contiguous arrays.  The
compiled path exists only for the column counts listed in ``WIDTHS``;
anything else silently uses scipy, so callers never need to care.
"""

import ctypes

import numpy as np

WIDTHS = (3, 4, 6, 8, 12, 16, 24, 32, 48, 64)

_lib = None
try:
    from . import _chebkernel

    _lib = ctypes.CDLL(_chebkernel.__file__)
except Exception:  # pragma: no cover - compiler-less installs
    _lib = None

_p_i32 = ctypes.POINTER(ctypes.c_int32)
_p_f32 = ctypes.POINTER(ctypes.c_float)


def _sym(kind, width):
    if _lib is None or width not in WIDTHS:
        return None
    return getattr(_lib, f"{kind}_f{width}")


def _args(L, arrays):
    out = [ctypes.c_int64(L.shape[0]),
           L.indptr.ctypes.data_as(_p_i32),
           L.indices.ctypes.data_as(_p_i32),
           L.data.ctypes.data_as(_p_f32)]
    out.extend(a.ctypes.data_as(_p_f32) for a in arrays)
    return out


def kernels_available():
    return _lib is not None


def spmm(L, X, out):
    """out = L @ X."""
    fn = _sym("spmm", X.shape[1])
    if fn is None:
        np.copyto(out, L @ X)
    else:
        fn(*_args(L, (X, out)))
    return out


def cheb_step(L, X1, X0, out):
    """out = 2*(L @ X1) - X0, the Chebyshev three-term recursion."""
    fn = _sym("cheb", X1.shape[1])
    if fn is None:
        np.subtract(2.0 * (L @ X1), X0, out=out)
    else:
        fn(*_args(L, (X1, X0, out)))
    return out


def clenshaw_step(L, B1, B2, C, out):
    """out = 2*(L @ B1) - B2 + C, the inner Clenshaw recurrence.

    ``C`` may be a column block of a wider C-contiguous matrix; only its
    row stride must be expressible in whole float32 elements.
    """
    fn = _sym("clen2", B1.shape[1])
    if fn is None:
        np.copyto(out, 2.0 * (L @ B1))
        out -= B2
        out += C
        return out
    fn(*_args(L, (B1, B2)), C.ctypes.data_as(_p_f32),
       ctypes.c_int64(C.strides[0] // 4), out.ctypes.data_as(_p_f32))
    return out


def clenshaw_final(L, B1, B2, C, out):
    """out = (L @ B1) - B2 + C, the closing Clenshaw step."""
    fn = _sym("clen1", B1.shape[1])
    if fn is None:
        np.copyto(out, L @ B1)
        out -= B2
        out += C
        return out
    fn(*_args(L, (B1, B2)), C.ctypes.data_as(_p_f32),
       ctypes.c_int64(C.strides[0] // 4), out.ctypes.data_as(_p_f32))
    return out
