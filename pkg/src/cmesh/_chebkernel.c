/* Width-specialised CSR kernels for the Chebyshev decode path.
 *
 * The symbols are called through ctypes (see _kernels.py); the Python
 * module itself is an empty shell.  Fixing the column count F at compile
 * time lets the compiler keep the row accumulator in vector registers,
 * which is the difference between ~0.15 ms and ~0.75 ms per product at
 * the finest hierarchy level.
 *
 * Kernel kinds (all row-parallel-safe, run single threaded here):
 *   spmm:  out = L @ X
 *   cheb:  out = 2*(L @ X1) - X0          (three-term recursion step)
 *   clen2: out = 2*(L @ X1) - X0 + C      (Clenshaw inner step)
 *   clen1: out =   (L @ X1) - X0 + C      (Clenshaw final step)
 */

#include <Python.h>
#include <stdint.h>

#define DEF_SPMM(F)                                                         \
    void spmm_f##F(int64_t n, const int32_t *restrict indptr,               \
                   const int32_t *restrict indices,                         \
                   const float *restrict data, const float *restrict X,     \
                   float *restrict out) {                                   \
        for (int64_t i = 0; i < n; ++i) {                                   \
            float acc[F];                                                   \
            for (int f = 0; f < F; ++f) acc[f] = 0.0f;                      \
            for (int32_t p = indptr[i]; p < indptr[i + 1]; ++p) {           \
                const float a = data[p];                                    \
                const float *xr = X + (int64_t)indices[p] * F;              \
                for (int f = 0; f < F; ++f) acc[f] += a * xr[f];            \
            }                                                               \
            float *o = out + i * F;                                         \
            for (int f = 0; f < F; ++f) o[f] = acc[f];                      \
        }                                                                   \
    }

#define DEF_CHEB(F)                                                         \
    void cheb_f##F(int64_t n, const int32_t *restrict indptr,               \
                   const int32_t *restrict indices,                         \
                   const float *restrict data, const float *restrict X1,    \
                   const float *restrict X0, float *restrict out) {         \
        for (int64_t i = 0; i < n; ++i) {                                   \
            float acc[F];                                                   \
            const float *x0 = X0 + i * F;                                   \
            for (int f = 0; f < F; ++f) acc[f] = -x0[f];                    \
            for (int32_t p = indptr[i]; p < indptr[i + 1]; ++p) {           \
                const float a = 2.0f * data[p];                             \
                const float *xr = X1 + (int64_t)indices[p] * F;             \
                for (int f = 0; f < F; ++f) acc[f] += a * xr[f];            \
            }                                                               \
            float *o = out + i * F;                                         \
            for (int f = 0; f < F; ++f) o[f] = acc[f];                      \
        }                                                                   \
    }

/* C rows may live inside a wider matrix (one GEMM emits all Clenshaw
 * coefficient blocks side by side), hence the explicit row stride. */
#define DEF_CLEN2(F)                                                        \
    void clen2_f##F(int64_t n, const int32_t *restrict indptr,              \
                    const int32_t *restrict indices,                        \
                    const float *restrict data, const float *restrict X1,   \
                    const float *restrict X0, const float *restrict C,      \
                    int64_t strideC, float *restrict out) {                 \
        for (int64_t i = 0; i < n; ++i) {                                   \
            float acc[F];                                                   \
            const float *x0 = X0 + i * F;                                   \
            const float *c = C + i * strideC;                               \
            for (int f = 0; f < F; ++f) acc[f] = c[f] - x0[f];              \
            for (int32_t p = indptr[i]; p < indptr[i + 1]; ++p) {           \
                const float a = 2.0f * data[p];                             \
                const float *xr = X1 + (int64_t)indices[p] * F;             \
                for (int f = 0; f < F; ++f) acc[f] += a * xr[f];            \
            }                                                               \
            float *o = out + i * F;                                         \
            for (int f = 0; f < F; ++f) o[f] = acc[f];                      \
        }                                                                   \
    }

#define DEF_CLEN1(F)                                                        \
    void clen1_f##F(int64_t n, const int32_t *restrict indptr,              \
                    const int32_t *restrict indices,                        \
                    const float *restrict data, const float *restrict X1,   \
                    const float *restrict X0, const float *restrict C,      \
                    int64_t strideC, float *restrict out) {                 \
        for (int64_t i = 0; i < n; ++i) {                                   \
            float acc[F];                                                   \
            const float *x0 = X0 + i * F;                                   \
            const float *c = C + i * strideC;                               \
            for (int f = 0; f < F; ++f) acc[f] = c[f] - x0[f];              \
            for (int32_t p = indptr[i]; p < indptr[i + 1]; ++p) {           \
                const float a = data[p];                                    \
                const float *xr = X1 + (int64_t)indices[p] * F;             \
                for (int f = 0; f < F; ++f) acc[f] += a * xr[f];            \
            }                                                               \
            float *o = out + i * F;                                         \
            for (int f = 0; f < F; ++f) o[f] = acc[f];                      \
        }                                                                   \
    }

#define DEF_ALL(F) DEF_SPMM(F) DEF_CHEB(F) DEF_CLEN2(F) DEF_CLEN1(F)

DEF_ALL(3)
DEF_ALL(4)
DEF_ALL(6)
DEF_ALL(8)
DEF_ALL(12)
DEF_ALL(16)
DEF_ALL(24)
DEF_ALL(32)
DEF_ALL(48)
DEF_ALL(64)

static struct PyModuleDef chebkernel_module = {
    PyModuleDef_HEAD_INIT, "_chebkernel",
    "Compiled CSR kernels; symbols are bound via ctypes.", -1, NULL,
};

PyMODINIT_FUNC PyInit__chebkernel(void) {
    return PyModule_Create(&chebkernel_module);
}
