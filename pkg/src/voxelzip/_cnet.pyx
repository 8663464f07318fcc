# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled elementwise parts of the AdaLN layer (float32 only).

Built with reassociation allowed so the row reductions vectorize; results are
still deterministic for a given build.  The matmuls stay in BLAS.
"""

from libc.math cimport sqrtf


cdef inline void _row_fwd(float* u, float* y, const float* b, const float* bm, Py_ssize_t w,
                          float eps, float slope, float* out, float* nrm, float* inv) noexcept nogil:
    cdef Py_ssize_t j
    cdef float mean = 0.0, var = 0.0, r, z
    for j in range(w):
        u[j] = u[j] + b[j]
        mean += u[j]
    for j in range(2 * w):
        y[j] = y[j] + bm[j]
    mean = mean / w
    for j in range(w):
        nrm[j] = u[j] - mean
        var += nrm[j] * nrm[j]
    r = 1.0 / sqrtf(var / w + eps)
    inv[0] = r
    for j in range(w):
        nrm[j] = nrm[j] * r
        z = y[j] * nrm[j] + y[w + j]
        out[j] = z if z > 0 else slope * z


def adaln_fwd(float[:, ::1] u, float[:, ::1] y, const float[::1] b, const float[::1] bm,
              double eps, double slope, float[:, ::1] out, float[:, ::1] nrm, float[::1] inv):
    """Add the biases to u = xW and y = PWm in place, then row-wise standardize,
    modulate with y = [scale | shift] and apply LeakyReLU."""
    cdef Py_ssize_t n = u.shape[0], w = u.shape[1], i
    if n == 0:
        return
    with nogil:
        for i in range(n):
            _row_fwd(&u[i, 0], &y[i, 0], &b[0], &bm[0], w, <float>eps, <float>slope,
                     &out[i, 0], &nrm[i, 0], &inv[i])


cdef inline void _row_bwd(const float* da, const float* a, const float* nrm, float inv,
                          const float* y, Py_ssize_t w, float slope,
                          float* dy, float* du) noexcept nogil:
    cdef Py_ssize_t j
    cdef float m1 = 0.0, m2 = 0.0
    # a > 0 exactly when the pre-activation is > 0 (slope > 0)
    for j in range(w):
        dy[w + j] = da[j] * (slope + (1.0 - slope) * (a[j] > 0))
    for j in range(w):
        dy[j] = dy[w + j] * nrm[j]
        du[j] = dy[w + j] * y[j]
        m1 += du[j]
        m2 += du[j] * nrm[j]
    m1 = m1 / w
    m2 = m2 / w
    for j in range(w):
        du[j] = inv * (du[j] - m1 - nrm[j] * m2)


def adaln_bwd(const float[:, ::1] da, const float[:, ::1] a, const float[:, ::1] nrm,
              const float[::1] inv, const float[:, ::1] y, double slope,
              float[:, ::1] dy, float[:, ::1] du):
    """Gradients w.r.t. the modulation output y and the pre-norm activations u."""
    cdef Py_ssize_t n = da.shape[0], w = da.shape[1], i
    if n == 0:
        return
    with nogil:
        for i in range(n):
            _row_bwd(&da[i, 0], &a[i, 0], &nrm[i, 0], inv[i], &y[i, 0], w,
                     <float>slope, &dy[i, 0], &du[i, 0])
