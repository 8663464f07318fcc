# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled ray-marching kernels.

One call processes a tile of rays; each ray is marched start to finish by a
single loop (one task per ray) with the GIL released, so tiles can run on a
thread pool.  ``_kernels_py`` holds the numpy twin with the same signatures.
"""

from libc.math cimport exp, floor

cdef enum:
    MAX_COEF = 27

cdef double SH_C0 = 0.28209479177387814
cdef double SH_C1 = 0.4886025119029199
cdef double SH_C2_0 = 1.0925484305920792
cdef double SH_C2_1 = -1.0925484305920792
cdef double SH_C2_2 = 0.31539156525252005
cdef double SH_C2_3 = -1.0925484305920792
cdef double SH_C2_4 = 0.5462742152960396


cdef inline void sh_basis(double x, double y, double z, int nb, double* out) noexcept nogil:
    out[0] = SH_C0
    if nb > 1:
        out[1] = -SH_C1 * y
        out[2] = SH_C1 * z
        out[3] = -SH_C1 * x
    if nb > 4:
        out[4] = SH_C2_0 * x * y
        out[5] = SH_C2_1 * y * z
        out[6] = SH_C2_2 * (2.0 * z * z - x * x - y * y)
        out[7] = SH_C2_3 * x * z
        out[8] = SH_C2_4 * (x * x - y * y)


cdef inline int corner_setup(double px, double py, double pz, int H, int W, int K,
                             int* i0, double* f) noexcept nogil:
    cdef double p[3]
    cdef int dims[3]
    cdef int a, n
    p[0] = px; p[1] = py; p[2] = pz
    dims[0] = H; dims[1] = W; dims[2] = K
    for a in range(3):
        if p[a] < 0.0:
            p[a] = 0.0
        elif p[a] > dims[a] - 1:
            p[a] = dims[a] - 1
        n = <int>floor(p[a])
        if n > dims[a] - 2:
            n = dims[a] - 2
        i0[a] = n
        f[a] = p[a] - n
    return 0


cdef inline double corner_weight(int n, double* f) noexcept nogil:
    cdef double wx = f[0] if (n >> 2) & 1 else 1.0 - f[0]
    cdef double wy = f[1] if (n >> 1) & 1 else 1.0 - f[1]
    cdef double wz = f[2] if n & 1 else 1.0 - f[2]
    return wx * wy * wz


cdef inline double fetch_combined(const int[:, :, ::1] slots, const float[::1] density,
                                  const float[:, ::1] color, int C,
                                  double px, double py, double pz, double* coef) noexcept nogil:
    cdef int i0[3]
    cdef double f[3]
    cdef int n, c, s
    cdef double w, sigma = 0.0
    corner_setup(px, py, pz, slots.shape[0], slots.shape[1], slots.shape[2], i0, f)
    for c in range(C):
        coef[c] = 0.0
    for n in range(8):
        s = slots[i0[0] + ((n >> 2) & 1), i0[1] + ((n >> 1) & 1), i0[2] + (n & 1)]
        if s < 0:
            continue
        w = corner_weight(n, f)
        sigma += w * density[s]
        for c in range(C):
            coef[c] += w * color[s, c]
    return sigma


cdef inline double fetch_lanes(const int[:, :, ::1] slots, const float[::1] density,
                               const float[:, ::1] color, int C,
                               double px, double py, double pz, double* coef) noexcept nogil:
    # one lane per stored channel, each repeating the addressing work on its own
    cdef int i0[3]
    cdef double f[3]
    cdef int n, lane, s
    cdef double w, acc, sigma = 0.0
    for lane in range(C + 1):
        corner_setup(px, py, pz, slots.shape[0], slots.shape[1], slots.shape[2], i0, f)
        acc = 0.0
        for n in range(8):
            s = slots[i0[0] + ((n >> 2) & 1), i0[1] + ((n >> 1) & 1), i0[2] + (n & 1)]
            if s < 0:
                continue
            w = corner_weight(n, f)
            if lane == C:
                acc += w * density[s]
            else:
                acc += w * color[s, lane]
        if lane == C:
            sigma = acc
        else:
            coef[lane] = acc
    return sigma


def march(const int[:, :, ::1] slots, const float[::1] density, const float[:, ::1] color,
          const double[:, ::1] origins, const double[:, ::1] dirs,
          const double[::1] tnear, const double[::1] tfar,
          double delta, double threshold, bint early, const double[::1] background,
          bint combine, double[:, ::1] out_rgb, long long[::1] out_samples,
          unsigned char[::1] out_term, double[::1] out_trans):
    cdef Py_ssize_t r, R = origins.shape[0]
    cdef int C = color.shape[1]
    cdef int nb = C // 3
    cdef int ch, b, i
    cdef double basis[9]
    cdef double coef[MAX_COEF]
    cdef double acc[3]
    cdef double T, t, sigma, alpha, w, v, tn, tf
    cdef long long n
    if C > MAX_COEF:
        raise ValueError("at most 27 color channels are supported")
    with nogil:
        for r in range(R):
            acc[0] = 0.0; acc[1] = 0.0; acc[2] = 0.0
            T = 1.0
            n = 0
            out_term[r] = 0
            tn = tnear[r]
            tf = tfar[r]
            sh_basis(dirs[r, 0], dirs[r, 1], dirs[r, 2], nb, basis)
            t = tn + 0.5 * delta
            while t < tf:
                if combine:
                    sigma = fetch_combined(slots, density, color, C,
                                           origins[r, 0] + t * dirs[r, 0],
                                           origins[r, 1] + t * dirs[r, 1],
                                           origins[r, 2] + t * dirs[r, 2], coef)
                else:
                    sigma = fetch_lanes(slots, density, color, C,
                                        origins[r, 0] + t * dirs[r, 0],
                                        origins[r, 1] + t * dirs[r, 1],
                                        origins[r, 2] + t * dirs[r, 2], coef)
                n += 1
                t = tn + (n + 0.5) * delta
                if sigma <= 0.0:
                    continue
                alpha = 1.0 - exp(-sigma * delta)
                w = T * alpha
                for ch in range(3):
                    v = 0.0
                    for b in range(nb):
                        v += basis[b] * coef[ch * nb + b]
                    v += 0.5
                    if v < 0.0:
                        v = 0.0
                    elif v > 1.0:
                        v = 1.0
                    acc[ch] += w * v
                T *= 1.0 - alpha
                if early and T < threshold:
                    out_term[r] = 1
                    break
            for ch in range(3):
                out_rgb[r, ch] = acc[ch] + T * background[ch]
            out_samples[r] = n
            out_trans[r] = T


def importance(const int[:, :, ::1] slots, const float[::1] density,
               const double[:, ::1] origins, const double[:, ::1] dirs,
               const double[::1] tnear, const double[::1] tfar,
               double delta, double threshold, bint early,
               double[::1] scores, double[::1] out_weight, long long[::1] out_samples):
    """Scatter each sample's compositing weight onto its 8 trilinear corners."""
    cdef Py_ssize_t r, R = origins.shape[0]
    cdef int H = slots.shape[0], W = slots.shape[1], K = slots.shape[2]
    cdef int i0[3]
    cdef double f[3]
    cdef int c, s
    cdef double T, t, sigma, alpha, w, tn, tf, wsum, wc
    cdef long long n
    cdef Py_ssize_t lin
    with nogil:
        for r in range(R):
            T = 1.0
            n = 0
            wsum = 0.0
            tn = tnear[r]
            tf = tfar[r]
            t = tn + 0.5 * delta
            while t < tf:
                corner_setup(origins[r, 0] + t * dirs[r, 0],
                             origins[r, 1] + t * dirs[r, 1],
                             origins[r, 2] + t * dirs[r, 2], H, W, K, i0, f)
                sigma = 0.0
                for c in range(8):
                    s = slots[i0[0] + ((c >> 2) & 1), i0[1] + ((c >> 1) & 1), i0[2] + (c & 1)]
                    if s >= 0:
                        sigma += corner_weight(c, f) * density[s]
                n += 1
                t = tn + (n + 0.5) * delta
                if sigma <= 0.0:
                    continue
                alpha = 1.0 - exp(-sigma * delta)
                w = T * alpha
                wsum += w
                for c in range(8):
                    wc = corner_weight(c, f)
                    lin = ((<Py_ssize_t>(i0[0] + ((c >> 2) & 1)) * W
                            + (i0[1] + ((c >> 1) & 1))) * K + (i0[2] + (c & 1)))
                    scores[lin] += wc * w
                T *= 1.0 - alpha
                if early and T < threshold:
                    break
            out_weight[r] = wsum
            out_samples[r] = n
