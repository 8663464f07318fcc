"""Numpy fallback for the compiled kernels.

Rays of a tile advance in lockstep, one sample per iteration, which keeps the
per-ray arithmetic identical to the compiled loop (same sample placement, same
corner order, same summation order).  ``combine`` is accepted for signature
parity and has no effect here.
"""

import numpy as np

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)


def sh_basis(dirs, nb):
    dirs = np.asarray(dirs, dtype=np.float64)
    x, y, z = dirs[..., 0], dirs[..., 1], dirs[..., 2]
    out = np.empty(dirs.shape[:-1] + (nb,), dtype=np.float64)
    out[..., 0] = SH_C0
    if nb > 1:
        out[..., 1] = -SH_C1 * y
        out[..., 2] = SH_C1 * z
        out[..., 3] = -SH_C1 * x
    if nb > 4:
        out[..., 4] = SH_C2[0] * x * y
        out[..., 5] = SH_C2[1] * y * z
        out[..., 6] = SH_C2[2] * (2.0 * z * z - x * x - y * y)
        out[..., 7] = SH_C2[3] * x * z
        out[..., 8] = SH_C2[4] * (x * x - y * y)
    return out


def _corners(p, shape):
    hi = np.asarray(shape, dtype=np.float64) - 1.0
    p = np.minimum(np.maximum(p, 0.0), hi)
    i0 = np.minimum(np.floor(p).astype(np.int64), np.asarray(shape, dtype=np.int64) - 2)
    return i0, p - i0


def _weight(n, f):
    wx = f[:, 0] if (n >> 2) & 1 else 1.0 - f[:, 0]
    wy = f[:, 1] if (n >> 1) & 1 else 1.0 - f[:, 1]
    wz = f[:, 2] if n & 1 else 1.0 - f[:, 2]
    return wx * wy * wz


def _offset(n):
    return ((n >> 2) & 1, (n >> 1) & 1, n & 1)


def _fetch(slots, density, color, p):
    i0, f = _corners(p, slots.shape)
    sigma = np.zeros(p.shape[0], dtype=np.float64)
    coef = np.zeros((p.shape[0], color.shape[1]), dtype=np.float64) if color is not None else None
    for n in range(8):
        dx, dy, dz = _offset(n)
        s = slots[i0[:, 0] + dx, i0[:, 1] + dy, i0[:, 2] + dz]
        occ = s >= 0
        if not occ.any():
            continue
        w = _weight(n, f)[occ]
        idx = np.flatnonzero(occ)
        sigma[idx] += w * density[s[occ]]
        if coef is not None:
            coef[idx] += w[:, None] * color[s[occ]]
    return sigma, coef, i0, f


def _max_steps(tnear, tfar, delta):
    span = np.maximum(tfar - tnear, 0.0)
    if span.size == 0:
        return 0
    return int(np.ceil(span.max() / delta)) + 1


def march(slots, density, color, origins, dirs, tnear, tfar, delta, threshold, early,
          background, combine, out_rgb, out_samples, out_term, out_trans):
    R = origins.shape[0]
    C = color.shape[1]
    nb = C // 3
    basis = sh_basis(dirs, nb)
    T = np.ones(R, dtype=np.float64)
    acc = np.zeros((R, 3), dtype=np.float64)
    samples = np.zeros(R, dtype=np.int64)
    term = np.zeros(R, dtype=np.uint8)
    alive = tnear + 0.5 * delta < tfar
    for i in range(_max_steps(tnear, tfar, delta)):
        t = tnear + (i + 0.5) * delta
        alive &= t < tfar
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        p = origins[idx] + t[idx, None] * dirs[idx]
        sigma, coef, _, _ = _fetch(slots, density, color, p)
        samples[idx] += 1
        hit = sigma > 0.0
        if not hit.any():
            continue
        idx, sigma, coef = idx[hit], sigma[hit], coef[hit]
        alpha = 1.0 - np.exp(-sigma * delta)
        w = T[idx] * alpha
        b = basis[idx]
        for ch in range(3):
            v = np.zeros(idx.size, dtype=np.float64)
            for k in range(nb):
                v += b[:, k] * coef[:, ch * nb + k]
            v += 0.5
            acc[idx, ch] += w * np.clip(v, 0.0, 1.0)
        T[idx] *= 1.0 - alpha
        if early:
            stop = idx[T[idx] < threshold]
            term[stop] = 1
            alive[stop] = False
    out_rgb[:] = acc + T[:, None] * np.asarray(background)[None, :]
    out_samples[:] = samples
    out_term[:] = term
    out_trans[:] = T


def importance(slots, density, origins, dirs, tnear, tfar, delta, threshold, early,
               scores, out_weight, out_samples):
    R = origins.shape[0]
    H, W, K = slots.shape
    T = np.ones(R, dtype=np.float64)
    wsum = np.zeros(R, dtype=np.float64)
    samples = np.zeros(R, dtype=np.int64)
    alive = tnear + 0.5 * delta < tfar
    for i in range(_max_steps(tnear, tfar, delta)):
        t = tnear + (i + 0.5) * delta
        alive &= t < tfar
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        p = origins[idx] + t[idx, None] * dirs[idx]
        sigma, _, i0, f = _fetch(slots, density, None, p)
        samples[idx] += 1
        hit = sigma > 0.0
        if not hit.any():
            continue
        idx, sigma, i0, f = idx[hit], sigma[hit], i0[hit], f[hit]
        alpha = 1.0 - np.exp(-sigma * delta)
        w = T[idx] * alpha
        wsum[idx] += w
        for n in range(8):
            dx, dy, dz = _offset(n)
            lin = ((i0[:, 0] + dx) * W + (i0[:, 1] + dy)) * K + (i0[:, 2] + dz)
            np.add.at(scores, lin, _weight(n, f) * w)
        T[idx] *= 1.0 - alpha
        if early:
            alive[idx[T[idx] < threshold]] = False
    out_weight[:] = wsum
    out_samples[:] = samples


def adaln_fwd(u, y, b, bm, eps, slope, out, nrm, inv):
    w = u.shape[1]
    u += b
    y += bm
    uc = u - u.mean(axis=1, keepdims=True)
    r = 1.0 / np.sqrt((uc * uc).mean(axis=1, keepdims=True) + eps)
    inv[:] = r[:, 0]
    np.multiply(uc, r, out=nrm)
    z = y[:, :w] * nrm
    z += y[:, w:]
    np.multiply(z, np.where(z > 0, 1.0, slope).astype(z.dtype), out=out)


def adaln_bwd(da, a, nrm, inv, y, slope, dy, du):
    w = da.shape[1]
    dz = da * np.where(a > 0, 1.0, slope).astype(da.dtype)
    np.multiply(dz, nrm, out=dy[:, :w])
    dy[:, w:] = dz
    dn = dz * y[:, :w]
    m1 = dn.mean(axis=1, keepdims=True)
    m2 = (dn * nrm).mean(axis=1, keepdims=True)
    dn -= m1
    dn -= nrm * m2
    np.multiply(dn, inv[:, None], out=du)
