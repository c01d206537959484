# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: smooth convex SDF forward/backward and ray marching.

Array layout shared with ``_kernels_py``:

    points  (N, 3)      normalized coordinates
    normals (K, 6, 3)   face normals, faces 3..5 are the negated axes
    offsets (K, 6)
    trans   (K, 3)
    delta   (K,)        logsumexp sharpness
"""
import numpy as np

from libc.math cimport exp, log, INFINITY, NAN


cdef inline double _lse(const double[:, :, ::1] normals,
                        const double[:, ::1] offsets,
                        const double[:, ::1] trans,
                        const double[::1] delta,
                        Py_ssize_t k, double x0, double x1, double x2,
                        double* H, double* w, Py_ssize_t* argmax) noexcept nogil:
    # Fills H (halfplane values) and w (softmax weights), returns phi.
    cdef Py_ssize_t h, best = 0
    cdef double d0 = x0 - trans[k, 0]
    cdef double d1 = x1 - trans[k, 1]
    cdef double d2 = x2 - trans[k, 2]
    cdef double m = -INFINITY, s = 0.0, dk = delta[k]
    for h in range(6):
        H[h] = normals[k, h, 0] * d0 + normals[k, h, 1] * d1 + normals[k, h, 2] * d2 - offsets[k, h]
        if H[h] > m:
            m = H[h]
            best = h
    for h in range(6):
        w[h] = exp(dk * (H[h] - m))
        s += w[h]
    for h in range(6):
        w[h] /= s
    argmax[0] = best
    return m + log(s) / dk


cdef inline double _min_phi(const double[:, :, ::1] normals,
                            const double[:, ::1] offsets,
                            const double[:, ::1] trans,
                            const double[::1] delta,
                            double x0, double x1, double x2,
                            double stop_below, Py_ssize_t* kbest) noexcept nogil:
    # Minimum smooth SDF over convexes. Convexes whose hard max already exceeds
    # the running minimum are skipped (phi >= max H).
    cdef Py_ssize_t K = normals.shape[0]
    cdef Py_ssize_t k, h
    cdef double H[6]
    cdef double d0, d1, d2, m, s, phi, dk
    cdef double best = INFINITY
    kbest[0] = -1
    for k in range(K):
        d0 = x0 - trans[k, 0]
        d1 = x1 - trans[k, 1]
        d2 = x2 - trans[k, 2]
        m = -INFINITY
        for h in range(6):
            H[h] = normals[k, h, 0] * d0 + normals[k, h, 1] * d1 + normals[k, h, 2] * d2 - offsets[k, h]
            if H[h] > m:
                m = H[h]
        if m >= best or m > stop_below:
            continue
        dk = delta[k]
        s = 0.0
        for h in range(6):
            s += exp(dk * (H[h] - m))
        phi = m + log(s) / dk
        if phi < best:
            best = phi
            kbest[0] = k
    return best


def sdf_forward(const double[:, ::1] points,
                const double[:, :, ::1] normals,
                const double[:, ::1] offsets,
                const double[:, ::1] trans,
                const double[::1] delta):
    cdef Py_ssize_t N = points.shape[0], K = normals.shape[0]
    phi_arr = np.empty((N, K), dtype=np.float64)
    face_arr = np.empty((N, K), dtype=np.int64)
    cdef double[:, ::1] phi = phi_arr
    cdef long long[:, ::1] face = face_arr
    cdef double H[6]
    cdef double w[6]
    cdef Py_ssize_t n, k, best
    with nogil:
        for n in range(N):
            for k in range(K):
                phi[n, k] = _lse(normals, offsets, trans, delta, k,
                                 points[n, 0], points[n, 1], points[n, 2], H, w, &best)
                face[n, k] = best
    return phi_arr, face_arr


def sdf_backward(const double[:, ::1] points,
                 const double[:, :, ::1] normals,
                 const double[:, ::1] offsets,
                 const double[:, ::1] trans,
                 const double[::1] delta,
                 const double[:, ::1] gphi):
    cdef Py_ssize_t N = points.shape[0], K = normals.shape[0]
    gn_arr = np.zeros((K, 6, 3), dtype=np.float64)
    go_arr = np.zeros((K, 6), dtype=np.float64)
    gt_arr = np.zeros((K, 3), dtype=np.float64)
    gd_arr = np.zeros(K, dtype=np.float64)
    cdef double[:, :, ::1] gn = gn_arr
    cdef double[:, ::1] go = go_arr
    cdef double[:, ::1] gt = gt_arr
    cdef double[::1] gd = gd_arr
    cdef double H[6]
    cdef double w[6]
    cdef Py_ssize_t n, k, h, best
    cdef double g, gw, phi, wh, d0, d1, d2
    with nogil:
        for n in range(N):
            for k in range(K):
                g = gphi[n, k]
                if g == 0.0:
                    continue
                phi = _lse(normals, offsets, trans, delta, k,
                           points[n, 0], points[n, 1], points[n, 2], H, w, &best)
                d0 = points[n, 0] - trans[k, 0]
                d1 = points[n, 1] - trans[k, 1]
                d2 = points[n, 2] - trans[k, 2]
                wh = 0.0
                for h in range(6):
                    gw = g * w[h]
                    go[k, h] -= gw
                    gn[k, h, 0] += gw * d0
                    gn[k, h, 1] += gw * d1
                    gn[k, h, 2] += gw * d2
                    gt[k, 0] -= gw * normals[k, h, 0]
                    gt[k, 1] -= gw * normals[k, h, 1]
                    gt[k, 2] -= gw * normals[k, h, 2]
                    wh += w[h] * H[h]
                gd[k] += g * (wh - phi) / delta[k]
    return gn_arr, go_arr, gt_arr, gd_arr


def march(const double[:, ::1] a,
          const double[:, ::1] b,
          const double[::1] z0,
          double z1, double step, int n_halving,
          const double[:, :, ::1] normals,
          const double[:, ::1] offsets,
          const double[:, ::1] trans,
          const double[::1] delta):
    """March rays p(z) = a + b*z; hit where min_k phi_k <= 0."""
    cdef Py_ssize_t P = a.shape[0]
    zhit_arr = np.full(P, np.nan, dtype=np.float64)
    khit_arr = np.full(P, -1, dtype=np.int64)
    cdef double[::1] zhit = zhit_arr
    cdef long long[::1] khit = khit_arr
    cdef Py_ssize_t p, kb
    cdef int it, found
    cdef double z, zprev, lo, hi, mid, phi
    with nogil:
        for p in range(P):
            z = z0[p]
            zprev = NAN
            found = 0
            while z <= z1 + 1e-12:
                phi = _min_phi(normals, offsets, trans, delta,
                               a[p, 0] + b[p, 0] * z, a[p, 1] + b[p, 1] * z, z,
                               0.0, &kb)
                if phi <= 0.0:
                    found = 1
                    break
                zprev = z
                z = z + step
            if not found:
                continue
            if zprev != zprev:
                hi = z
            else:
                lo = zprev
                hi = z
                for it in range(n_halving):
                    mid = 0.5 * (lo + hi)
                    phi = _min_phi(normals, offsets, trans, delta,
                                   a[p, 0] + b[p, 0] * mid, a[p, 1] + b[p, 1] * mid, mid,
                                   0.0, &kb)
                    if phi <= 0.0:
                        hi = mid
                    else:
                        lo = mid
                hi = 0.5 * (lo + hi)
            phi = _min_phi(normals, offsets, trans, delta,
                           a[p, 0] + b[p, 0] * hi, a[p, 1] + b[p, 1] * hi, hi,
                           INFINITY, &kb)
            zhit[p] = hi
            khit[p] = kb
    return zhit_arr, khit_arr
