"""Pure numpy versions of the compiled kernels in ``_kernels.pyx``.

Same signatures and return values; used when the extension is not built
or when ``CONVEXDECOMP_BACKEND=python`` is set.
"""
import numpy as np


def _halfplanes(points, normals, offsets, trans):
    # H[n, k, h] = n_kh . (x_n - c_k) - d_kh
    proj = np.einsum("nd,khd->nkh", points, normals)
    shift = np.einsum("kd,khd->kh", trans, normals)
    return proj - shift[None] - offsets[None]


def _lse(H, delta):
    m = H.max(axis=2)
    e = np.exp(delta[None, :, None] * (H - m[..., None]))
    s = e.sum(axis=2)
    phi = m + np.log(s) / delta[None, :]
    return phi, e / s[..., None], m


def sdf_forward(points, normals, offsets, trans, delta):
    H = _halfplanes(points, normals, offsets, trans)
    phi, _, _ = _lse(H, delta)
    return phi, H.argmax(axis=2).astype(np.int64)


def sdf_backward(points, normals, offsets, trans, delta, gphi):
    H = _halfplanes(points, normals, offsets, trans)
    phi, w, _ = _lse(H, delta)
    gw = gphi[..., None] * w
    col = gw.sum(axis=0)
    g_normals = np.einsum("nkh,nd->khd", gw, points) - col[..., None] * trans[:, None, :]
    g_offsets = -col
    g_trans = -np.einsum("kh,khd->kd", col, normals)
    wh = (w * H).sum(axis=2)
    g_delta = (gphi * (wh - phi)).sum(axis=0) / delta
    return g_normals, g_offsets, g_trans, g_delta


def _min_phi(pts, normals, offsets, trans, delta):
    phi, _ = sdf_forward(pts, normals, offsets, trans, delta)
    return phi.min(axis=1), phi.argmin(axis=1)


def _at(a, b, z):
    return np.column_stack([a[:, 0] + b[:, 0] * z, a[:, 1] + b[:, 1] * z, z])


def march(a, b, z0, z1, step, n_halving, normals, offsets, trans, delta):
    P = a.shape[0]
    zhit = np.full(P, np.nan)
    khit = np.full(P, -1, dtype=np.int64)
    z = np.array(z0, dtype=np.float64)
    zprev = np.full(P, np.nan)
    active = np.arange(P)
    found = np.zeros(P, dtype=bool)
    while active.size:
        za = z[active]
        phi, _ = _min_phi(_at(a[active], b[active], za), normals, offsets, trans, delta)
        hit = phi <= 0.0
        found[active[hit]] = True
        rest = active[~hit]
        zprev[rest] = z[rest]
        z[rest] = z[rest] + step
        active = rest[z[rest] <= z1 + 1e-12]
    idx = np.flatnonzero(found)
    hi = z[idx].copy()
    lo = zprev[idx]
    bracket = ~np.isnan(lo)
    if bracket.any():
        sub = idx[bracket]
        lo_b, hi_b = lo[bracket].copy(), hi[bracket].copy()
        for _ in range(n_halving):
            mid = 0.5 * (lo_b + hi_b)
            phi, _ = _min_phi(_at(a[sub], b[sub], mid), normals, offsets, trans, delta)
            inside = phi <= 0.0
            hi_b = np.where(inside, mid, hi_b)
            lo_b = np.where(inside, lo_b, mid)
        hi[bracket] = 0.5 * (lo_b + hi_b)
    if idx.size:
        _, k = _min_phi(_at(a[idx], b[idx], hi), normals, offsets, trans, delta)
        zhit[idx] = hi
        khit[idx] = k
    return zhit, khit
