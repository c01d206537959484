"""Backend selection and chunked dispatch for the hot loops.

The compiled extension is used when importable; otherwise the numpy
fallback. ``CONVEXDECOMP_BACKEND=python`` forces the fallback.

Work is split into fixed-size chunks independent of the thread count, and
partial sums are reduced in chunk order, so results are bitwise identical
for any number of threads.
"""
import logging
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import _kernels_py

log = logging.getLogger(__name__)

try:
    from . import _kernels as _compiled
except ImportError:  # pragma: no cover - depends on build
    _compiled = None

CHUNK = 4096
RAY_CHUNK = 1024

_state = {"threads": 1, "backend": None}


def available_backends():
    return ["python"] + (["cython"] if _compiled is not None else [])


def set_backend(name):
    if name not in ("python", "cython"):
        raise ValueError(f"unknown backend {name!r}")
    if name == "cython" and _compiled is None:
        raise RuntimeError("compiled kernels are not built")
    _state["backend"] = name


def backend():
    return _state["backend"]


def _impl():
    return _compiled if _state["backend"] == "cython" else _kernels_py


def set_num_threads(n):
    _state["threads"] = max(1, int(n))


def num_threads():
    return _state["threads"]


def _map(fn, jobs):
    if _state["threads"] == 1 or len(jobs) == 1:
        return [fn(*j) for j in jobs]
    with ThreadPoolExecutor(_state["threads"]) as pool:
        return list(pool.map(lambda j: fn(*j), jobs))


def _chunks(n, size):
    return [(i, min(i + size, n)) for i in range(0, n, size)] or [(0, 0)]


def _pack(normals, offsets, trans, delta):
    return (np.ascontiguousarray(normals, dtype=np.float64),
            np.ascontiguousarray(offsets, dtype=np.float64),
            np.ascontiguousarray(trans, dtype=np.float64),
            np.ascontiguousarray(delta, dtype=np.float64))


def sdf_forward(points, normals, offsets, trans, delta):
    """Smooth SDF of every point against every convex.

    Returns ``phi`` of shape (N, K) and the index of the largest halfplane
    value per (point, convex), ties to the lowest face index.
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    args = _pack(normals, offsets, trans, delta)
    impl = _impl()
    parts = _map(lambda i, j: impl.sdf_forward(points[i:j], *args), _chunks(len(points), CHUNK))
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


def sdf_backward(points, normals, offsets, trans, delta, gphi):
    """Pull an upstream gradient on phi (N, K) back to convex parameters.

    Returns gradients for normals (K, 6, 3), offsets (K, 6),
    translations (K, 3) and smoothness (K,).
    """
    points = np.ascontiguousarray(points, dtype=np.float64)
    gphi = np.ascontiguousarray(gphi, dtype=np.float64)
    args = _pack(normals, offsets, trans, delta)
    impl = _impl()
    parts = _map(lambda i, j: impl.sdf_backward(points[i:j], *args, gphi[i:j]),
                 _chunks(len(points), CHUNK))
    out = [np.array(x) for x in parts[0]]
    for part in parts[1:]:
        for acc, x in zip(out, part):
            acc += x
    return tuple(out)


def march(a, b, z0, z1, step, n_halving, normals, offsets, trans, delta):
    """March rays ``p(z) = a + b*z`` (p_z = z) and return hit z and convex id.

    Misses come back as NaN / -1.
    """
    a = np.ascontiguousarray(a, dtype=np.float64)
    b = np.ascontiguousarray(b, dtype=np.float64)
    z0 = np.ascontiguousarray(z0, dtype=np.float64)
    args = _pack(normals, offsets, trans, delta)
    impl = _impl()
    parts = _map(lambda i, j: impl.march(a[i:j], b[i:j], z0[i:j], float(z1), float(step),
                                         int(n_halving), *args),
                 _chunks(len(a), RAY_CHUNK))
    return np.concatenate([p[0] for p in parts]), np.concatenate([p[1] for p in parts])


_env = os.environ.get("CONVEXDECOMP_BACKEND", "").strip().lower()
if _env == "python" or _compiled is None:
    _state["backend"] = "python"
    if _compiled is None:
        log.debug("compiled kernels unavailable; using numpy fallback")
else:
    _state["backend"] = "cython"
