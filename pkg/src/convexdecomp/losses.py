"""Fit losses over a sample set, with analytic gradients.

Every term is available on its own (``sample_loss``, ``unique_loss``, ...)
and combined by ``total_loss`` / ``loss_and_grad``. Terms that pick data by
nearest neighbour or by closest face use a :class:`Structure` that is held
fixed during one evaluation; pass one explicitly to freeze it across
evaluations (finite differences do this).
"""
import json
import warnings
from dataclasses import asdict, dataclass, fields

import numpy as np
from scipy.special import expit

from . import kernels
from .geometry import Decomposition, Params
from .sampling import FREE, SHELL, SURFACE_IN, SURFACE_OUT

N_LABELS = 41
GUIDANCE_NEIGHBOURS = 50
ROW_MASS_MIN = 1e-8

TERMS = ("sample", "unique", "ortho", "align", "volume", "entropy", "overlap", "guidance",
         "localization")


@dataclass
class LossWeights:
    sample: float = 1.0
    unique: float = 1e-5
    ortho: float = 10.0
    align: float = 1.0
    volume: float = 1.0
    entropy: float = 1.0
    overlap: float = 0.1
    guidance: float = 0.01
    localization: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = float(getattr(self, f.name))
            if not v >= 0:
                raise ValueError(f"loss weight {f.name} must be non-negative")
            setattr(self, f.name, v)

    @classmethod
    def only(cls, **nonzero):
        w = cls(**{t: 0.0 for t in TERMS})
        for k, v in nonzero.items():
            setattr(w, k, float(v))
        return w

    @classmethod
    def from_dict(cls, d):
        unknown = set(d) - set(TERMS)
        if unknown:
            raise ValueError(f"unknown loss weight(s): {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path) as f:
            return cls.from_dict(json.load(f))

    def to_dict(self):
        return asdict(self)


@dataclass
class LossBreakdown:
    sample: float
    unique: float
    ortho: float
    align: float
    volume: float
    entropy: float
    overlap: float
    guidance: float
    localization: float
    weights: LossWeights

    @property
    def total(self):
        return float(sum(getattr(self.weights, t) * getattr(self, t) for t in TERMS))

    def terms(self):
        return {t: getattr(self, t) for t in TERMS}


@dataclass
class Structure:
    """Discrete choices frozen within one evaluation.

    ``guidance``: (K, m) sample indices of each convex's nearest inside samples.
    ``nearest``: (K,) index of the inside sample nearest each translation.
    ``face``: (M, K) closest face per entropy sample and convex, or None.
    ``union``: (N,) convex attaining the union score per sample, or None.
    """

    guidance: np.ndarray
    nearest: np.ndarray
    face: object = None
    union: object = None


def _as_params(decomp):
    if isinstance(decomp, Params):
        return decomp
    return Params.from_decomposition(decomp)


def _sigma(decomp, sigma):
    if sigma is not None:
        return float(sigma)
    if isinstance(decomp, Decomposition):
        return decomp.sigma
    raise ValueError("sigma is required when passing raw parameters")


def entropy_index(samples):
    return np.flatnonzero((samples.kind == SURFACE_IN) & (samples.seg >= 0))


def compute_structure(p, samples, phi_face=None, phi=None):
    """Nearest-neighbour sets, closest-face masks and union argmax for parameters ``p``."""
    k = len(p)
    ins = samples.inside_index
    if len(ins):
        tree = samples.inside_tree()
        m = min(GUIDANCE_NEIGHBOURS, len(ins))
        _, nn = tree.query(p.translation, k=m)
        if np.any(np.asarray(nn) >= len(ins)):
            # the tree reports no neighbour when distances overflow
            raise FloatingPointError("convex translations out of range")
        guidance = ins[np.asarray(nn).reshape(k, m)]
        _, near = tree.query(p.translation, k=1)
        nearest = ins[np.asarray(near).reshape(k)]
    else:
        guidance = np.zeros((k, 0), dtype=np.int64)
        nearest = np.zeros(0, dtype=np.int64)
    face = None
    if phi_face is not None:
        face = phi_face[entropy_index(samples)]
    # max of sigmoid(-sigma phi) is attained at min phi
    union = None if phi is None else phi.argmin(axis=1)
    return Structure(guidance, nearest, face, union)


class _Forward:
    """SDF values and soft memberships of every sample against every convex."""

    def __init__(self, p, samples, sigma):
        self.p = p
        self.sigma = sigma
        self.normals = p.normals
        self.phi, self.face = kernels.sdf_forward(samples.positions, self.normals, p.offsets,
                                                  p.translation, p.smoothness)
        self.s = expit(-sigma * self.phi)


# Sample-based terms return (value, gradient w.r.t. s or phi of shape (N, K)).

def _sample_term(fw, samples, w_free, w_surface, structure=None):
    s = fw.s
    n = len(samples)
    gs = np.zeros_like(s)
    if n == 0:
        return 0.0, gs
    if structure is not None and structure.union is not None:
        k_best = structure.union
    else:
        k_best = fw.phi.argmin(axis=1)
    U = s[np.arange(n), k_best]
    y = samples.inside.astype(np.float64)
    kind = samples.kind
    value = 0.0
    gU = np.zeros(n)
    for mask, w in (((kind == FREE) | (kind == SHELL), w_free),
                    ((kind == SURFACE_IN) | (kind == SURFACE_OUT), w_surface)):
        idx = np.flatnonzero(mask)
        if len(idx) == 0:
            continue
        err = U[idx] - y[idx]
        value += w * float(np.mean(err ** 2))
        gU[idx] = w * 2.0 * err / len(idx)
    gs[np.arange(n), k_best] = gU
    return value, gs


def _entropy_term(fw, samples, structure, level="face", warn=True):
    s = fw.s
    K = s.shape[1]
    gs = np.zeros_like(s)
    idx = entropy_index(samples)
    if len(idx) == 0:
        if warn:
            warnings.warn("entropy loss: no labelled inside surface samples; returning 0",
                          RuntimeWarning, stacklevel=3)
        return 0.0, gs
    C = s[idx]
    lab = samples.seg[idx].astype(np.int64)
    if level == "face":
        face = structure.face if structure is not None and structure.face is not None \
            else fw.face[idx]
        rows = np.arange(K)[None, :] * 6 + face
        n_rows, norm = 6 * K, 6 * K
    elif level == "convex":
        rows = np.broadcast_to(np.arange(K)[None, :], C.shape)
        n_rows, norm = K, K
    else:
        raise ValueError(f"unknown entropy level {level!r}")
    flat = rows * N_LABELS + lab[:, None]
    q = np.bincount(flat.ravel(), weights=C.ravel(), minlength=n_rows * N_LABELS)
    q = q.reshape(n_rows, N_LABELS)
    mass = q.sum(axis=1)
    live = mass >= ROW_MASS_MIN
    P = np.zeros_like(q)
    P[live] = q[live] / mass[live, None]
    pos = P > 0
    logp = np.zeros_like(P)
    logp[pos] = np.log(P[pos])
    ent = -(P * logp).sum(axis=1)
    value = float(ent[live].sum()) / norm
    dq = np.zeros_like(q)
    dq[live] = (-logp[live] - ent[live, None]) / mass[live, None]
    dq[~pos] = 0.0
    gs[idx] = dq.ravel()[flat] / norm
    return value, gs


def _overlap_term(fw):
    s = fw.s
    n = len(s)
    if n == 0:
        return 0.0, np.zeros_like(s)
    r = np.maximum(s.sum(axis=1) - 1.0, 0.0)
    value = float(np.mean(r ** 2))
    return value, np.broadcast_to((2.0 * r / n)[:, None], s.shape).copy()


def _guidance_term(fw, structure):
    G = structure.guidance
    K = fw.phi.shape[1]
    gphi = np.zeros_like(fw.phi)
    if G.shape[1] == 0:
        return 0.0, gphi
    cols = np.arange(K)[:, None]
    r = np.maximum(fw.phi[G, cols], 0.0)
    m = G.shape[1]
    value = float(np.mean(np.mean(r ** 2, axis=1)))
    gphi[G, np.broadcast_to(cols, G.shape)] = 2.0 * r / (m * K)
    return value, gphi


def _localization_term(p, samples, structure):
    if len(structure.nearest) == 0:
        raise ValueError("localization loss needs at least one inside sample")
    diff = p.translation - samples.positions[structure.nearest]
    K = len(p)
    return float(np.mean(np.sum(diff ** 2, axis=1))), 2.0 * diff / K


def _unique_term(p):
    d = p.offsets
    if np.any(d <= 0):
        raise ValueError("unique loss is undefined for non-positive offsets")
    K = len(d)
    value = float(np.mean(np.mean(d ** 2, axis=1) + np.mean(d ** -2.0, axis=1)))
    return value, (2.0 * d - 2.0 * d ** -3.0) / (6.0 * K)


def _ortho_term(M):
    E = np.eye(3) - M.T @ M
    return float(np.sum(E ** 2) / 9.0), -(4.0 / 9.0) * M @ E


def _align_term(p, warn=True):
    M = p.manhattan
    norms = np.linalg.norm(M, axis=0)
    ok = norms > 0
    if warn and not ok.all():
        warnings.warn("align loss: zero-norm Manhattan column left unnormalized", RuntimeWarning,
                      stacklevel=3)
    Mn = M.copy()
    Mn[:, ok] = M[:, ok] / norms[ok]
    K = len(p)
    # sum over the 6 faces of n_h . w_h = 2 * sum_i a_i . Mn[:, i]
    dots = np.einsum("kid,di->k", p.axes, Mn)
    value = float(np.mean(1.0 - dots / 3.0))
    g_axes = np.broadcast_to(-Mn.T[None] / (3.0 * K), p.axes.shape).copy()
    g_Mn = -p.axes.sum(axis=0).T / (3.0 * K)
    g_M = g_Mn.copy()
    for i in np.flatnonzero(ok):
        m = Mn[:, i]
        g_M[:, i] = (g_Mn[:, i] - m * (m @ g_Mn[:, i])) / norms[i]
    return value, g_axes, g_M


def _volume_term(p):
    d = p.offsets
    K = len(d)
    ext = d[:, :3] + d[:, 3:]
    V = np.prod(ext, axis=1)
    diffs = V[1:] - V[:-1]
    act = (diffs > 0).astype(np.float64)
    value = float(np.sum(diffs * act) / K)
    gV = np.zeros(K)
    gV[1:] += act / K
    gV[:-1] -= act / K
    others = np.stack([ext[:, 1] * ext[:, 2], ext[:, 0] * ext[:, 2], ext[:, 0] * ext[:, 1]], axis=1)
    g3 = gV[:, None] * others
    return value, np.concatenate([g3, g3], axis=1)


def _needs_samples(weights):
    return any(getattr(weights, t) > 0 for t in ("sample", "entropy", "overlap", "guidance",
                                                  "localization"))


def _evaluate(decomp, samples, weights, w_free, w_surface, structure, grad, sigma,
              entropy_level):
    p = _as_params(decomp)
    sigma = _sigma(decomp, sigma)
    K = len(p)
    fw = _Forward(p, samples, sigma)
    if structure is None:
        structure = compute_structure(p, samples, fw.face, fw.phi)

    vals = {}
    gs_total = np.zeros_like(fw.s)
    gphi_total = np.zeros_like(fw.phi)
    g = Params.zeros(K)

    vals["sample"], gs = _sample_term(fw, samples, w_free, w_surface, structure)
    gs_total += weights.sample * gs
    vals["entropy"], gs = _entropy_term(fw, samples, structure, entropy_level,
                                        warn=weights.entropy > 0)
    gs_total += weights.entropy * gs
    vals["overlap"], gs = _overlap_term(fw)
    gs_total += weights.overlap * gs
    vals["guidance"], gphi = _guidance_term(fw, structure)
    gphi_total += weights.guidance * gphi
    if len(structure.nearest) or weights.localization > 0:
        vals["localization"], gt = _localization_term(p, samples, structure)
        g.translation += weights.localization * gt
    else:
        vals["localization"] = 0.0

    vals["unique"], gd = _unique_term(p)
    g.offsets += weights.unique * gd
    vals["ortho"], gM = _ortho_term(p.manhattan)
    g.manhattan += weights.ortho * gM
    vals["align"], ga, gM = _align_term(p, warn=weights.align > 0)
    g.axes += weights.align * ga
    g.manhattan += weights.align * gM
    vals["volume"], gd = _volume_term(p)
    g.offsets += weights.volume * gd

    breakdown = LossBreakdown(weights=weights, **vals)
    if not grad:
        return breakdown, None, structure

    gphi_total += gs_total * (-sigma * fw.s * (1.0 - fw.s))
    gn, go, gt, gdelta = kernels.sdf_backward(samples.positions, fw.normals, p.offsets,
                                              p.translation, p.smoothness, gphi_total)
    g.axes += gn[:, :3] - gn[:, 3:]
    g.offsets += go
    g.translation += gt
    g.smoothness += gdelta
    return breakdown, g, structure


def total_loss(decomp, samples, weights=None, w_free=0.5, w_surface=0.5, *, structure=None,
               sigma=None, entropy_level="face"):
    """Weighted sum of all terms; returns a :class:`LossBreakdown`."""
    weights = LossWeights() if weights is None else weights
    return _evaluate(decomp, samples, weights, w_free, w_surface, structure, False, sigma,
                     entropy_level)[0]


def loss_and_grad(decomp, samples, weights=None, w_free=0.5, w_surface=0.5, *, structure=None,
                  sigma=None, entropy_level="face"):
    """Breakdown plus the exact gradient (as :class:`Params`) of the weighted total."""
    weights = LossWeights() if weights is None else weights
    b, g, _ = _evaluate(decomp, samples, weights, w_free, w_surface, structure, True, sigma,
                        entropy_level)
    return b, g


def sample_loss(decomp, samples, w_free=0.5, w_surface=0.5, sigma=None):
    """Squared error between the union score and the binary labels, per group."""
    p = _as_params(decomp)
    if len(samples) == 0:
        raise ValueError("sample loss needs samples")
    return _sample_term(_Forward(p, samples, _sigma(decomp, sigma)), samples, w_free, w_surface)[0]


def unique_loss(decomp):
    return _unique_term(_as_params(decomp))[0]


def ortho_loss(M):
    return _ortho_term(np.asarray(M, dtype=np.float64))[0]


def align_loss(decomp):
    return _align_term(_as_params(decomp))[0]


def volume_order_loss(decomp):
    return _volume_term(_as_params(decomp))[0]


def entropy_loss(decomp, samples, level="face", sigma=None):
    p = _as_params(decomp)
    return _entropy_term(_Forward(p, samples, _sigma(decomp, sigma)), samples, None, level)[0]


def overlap_loss(decomp, samples, sigma=None):
    p = _as_params(decomp)
    return _overlap_term(_Forward(p, samples, _sigma(decomp, sigma)))[0]


def guidance_loss(decomp, samples, sigma=None):
    p = _as_params(decomp)
    fw = _Forward(p, samples, _sigma(decomp, sigma))
    return _guidance_term(fw, compute_structure(p, samples))[0]


def localization_loss(decomp, samples):
    p = _as_params(decomp)
    return _localization_term(p, samples, compute_structure(p, samples))[0]
