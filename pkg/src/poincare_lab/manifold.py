"""Charted embedded submanifolds and their tubular neighborhoods.

A manifold is a single chart ``M: Gamma -> R^d`` on a box of parameters,
where each coordinate is either periodic or closed.  All evaluators take
parameter batches of shape ``(n, k)`` or a single point ``(k,)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import optimize

__all__ = [
    "ChartedManifold",
    "Circle",
    "Sphere",
    "Torus",
    "Segment",
    "MetricData",
    "SecondFundamental",
    "TubularNeighborhood",
    "TubeIntegral",
    "EmbeddingError",
    "ReachError",
    "metric_at",
    "second_fundamental_at",
    "tube_point",
    "weyl_density",
    "tube_integrate",
    "ambient_shell_integral",
    "pushforward_gradient",
    "reach_estimate",
    "orthonormal_normal_frame",
    "get_manifold",
    "MANIFOLDS",
]

FD_STEP = 1e-5


class EmbeddingError(ValueError):
    """The chart is not an embedding (rank drop or self-intersection)."""


class ReachError(ValueError):
    """A tube radius or normal offset exceeds the admissible reach."""


def _as_params(u, k):
    u = np.asarray(u, dtype=float)
    single = u.ndim <= 1
    pts = u.reshape(-1, k)
    return pts, single


class ChartedManifold:
    """Single-chart embedded submanifold of ``R^d``.

    Subclasses provide ``_embed`` and optionally the analytic derivatives
    ``_tangents`` (shape ``(n, k, d)``), ``_hessians`` (``(n, k, k, d)``) and
    ``_normals`` (``(n, d - k, d)``).  Missing derivatives fall back to
    central differences; a missing normal frame falls back to
    :func:`orthonormal_normal_frame`.
    """

    name = "manifold"
    k = 1
    d = 2
    lower: tuple = (0.0,)
    upper: tuple = (2 * np.pi,)
    periodic: tuple = (True,)
    #: analytic reach where known; ``None`` means estimate numerically
    reach: float | None = None

    def embed(self, u):
        pts, single = _as_params(u, self.k)
        out = self._embed(pts)
        return out[0] if single else out

    def tangents(self, u, method="analytic"):
        pts, single = _as_params(u, self.k)
        if method == "analytic" and hasattr(self, "_tangents"):
            out = self._tangents(pts)
        else:
            out = np.empty((len(pts), self.k, self.d))
            for i in range(self.k):
                e = np.zeros(self.k)
                e[i] = FD_STEP
                out[:, i] = (self._embed(pts + e) - self._embed(pts - e)) / (2 * FD_STEP)
        return out[0] if single else out

    def hessians(self, u, method="analytic"):
        pts, single = _as_params(u, self.k)
        if method == "analytic" and hasattr(self, "_hessians"):
            out = self._hessians(pts)
        else:
            step = 1e-4
            out = np.empty((len(pts), self.k, self.k, self.d))
            for i in range(self.k):
                for j in range(self.k):
                    ei = np.zeros(self.k)
                    ej = np.zeros(self.k)
                    ei[i] = step
                    ej[j] = step
                    out[:, i, j] = (
                        self._embed(pts + ei + ej)
                        - self._embed(pts + ei - ej)
                        - self._embed(pts - ei + ej)
                        + self._embed(pts - ei - ej)
                    ) / (4 * step**2)
        return out[0] if single else out

    def normals(self, u):
        pts, single = _as_params(u, self.k)
        if hasattr(self, "_normals"):
            out = self._normals(pts)
        else:
            out = orthonormal_normal_frame(self.tangents(pts))
        return out[0] if single else out

    def parameter_grid(self, n):
        """Cell-centred parameter grid with ``n`` points per coordinate."""
        axes = []
        for lo, hi in zip(self.lower, self.upper):
            step = (hi - lo) / n
            axes.append(lo + step * (np.arange(n) + 0.5))
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1), axes

    def distance(self, x):
        """Euclidean distance from ambient points to the manifold.

        Generic fallback: nearest parameter-grid probe, then local refinement.
        """
        x = np.atleast_2d(np.asarray(x, dtype=float))
        probes, _ = self.parameter_grid(64 if self.k == 1 else 32)
        P = self._embed(probes)
        out = np.empty(len(x))
        for n, y in enumerate(x):
            j = int(np.argmin(np.sum((P - y) ** 2, axis=-1)))
            res = optimize.minimize(lambda u: float(np.sum((self.embed(u) - y) ** 2)), probes[j])
            out[n] = np.sqrt(res.fun)
        return out

    def __repr__(self):
        return f"{type(self).__name__}(k={self.k}, d={self.d})"


def orthonormal_normal_frame(tangents):
    """Deterministic orthonormal frame of the normal space.

    Candidate vectors are the ambient basis vectors in their natural order;
    each is projected off the tangent space and the previously accepted
    normals, and the ``d - k`` with the largest residuals (ties broken by
    order) are kept.  Signs follow the candidate basis vector, so the frame
    never flips between nearby parameter values unless the selection changes.
    """
    T = np.atleast_3d(tangents)
    if T.ndim == 2:
        T = T[None]
    n, k, d = T.shape
    out = np.empty((n, d - k, d))
    for p in range(n):
        Q, _ = np.linalg.qr(T[p].T)
        basis = [Q[:, i] for i in range(k)]
        chosen = []
        for _ in range(d - k):
            best, best_norm = None, -1.0
            for e in np.eye(d):
                v = e - sum(np.dot(e, b) * b for b in basis)
                nv = np.linalg.norm(v)
                if nv > best_norm + 1e-12:
                    best, best_norm = v, nv
            v = best / best_norm
            basis.append(v)
            chosen.append(v)
        out[p] = np.array(chosen)
    return out


class Circle(ChartedManifold):
    """Circle of radius ``R`` in the plane, ``M(theta) = R(cos, sin)``."""

    k, d = 1, 2
    lower, upper, periodic = (0.0,), (2 * np.pi,), (True,)

    def __init__(self, R=1.0):
        self.R = float(R)
        self.name = "circle" if self.R == 1.0 else f"circleR{self.R:g}"
        self.reach = self.R

    def _embed(self, u):
        t = u[:, 0]
        return self.R * np.column_stack([np.cos(t), np.sin(t)])

    def _tangents(self, u):
        t = u[:, 0]
        return (self.R * np.column_stack([-np.sin(t), np.cos(t)]))[:, None, :]

    def _hessians(self, u):
        return -self._embed(u)[:, None, None, :]

    def _normals(self, u):
        t = u[:, 0]
        return np.column_stack([np.cos(t), np.sin(t)])[:, None, :]

    def distance(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.abs(np.linalg.norm(x, axis=-1) - self.R)


class Sphere(ChartedManifold):
    """Round sphere in ``R^3`` in colatitude-longitude coordinates.

    The chart degenerates at the poles; the cell-centred parameter grids used
    throughout never place a node there.
    """

    k, d = 2, 3
    lower, upper, periodic = (0.0, 0.0), (np.pi, 2 * np.pi), (False, True)

    def __init__(self, R=1.0):
        self.R = float(R)
        self.name = "sphere" if self.R == 1.0 else f"sphereR{self.R:g}"
        self.reach = self.R

    def _embed(self, u):
        th, ph = u[:, 0], u[:, 1]
        return self.R * np.column_stack([np.sin(th) * np.cos(ph), np.sin(th) * np.sin(ph), np.cos(th)])

    def _tangents(self, u):
        th, ph = u[:, 0], u[:, 1]
        t1 = np.column_stack([np.cos(th) * np.cos(ph), np.cos(th) * np.sin(ph), -np.sin(th)])
        t2 = np.column_stack([-np.sin(th) * np.sin(ph), np.sin(th) * np.cos(ph), np.zeros_like(th)])
        return self.R * np.stack([t1, t2], axis=1)

    def _hessians(self, u):
        th, ph = u[:, 0], u[:, 1]
        m = self._embed(u) / self.R
        h12 = np.column_stack([-np.cos(th) * np.sin(ph), np.cos(th) * np.cos(ph), np.zeros_like(th)])
        h22 = np.column_stack([-np.sin(th) * np.cos(ph), -np.sin(th) * np.sin(ph), np.zeros_like(th)])
        H = np.empty((len(u), 2, 2, 3))
        H[:, 0, 0] = -m
        H[:, 0, 1] = H[:, 1, 0] = h12
        H[:, 1, 1] = h22
        return self.R * H

    def _normals(self, u):
        return (self._embed(u) / self.R)[:, None, :]

    def distance(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return np.abs(np.linalg.norm(x, axis=-1) - self.R)


class Torus(ChartedManifold):
    """Torus of revolution with core radius ``R`` and tube radius ``a``."""

    k, d = 2, 3
    lower, upper, periodic = (0.0, 0.0), (2 * np.pi, 2 * np.pi), (True, True)

    def __init__(self, R=2.0, a=0.5):
        self.R, self.a = float(R), float(a)
        self.name = "torus"
        self.reach = min(self.a, self.R - self.a)

    def _embed(self, u):
        s, t = u[:, 0], u[:, 1]
        w = self.R + self.a * np.cos(t)
        return np.column_stack([w * np.cos(s), w * np.sin(s), self.a * np.sin(t)])

    def _tangents(self, u):
        s, t = u[:, 0], u[:, 1]
        w = self.R + self.a * np.cos(t)
        t1 = np.column_stack([-w * np.sin(s), w * np.cos(s), np.zeros_like(s)])
        t2 = self.a * np.column_stack([-np.sin(t) * np.cos(s), -np.sin(t) * np.sin(s), np.cos(t)])
        return np.stack([t1, t2], axis=1)

    def _hessians(self, u):
        s, t = u[:, 0], u[:, 1]
        w = self.R + self.a * np.cos(t)
        z = np.zeros_like(s)
        H = np.empty((len(u), 2, 2, 3))
        H[:, 0, 0] = np.column_stack([-w * np.cos(s), -w * np.sin(s), z])
        H[:, 0, 1] = H[:, 1, 0] = self.a * np.column_stack([np.sin(t) * np.sin(s), -np.sin(t) * np.cos(s), z])
        H[:, 1, 1] = -self.a * np.column_stack([np.cos(t) * np.cos(s), np.cos(t) * np.sin(s), np.sin(t)])
        return H

    def _normals(self, u):
        s, t = u[:, 0], u[:, 1]
        return np.column_stack([np.cos(t) * np.cos(s), np.cos(t) * np.sin(s), np.sin(t)])[:, None, :]

    def distance(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        rho = np.hypot(x[:, 0], x[:, 1])
        return np.abs(np.hypot(rho - self.R, x[:, 2]) - self.a)


class Segment(ChartedManifold):
    """Straight segment ``t -> (t, 0)``, ``t in [0, 1]``; the flat reference case."""

    name = "segment"
    k, d = 1, 2
    lower, upper, periodic = (0.0,), (1.0,), (False,)
    reach = np.inf

    def _embed(self, u):
        return np.column_stack([u[:, 0], np.zeros(len(u))])

    def _tangents(self, u):
        return np.tile(np.array([[[1.0, 0.0]]]), (len(u), 1, 1))

    def _hessians(self, u):
        return np.zeros((len(u), 1, 1, 2))

    def _normals(self, u):
        return np.tile(np.array([[[0.0, 1.0]]]), (len(u), 1, 1))


MANIFOLDS = {
    "circle": lambda: Circle(1.0),
    "circleR": lambda: Circle(2.0),
    "sphere": lambda: Sphere(1.0),
    "torus": lambda: Torus(2.0, 0.5),
    "segment": Segment,
}


def get_manifold(name: str, **kwargs) -> ChartedManifold:
    """Catalog lookup.  ``circleR`` accepts ``R=...`` (default 2)."""
    if name == "circleR" and "R" in kwargs:
        return Circle(kwargs["R"])
    try:
        return MANIFOLDS[name]()
    except KeyError:
        raise KeyError(f"unknown manifold {name!r}; choose from {sorted(MANIFOLDS)}") from None


# --------------------------------------------------------------------------
# fundamental forms


@dataclass(frozen=True)
class MetricData:
    g: np.ndarray
    det_g: float
    g_inv: np.ndarray


@dataclass(frozen=True)
class SecondFundamental:
    """``G[l]`` and the mixed forms ``G_tilde[l] = g^{-1} G[l]`` per normal field.

    ``sup_norm`` is the largest principal curvature magnitude, i.e. the
    largest spectral radius over the ``G_tilde[l]``.
    """

    G: np.ndarray
    G_tilde: np.ndarray
    sup_norm: float


def metric_at(manifold: ChartedManifold, u, method="analytic") -> MetricData:
    """First fundamental form ``g_ij = dM/du^i . dM/du^j`` at one parameter point."""
    T = manifold.tangents(np.asarray(u, dtype=float), method=method)
    g = T @ T.T
    det = float(np.linalg.det(g))
    if not det > 1e-14 * max(1.0, float(np.trace(g))) ** manifold.k:
        raise EmbeddingError(f"tangent map loses rank at u={u!r} (det g = {det:.3e})")
    return MetricData(g, det, np.linalg.inv(g))


def second_fundamental_at(manifold: ChartedManifold, u, method="analytic", sym_tol=1e-6) -> SecondFundamental:
    """``G_ij(l) = -d^2M/du^i du^j . N_l`` and ``G_tilde(l) = g^{-1} G(l)``."""
    u = np.asarray(u, dtype=float)
    m = metric_at(manifold, u, method=method)
    H = manifold.hessians(u, method=method)
    N = manifold.normals(u)
    G = -np.einsum("ijd,ld->lij", H, N)
    asym = float(np.max(np.abs(G - np.swapaxes(G, 1, 2)))) if G.size else 0.0
    if asym > sym_tol:
        raise ValueError(f"second fundamental form asymmetric by {asym:.2e}; differentiation step failed")
    Gt = np.einsum("is,lsj->lij", m.g_inv, G)
    radius = max((float(np.max(np.abs(np.linalg.eigvals(Gl)))) for Gl in Gt), default=0.0)
    return SecondFundamental(G, Gt, radius)


# --------------------------------------------------------------------------
# tubes


@dataclass(frozen=True)
class TubularNeighborhood:
    """Points within ``radius`` of ``base``; construction enforces ``radius <= reach``."""

    base: ChartedManifold
    radius: float
    reach_lower_bound: float

    @classmethod
    def build(cls, base: ChartedManifold, radius: float, reach: float | None = None):
        reach = reach if reach is not None else (base.reach if base.reach is not None else reach_estimate(base))
        if not 0 < radius <= reach:
            raise ReachError(f"tube radius {radius} outside (0, reach={reach}]")
        return cls(base, float(radius), float(reach))

    def contains(self, x):
        return self.base.distance(x) <= self.radius

    def level_set(self, x):
        """Signed function, negative inside the tube."""
        return self.base.distance(x) - self.radius


def tube_point(tube: TubularNeighborhood, u, r):
    """``y(u, r) = M(u) + sum_l r^l N_l(u)``."""
    r = np.atleast_1d(np.asarray(r, dtype=float))
    if np.linalg.norm(r) > tube.radius * (1 + 1e-12):
        raise ReachError(f"normal offset |r| = {np.linalg.norm(r):.4g} exceeds tube radius {tube.radius}")
    M = tube.base.embed(u)
    N = tube.base.normals(u)
    return M + np.einsum("l,ld->d", r, N)


def weyl_density(manifold: ChartedManifold, u, r) -> float:
    """Jacobian factor ``|det(I_k + sum_l r^l G_tilde(l))|`` of the tube map."""
    sf = second_fundamental_at(manifold, u)
    r = np.atleast_1d(np.asarray(r, dtype=float))
    A = np.eye(manifold.k) + np.einsum("l,lij->ij", r, sf.G_tilde)
    det = float(np.linalg.det(A))
    if det <= 0:
        raise ReachError(f"offset r={r} reaches a focal point (det = {det:.3e})")
    return det


def _batched_geometry(manifold, u):
    """Metric determinant, mixed second forms and normals on a batch of parameters."""
    T = manifold.tangents(u)
    g = np.einsum("nid,njd->nij", T, T)
    g_inv = np.linalg.inv(g)
    N = manifold.normals(u)
    G = -np.einsum("nijd,nld->nlij", manifold.hessians(u), N)
    Gt = np.einsum("nis,nlsj->nlij", g_inv, G)
    return np.linalg.det(g), Gt, N, T


def _parameter_rule(manifold, n):
    nodes, weights = [], []
    for lo, hi, per in zip(manifold.lower, manifold.upper, manifold.periodic):
        if per:
            step = (hi - lo) / n
            nodes.append(lo + step * np.arange(n))
            weights.append(np.full(n, step))
        else:
            x, w = np.polynomial.legendre.leggauss(n)
            nodes.append(0.5 * (hi - lo) * x + 0.5 * (hi + lo))
            weights.append(0.5 * (hi - lo) * w)
    U = np.stack([m.ravel() for m in np.meshgrid(*nodes, indexing="ij")], axis=-1)
    W = np.prod(np.stack([m.ravel() for m in np.meshgrid(*weights, indexing="ij")], axis=-1), axis=-1)
    return U, W


def _normal_rule(codim, radius, n):
    x, w = np.polynomial.legendre.leggauss(n)
    if codim == 1:
        return (radius * x)[:, None], radius * w
    if codim == 2:
        rr = 0.5 * radius * (x + 1)
        wr = 0.5 * radius * w * rr
        m = 2 * n
        th = 2 * np.pi * np.arange(m) / m
        R, TH = np.meshgrid(rr, th, indexing="ij")
        W = np.outer(wr, np.full(m, 2 * np.pi / m))
        return np.column_stack([(R * np.cos(TH)).ravel(), (R * np.sin(TH)).ravel()]), W.ravel()
    raise NotImplementedError("tube integration supports codimension 1 and 2")


@dataclass(frozen=True)
class TubeIntegral:
    value: float
    refined_value: float
    refinement_delta: float
    converged: bool

    def to_record(self, manifold, radius, integrand):
        return {
            "manifold": manifold,
            "radius": radius,
            "integrand": integrand,
            "value": self.value,
            "refinement_delta": self.refinement_delta,
        }


def _tube_quadrature(tube, phi, n_tan, n_nor):
    mf = tube.base
    U, Wu = _parameter_rule(mf, n_tan)
    R, Wr = _normal_rule(mf.d - mf.k, tube.radius, n_nor)
    detg, Gt, N, _ = _batched_geometry(mf, U)
    M = mf.embed(U)
    # Y[n, q] = M[n] + sum_l R[q, l] N[n, l]
    Y = M[:, None, :] + np.einsum("ql,nld->nqd", R, N)
    J = np.abs(np.linalg.det(np.eye(mf.k)[None, None] + np.einsum("ql,nlij->nqij", R, Gt)))
    vals = np.asarray(phi(Y.reshape(-1, mf.d)), dtype=float).reshape(J.shape)
    return float(np.einsum("n,nq,q->", Wu * np.sqrt(detg), vals * J, Wr))


def tube_integrate(tube: TubularNeighborhood, phi: Callable, n_tangential=256, n_normal=32, rtol=1e-9) -> TubeIntegral:
    """Integrate ``phi`` over the tube through the tube coordinates.

    Trapezoid rule on periodic parameters, Gauss-Legendre on closed
    parameters and on the normal radius; the result is recomputed with
    doubled node counts and the difference reported.
    """
    coarse = _tube_quadrature(tube, phi, n_tangential, n_normal)
    fine = _tube_quadrature(tube, phi, 2 * n_tangential, 2 * n_normal)
    delta = abs(fine - coarse)
    return TubeIntegral(coarse, fine, delta, delta <= rtol * max(abs(fine), 1e-300))


def _piece_rule(lo, hi, n):
    """Nodes and weights on ``[lo, hi]`` after ``t = lo + (hi - lo)(1 - cos(pi s))/2``.

    The map flattens square-root behaviour at both ends, which is how the
    shell boundaries enter the iterated integrals.
    """
    x, w = np.polynomial.legendre.leggauss(n)
    s = 0.5 * (x + 1)
    t = lo + (hi - lo) * 0.5 * (1 - np.cos(np.pi * s))
    jac = (hi - lo) * 0.5 * np.pi * np.sin(np.pi * s)
    return t, 0.5 * w * jac


def _shell_rule(c2, a, b, n):
    """Rules for ``t`` over ``{a^2 <= c2 + t^2 <= b^2}`` for an array of ``c2``.

    Returns nodes and weights of shape ``(len(c2), 2n)``: two pieces per row,
    mirrored about 0 and split at the inner boundary when it is crossed.
    """
    c2 = np.asarray(c2, float)
    top = np.sqrt(np.clip(b * b - c2, 0.0, None))
    bot = np.sqrt(np.clip(a * a - c2, 0.0, None))
    x, w = np.polynomial.legendre.leggauss(n)
    s = 0.5 * (x + 1)
    shape = 0.5 * (1 - np.cos(np.pi * s))
    jac = 0.5 * np.pi * np.sin(np.pi * s) * 0.5 * w
    length = (top - bot)[:, None]
    t = bot[:, None] + length * shape
    wt = length * jac
    return np.concatenate([-t, t], axis=1), np.concatenate([wt, wt], axis=1)


def _kink_rule(c2, a, b, n):
    """Rule for an outer coordinate over ``[-sqrt(b^2 - c2), sqrt(b^2 - c2)]`` split at ``|t| = sqrt(a^2 - c2)``."""
    top = np.sqrt(max(b * b - c2, 0.0))
    edges = [-top, top]
    if c2 < a * a:
        bot = np.sqrt(a * a - c2)
        edges = [-top, -bot, bot, top]
    rules = [_piece_rule(lo, hi, n) for lo, hi in zip(edges[:-1], edges[1:])]
    return np.concatenate([r[0] for r in rules]), np.concatenate([r[1] for r in rules])


def ambient_shell_integral(manifold, radius, phi, n=96):
    """Integrate ``phi`` over ``{R - radius <= |x| <= R + radius}`` in Cartesian coordinates.

    A reference for :func:`tube_integrate` that never uses tube coordinates:
    each Cartesian coordinate is integrated in turn between the exact shell
    boundaries, with pieces split where those boundaries have kinks.
    Supports :class:`Circle` and :class:`Sphere`.
    """
    if not isinstance(manifold, (Circle, Sphere)):
        raise NotImplementedError("ambient reference integrals exist for circles and spheres")
    a, b = manifold.R - radius, manifold.R + radius
    xs, wx = _kink_rule(0.0, a, b, n)
    if manifold.d == 2:
        ys, wy = _shell_rule(xs * xs, a, b, n)
        pts = np.stack([np.broadcast_to(xs[:, None], ys.shape), ys], axis=-1)
        vals = np.asarray(phi(pts.reshape(-1, 2)), float).reshape(ys.shape)
        return float(np.dot(wx, np.sum(wy * vals, axis=1)))
    total = 0.0
    for x, w1 in zip(xs, wx):
        ys, wy = _kink_rule(x * x, a, b, n)
        zs, wz = _shell_rule(x * x + ys * ys, a, b, n)
        pts = np.stack([np.full(zs.shape, x), np.broadcast_to(ys[:, None], zs.shape), zs], axis=-1)
        vals = np.asarray(phi(pts.reshape(-1, 3)), float).reshape(zs.shape)
        total += w1 * np.dot(wy, np.sum(wz * vals, axis=1))
    return float(total)


def pushforward_gradient(tube: TubularNeighborhood, phi, u, r, grad_phi: Callable | None = None):
    """Gradient of ``phi(y(u, r))`` in tube coordinates ``(u, r)``.

    Uses ``grad_y phi . [dM/du, N] . blockdiag(I + sum r G_tilde, I)``; the
    normal-connection terms that appear in codimension >= 2 are not included.
    ``grad_phi`` defaults to a central difference of ``phi``.
    """
    mf = tube.base
    u = np.atleast_1d(np.asarray(u, dtype=float))
    r = np.atleast_1d(np.asarray(r, dtype=float))
    y = tube_point(tube, u, r)
    if grad_phi is None:
        gy = np.array([
            (phi(y + FD_STEP * e) - phi(y - FD_STEP * e)) / (2 * FD_STEP) for e in np.eye(mf.d)
        ], dtype=float).ravel()
    else:
        gy = np.asarray(grad_phi(y), dtype=float)
    sf = second_fundamental_at(mf, u)
    T = mf.tangents(u)
    N = mf.normals(u)
    frame = np.vstack([T, N]).T
    block = np.eye(mf.d)
    block[: mf.k, : mf.k] += np.einsum("l,lij->ij", r, sf.G_tilde)
    return gy @ frame @ block


def _refine_chord(manifold, u0, v0, fallback):
    """Polish a near double-normal chord to a critical point of ``|M(u) - M(v)|^2``."""
    k = manifold.k

    def grad(z):
        u, v = z[:k], z[k:]
        diff = manifold.embed(u) - manifold.embed(v)
        return np.concatenate([manifold.tangents(u) @ diff, -(manifold.tangents(v) @ diff)])

    sol = optimize.root(grad, np.concatenate([u0, v0]))
    if np.linalg.norm(grad(sol.x)) > 1e-9:
        return fallback
    length = float(np.linalg.norm(manifold.embed(sol.x[:k]) - manifold.embed(sol.x[k:])))
    # collapse onto a single point is not a chord
    return length if length > 0.5 * fallback else fallback


def reach_estimate(manifold: ChartedManifold, n_probe=None, normal_tol=0.02) -> float:
    """Lower bound on the reach from curvature and bottleneck probes.

    The focal bound is ``1 / max |principal curvature|``.  The bottleneck
    bound is half the shortest chord that is (within ``normal_tol``) normal
    to the manifold at both ends.  Chords between points that are far
    apart on the chart but close in space signal a self-intersection.
    """
    n_probe = n_probe or (400 if manifold.k == 1 else 40)
    U, _ = manifold.parameter_grid(n_probe)
    curv = max(second_fundamental_at(manifold, u).sup_norm for u in U)
    focal = np.inf if curv == 0 else 1.0 / curv

    P = manifold.embed(U)
    T = manifold.tangents(U)
    Q = np.linalg.qr(np.swapaxes(T, 1, 2))[0]  # orthonormal tangent bases (n, d, k)
    diff = P[None, :, :] - P[:, None, :]
    dist = np.linalg.norm(diff, axis=-1)
    span = np.array(manifold.upper) - np.array(manifold.lower)
    du = np.abs(U[None, :, :] - U[:, None, :])
    du = np.where(np.array(manifold.periodic), np.minimum(du, span - du), du)
    pdist = np.linalg.norm(du / span, axis=-1)

    # chord from i to j projected on tangent spaces at both ends
    unit = diff / np.where(dist > 0, dist, 1.0)[..., None]
    tan_i = np.linalg.norm(np.einsum("ijd,idk->ijk", unit, Q), axis=-1)
    tan_j = np.linalg.norm(np.einsum("ijd,jdk->ijk", unit, Q), axis=-1)
    off = ~np.eye(len(U), dtype=bool)
    normal_pairs = off & (tan_i < normal_tol) & (tan_j < normal_tol) & (pdist > 2.0 / n_probe)
    bottleneck = np.inf
    if np.any(normal_pairs):
        ii, jj = np.nonzero(normal_pairs)
        order = np.argsort(dist[ii, jj])[:8]
        for i, j in zip(ii[order], jj[order]):
            bottleneck = min(bottleneck, 0.5 * _refine_chord(manifold, U[i], U[j], dist[i, j]))

    spacing = np.max(np.linalg.norm(T, axis=-1)) * np.max(span) / n_probe
    if np.any(off & (pdist > 0.25) & (dist < 0.1 * spacing)):
        raise EmbeddingError("chart self-intersects: distinct parameters map to the same point")
    return float(min(focal, bottleneck))
