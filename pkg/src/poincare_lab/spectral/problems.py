"""Problem-level drivers: Laplace-Beltrami gaps, tube stability fits, product gaps."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy import special

from .eigen import SpectrumResult, richardson, smallest_eigenvalues
from .grid import GridDomain
from .operators import DiscreteOperator, assemble_neumann_laplacian, assemble_weighted_generator

__all__ = [
    "ChartDegeneracyError",
    "assemble_laplace_beltrami",
    "laplace_beltrami_gap",
    "TubeStabilityReport",
    "tube_stability_report",
    "tensor_gap",
    "neumann_ball_gap",
    "generator_spectrum",
    "DEFAULT_LB_RESOLUTION",
]

#: cells per unit-length... per parameter coordinate, keyed by intrinsic dimension
DEFAULT_LB_RESOLUTION = {1: 256, 2: 96}
DET_TOL = 1e-12


class ChartDegeneracyError(ValueError):
    """The chart metric degenerates at a cell centre."""


def _metric_field(manifold, pts):
    T = manifold.tangents(pts)
    g = np.einsum("nid,njd->nij", T, T)
    return g


def assemble_laplace_beltrami(manifold, resolution) -> DiscreteOperator:
    """Finite-volume ``-Delta_S`` on the cell-centred parameter grid.

    The flux through a face normal to coordinate ``a`` is
    ``sqrt(det g) g^{aa} du/du^a`` evaluated at the face centre; off-diagonal
    metric terms enter through a corner-centred energy.  Non-periodic chart
    edges carry no flux, which is exact where the chart collapses to a point
    (``sqrt(det g) = 0``, e.g. the sphere's poles).
    """
    k = manifold.k
    n = np.broadcast_to(np.asarray(resolution, int), (k,)).copy()
    if k == 2 and np.isscalar(resolution) and not manifold.periodic[0] and manifold.periodic[1]:
        n[1] = 2 * n[0]  # keep colatitude/longitude cells square on the sphere
    lower = np.array(manifold.lower, float)
    upper = np.array(manifold.upper, float)
    h = (upper - lower) / n
    axes = [lo + hh * (np.arange(m) + 0.5) for lo, hh, m in zip(lower, h, n)]
    mesh = np.meshgrid(*axes, indexing="ij")
    centres = np.stack([x.ravel() for x in mesh], axis=-1)
    g = _metric_field(manifold, centres)
    det = np.linalg.det(g)
    bad = np.flatnonzero(det <= DET_TOL)
    if bad.size:
        raise ChartDegeneracyError(f"det g = {det[bad[0]]:.3e} at chart cell centre {centres[bad[0]].tolist()}")
    cell = float(np.prod(h))
    mass = np.sqrt(det) * cell
    idx = np.arange(int(np.prod(n))).reshape(tuple(n))
    rows, cols, vals = [], [], []

    def add(i, j, v):
        rows.append(i.ravel())
        cols.append(j.ravel())
        vals.append(np.broadcast_to(v, i.shape).ravel())

    for a in range(k):
        if manifold.periodic[a]:
            face_pos = lower[a] + h[a] * (np.arange(n[a]) + 1.0)
            left = idx
            right = np.roll(idx, -1, axis=a)
        else:
            face_pos = lower[a] + h[a] * np.arange(1, n[a])
            left = np.take(idx, range(n[a] - 1), axis=a)
            right = np.take(idx, range(1, n[a]), axis=a)
        f_axes = list(axes)
        f_axes[a] = face_pos
        fm = np.meshgrid(*f_axes, indexing="ij")
        fpts = np.stack([x.ravel() for x in fm], axis=-1)
        gf = _metric_field(manifold, fpts)
        detf = np.clip(np.linalg.det(gf), 0.0, None)
        ginv_aa = np.linalg.inv(gf + np.where(detf <= DET_TOL, 1.0, 0.0)[:, None, None] * np.eye(k))[:, a, a]
        c = np.where(detf > DET_TOL, np.sqrt(detf) * ginv_aa, 0.0) * cell / h[a] ** 2
        c = c.reshape(left.shape)
        add(left, right, -c)
        add(right, left, -c)
        add(left, left, c)
        add(right, right, c)

    if k == 2:
        # corner energy 2 w (D0 u)(D1 u) for the mixed metric term
        per = manifold.periodic
        c0 = np.arange(n[0]) if per[0] else np.arange(n[0] - 1)
        c1 = np.arange(n[1]) if per[1] else np.arange(n[1] - 1)
        I, J = np.meshgrid(c0, c1, indexing="ij")
        cpts = np.stack([(lower[0] + h[0] * (I + 1.0)).ravel(), (lower[1] + h[1] * (J + 1.0)).ravel()], axis=-1)
        gc = _metric_field(manifold, cpts)
        detc = np.linalg.det(gc)
        ok = detc > DET_TOL
        g01 = np.zeros(len(cpts))
        g01[ok] = np.linalg.inv(gc[ok])[:, 0, 1]
        w = (np.sqrt(np.clip(detc, 0, None)) * g01 * cell).reshape(I.shape)
        if np.any(np.abs(w) > 0):
            i1 = (I + 1) % n[0]
            j1 = (J + 1) % n[1]
            quad = [idx[I, J], idx[i1, J], idx[I, j1], idx[i1, j1]]
            a_coef = np.array([-1, 1, -1, 1]) / (2 * h[0])
            b_coef = np.array([-1, -1, 1, 1]) / (2 * h[1])
            for p in range(4):
                for q in range(4):
                    coef = a_coef[p] * b_coef[q] + b_coef[p] * a_coef[q]
                    if coef != 0:
                        add(quad[p], quad[q], w * coef)

    N = int(np.prod(n))
    K = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(N, N)).tocsr()
    s = 1.0 / np.sqrt(mass)
    S = sp.diags(s) @ K @ sp.diags(s)
    S = 0.5 * (S + S.T)
    return DiscreteOperator(
        S.tocsr(), np.log(mass), f"laplace-beltrami {manifold.name} n={n.tolist()}",
        {"h": float(h.max()), "dim": k, "resolution": n.tolist()},
    )


def laplace_beltrami_gap(manifold, resolution=None, m=None, extrapolate=True) -> SpectrumResult:
    """Smallest eigenvalues of ``-Delta_S`` on a catalog manifold.

    With ``extrapolate`` the problem is also solved at doubled resolution and
    the Richardson values (second order) are attached; multiplicities are then
    read off the extrapolated values, where the grid's symmetry breaking has
    been removed to leading order.
    """
    resolution = resolution or DEFAULT_LB_RESOLUTION[manifold.k]
    m = m or (manifold.k + 3)
    coarse = smallest_eigenvalues(assemble_laplace_beltrami(manifold, resolution), m)
    if extrapolate:
        fine = smallest_eigenvalues(assemble_laplace_beltrami(manifold, 2 * np.asarray(resolution)), m)
        coarse.extrapolated = richardson(coarse.eigenvalues, fine.eigenvalues)
    return coarse


def neumann_ball_gap(codim: int, radius: float) -> float:
    """First nonzero Neumann eigenvalue of the ball of ``radius`` in ``R^codim``."""
    if codim == 1:
        return float((np.pi / (2 * radius)) ** 2)
    # first zero of the derivative of the order-1 (spherical) Bessel function
    if codim == 2:
        z = special.jnp_zeros(1, 1)[0]
    elif codim == 3:
        from scipy.optimize import brentq

        z = brentq(lambda x: special.spherical_jn(1, x, derivative=True), 1.0, 3.0)
    else:
        raise NotImplementedError("ball gaps for codimension <= 3")
    return float((z / radius) ** 2)


def tensor_gap(gap_tangential: float, gap_normal: float) -> float:
    """Spectral gap of a product space: the smaller factor gap."""
    if gap_tangential < 0 or gap_normal < 0:
        raise ValueError("gaps must be non-negative")
    return min(gap_tangential, gap_normal)


@dataclass
class TubeStabilityReport:
    """Tube Neumann gaps against the manifold gap.

    ``B`` is the smallest constant with ``|lam(r) - lam_S| <= B r lam_S`` over
    the radii; ``limit`` and ``slope`` come from the straight-line fit
    ``lam(r) = limit + slope * r`` whose coefficient of determination is ``r2``.
    """

    manifold: str
    radii: np.ndarray
    lambdas: np.ndarray
    lambda_ref: float
    B: float
    limit: float
    slope: float
    r2: float
    residuals: np.ndarray
    monotone: bool
    h: np.ndarray
    extrapolated: bool = False
    spectra: list = field(default_factory=list, repr=False)

    def to_dict(self):
        return {
            "manifold": self.manifold,
            "radii": self.radii.tolist(),
            "lambdas": self.lambdas.tolist(),
            "lambda_ref": self.lambda_ref,
            "B": self.B,
            "limit": self.limit,
            "slope": self.slope,
            "r2": self.r2,
            "residuals": self.residuals.tolist(),
            "monotone": self.monotone,
            "h": self.h.tolist(),
        }


def tube_stability_report(manifold, radii, lambda_ref=None, cells_across=12, richardson_levels=False,
                          m=None) -> TubeStabilityReport:
    """Neumann gaps of tubes ``T(r)`` on cut-cell grids with ``h = r / cells_across``.

    Parameters
    ----------
    manifold : ChartedManifold
    radii : sequence of float
        Must all be below the reach.
    lambda_ref : float, optional
        Manifold gap; computed by :func:`laplace_beltrami_gap` when omitted.
    richardson_levels : bool
        Also solve at ``h / 2`` and use the extrapolated gap.
    """
    radii = np.asarray(sorted(radii, reverse=True), float)
    reach = manifold.reach if manifold.reach is not None else np.inf
    if np.any(radii > reach):
        raise ValueError(f"radii {radii.tolist()} exceed the reach {reach}")
    if lambda_ref is None:
        lb = laplace_beltrami_gap(manifold)
        lambda_ref = float(lb.extrapolated[1])
    m = m or (manifold.k + 2)
    lams, hs, spectra = [], [], []
    for r in radii:
        h = r / cells_across
        spec = smallest_eigenvalues(assemble_neumann_laplacian(GridDomain.tube(manifold, r, h)), m)
        lam = spec.lambda1
        if richardson_levels:
            fine = smallest_eigenvalues(assemble_neumann_laplacian(GridDomain.tube(manifold, r, h / 2)), m)
            lam = float(richardson(lam, fine.lambda1))
        lams.append(lam)
        hs.append(h)
        spectra.append(spec)
    lams = np.array(lams)
    dev = np.abs(lams - lambda_ref)
    B = float(np.max(dev / (radii * lambda_ref)))
    A = np.column_stack([np.ones_like(radii), radii])
    (limit, slope), *_ = np.linalg.lstsq(A, lams, rcond=None)
    pred = A @ np.array([limit, slope])
    ss = np.sum((lams - lams.mean()) ** 2)
    r2 = float(1 - np.sum((lams - pred) ** 2) / ss) if ss > 0 else 1.0
    # deviations should shrink with the radius, up to a second-order grid error
    grid_err = (np.array(hs) / radii.max()) ** 2 * lambda_ref * 1e-2
    monotone = bool(np.all(np.diff(dev) <= grid_err[1:]))
    return TubeStabilityReport(
        manifold.name, radii, lams, float(lambda_ref), B, float(limit), float(slope), r2,
        lams - pred, monotone, np.array(hs), richardson_levels, spectra,
    )


def generator_spectrum(field, eps, h, m=3, domain=None) -> SpectrumResult:
    """Smallest eigenvalues of the discretized generator; ``rho = gap / eps`` on the result."""
    op = assemble_weighted_generator(field, eps, domain=domain, h=h)
    return smallest_eigenvalues(op, m)
