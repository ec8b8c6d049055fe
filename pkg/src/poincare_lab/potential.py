"""Test potentials and probe-based certificates of their structural assumptions.

Every catalog potential is stored with its global minimum shifted to zero.
Evaluators accept a single point of shape ``(d,)`` or a batch ``(n, d)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage, optimize

__all__ = [
    "ScalarField",
    "RadialPotential",
    "TorusPotential",
    "RegionSpec",
    "ProbePlan",
    "PLCertificate",
    "ErrorBoundCertificate",
    "GrowthCertificate",
    "CriticalPoint",
    "CriticalPointReport",
    "CertificateError",
    "eval_bundle",
    "certify_pl",
    "certify_error_bound",
    "certify_growth",
    "locate_critical_points",
    "connectivity_probe",
    "get_potential",
    "POTENTIALS",
]

STATIONARY_TOL = 1e-8
EXCESS_SKIP = 1e-12


class CertificateError(ValueError):
    """Raised when a certificate cannot be produced from the probes."""


def _as_points(x, d):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    if pts.shape[-1] != d:
        raise ValueError(f"expected points with {d} coordinates, got shape {x.shape}")
    return pts, single


class ScalarField:
    """Potential ``V`` on ``R^d`` with analytic derivatives.

    Subclasses implement ``_value``, ``_gradient`` and ``_hessian`` on
    batches of shape ``(n, d)``; the public methods handle single points.
    """

    name: str = "field"
    dim: int = 1
    vmin: float = 0.0
    #: radius of a ball containing the optimal set
    optimal_radius: float = 1.0

    def value(self, x):
        pts, single = _as_points(x, self.dim)
        out = self._value(pts)
        return out[0] if single else out

    def gradient(self, x):
        pts, single = _as_points(x, self.dim)
        out = self._gradient(pts)
        return out[0] if single else out

    def hessian(self, x):
        pts, single = _as_points(x, self.dim)
        out = self._hessian(pts)
        return out[0] if single else out

    def hessian_apply(self, x, v):
        H = self.hessian(x)
        return np.einsum("...ij,...j->...i", H, np.asarray(v, dtype=float))

    def laplacian(self, x):
        H = self.hessian(x)
        return np.trace(H, axis1=-2, axis2=-1)

    def distance_to_optimal(self, x):
        """Distance from ``x`` to the optimal set.

        The generic fallback follows the gradient flow to a minimizer, so it
        returns an upper bound on the true distance.
        """
        pts, single = _as_points(x, self.dim)
        out = np.array([_flow_distance(self, p) for p in pts])
        return out[0] if single else out

    def __repr__(self):
        return f"{type(self).__name__}(name={self.name!r}, dim={self.dim})"


def _flow_distance(field, x0, tol=1e-10, maxiter=2000):
    res = optimize.minimize(
        lambda z: float(field.value(z)),
        x0,
        jac=lambda z: field.gradient(z),
        method="L-BFGS-B",
        options={"gtol": tol, "maxiter": maxiter},
    )
    return float(np.linalg.norm(res.x - x0))


class RadialPotential(ScalarField):
    """``V(x) = f(|x|)`` for a radial profile ``f``.

    ``fp_over_r`` is ``f'(r)/r`` written so that it is finite at ``r = 0``.
    ``optimal_distance`` maps ``r`` to the distance to the optimal set.
    """

    def __init__(
        self,
        name: str,
        dim: int,
        f: Callable,
        fp_over_r: Callable,
        fpp: Callable,
        optimal_distance: Callable,
        optimal_radius: float = 1.0,
    ):
        self.name = name
        self.dim = dim
        self._f = f
        self._fp_over_r = fp_over_r
        self._fpp = fpp
        self._dist = optimal_distance
        self.optimal_radius = optimal_radius

    def _value(self, pts):
        return self._f(np.linalg.norm(pts, axis=-1))

    def _gradient(self, pts):
        r = np.linalg.norm(pts, axis=-1)
        return self._fp_over_r(r)[:, None] * pts

    def _hessian(self, pts):
        r = np.linalg.norm(pts, axis=-1)
        a = self._fp_over_r(r)
        b = self._fpp(r)
        safe = np.where(r > 0, r, 1.0)
        xhat = pts / safe[:, None]
        outer = xhat[:, :, None] * xhat[:, None, :]
        eye = np.eye(self.dim)[None]
        H = a[:, None, None] * eye + (b - a)[:, None, None] * outer
        return np.where((r > 0)[:, None, None], H, b[:, None, None] * eye)

    def laplacian(self, x):
        pts, single = _as_points(x, self.dim)
        r = np.linalg.norm(pts, axis=-1)
        out = self._fpp(r) + (self.dim - 1) * self._fp_over_r(r)
        return out[0] if single else out

    def distance_to_optimal(self, x):
        pts, single = _as_points(x, self.dim)
        out = self._dist(np.linalg.norm(pts, axis=-1))
        return out[0] if single else out


class TorusPotential(ScalarField):
    """``V = F^2 / k`` where ``F`` is the quartic implicit equation of a torus.

    The optimal set is the torus with core radius ``R`` and tube radius ``a``.
    This potential has a saddle at the origin and a degenerate circle of
    maxima on the core, so it fails the no-saddle assumption; it is kept to
    exercise the failure paths of the certificates.
    """

    def __init__(self, R=2.0, a=0.5):
        self.name = "torus3d"
        self.dim = 3
        self.R, self.a = float(R), float(a)
        self.optimal_radius = self.R + self.a
        self._k = 128.0 * self.R**4 * self.a**2

    def _F(self, pts):
        s = np.sum(pts**2, axis=-1)
        rho2 = pts[:, 0] ** 2 + pts[:, 1] ** 2
        return (s + self.R**2 - self.a**2) ** 2 - 4 * self.R**2 * rho2, s

    def _gradF(self, pts, s):
        g = 4 * (s + self.R**2 - self.a**2)[:, None] * pts
        g[:, :2] -= 8 * self.R**2 * pts[:, :2]
        return g

    def _value(self, pts):
        F, _ = self._F(pts)
        return F**2 / self._k

    def _gradient(self, pts):
        F, s = self._F(pts)
        return 2 * F[:, None] * self._gradF(pts, s) / self._k

    def _hessian(self, pts):
        F, s = self._F(pts)
        gF = self._gradF(pts, s)
        HF = 8 * pts[:, :, None] * pts[:, None, :]
        HF += 4 * (s + self.R**2 - self.a**2)[:, None, None] * np.eye(3)[None]
        HF -= 8 * self.R**2 * np.diag([1.0, 1.0, 0.0])[None]
        return 2 * (gF[:, :, None] * gF[:, None, :] + F[:, None, None] * HF) / self._k

    def distance_to_optimal(self, x):
        pts, single = _as_points(x, 3)
        rho = np.hypot(pts[:, 0], pts[:, 1])
        out = np.abs(np.hypot(rho - self.R, pts[:, 2]) - self.a)
        return out[0] if single else out


def _circle_family(name, dim):
    # r^3/3 - r^2/2 + 1/6, optimal set |x| = 1
    return RadialPotential(
        name,
        dim,
        f=lambda r: r**3 / 3 - r**2 / 2 + 1.0 / 6,
        fp_over_r=lambda r: r - 1.0,
        fpp=lambda r: 2 * r - 1.0,
        optimal_distance=lambda r: np.abs(r - 1.0),
    )


def _quadratic(dim=2):
    return RadialPotential(
        "quadratic" if dim == 2 else f"quadratic{dim}d",
        dim,
        f=lambda r: r**2 / 2,
        # scalar-safe forms so the profiles also compile for the SDE kernel
        fp_over_r=lambda r: 0.0 * r + 1.0,
        fpp=lambda r: 0.0 * r + 1.0,
        optimal_distance=lambda r: np.abs(r),
        optimal_radius=0.0,
    )


def _quartic(dim=2):
    return RadialPotential(
        "quartic",
        dim,
        f=lambda r: r**4 / 4,
        fp_over_r=lambda r: r**2,
        fpp=lambda r: 3 * r**2,
        optimal_distance=lambda r: np.abs(r),
        optimal_radius=0.0,
    )


def _double_well():
    return RadialPotential(
        "doublewell1d",
        1,
        f=lambda r: (r**2 - 1) ** 2 / 4,
        fp_over_r=lambda r: r**2 - 1,
        fpp=lambda r: 3 * r**2 - 1,
        optimal_distance=lambda r: np.abs(r - 1.0),
    )


def _soft_ring():
    # (r^2 - 1)^2 / 4 in the plane: flat curvature profile keeps 4LC small
    return RadialPotential(
        "ring2d_soft",
        2,
        f=lambda r: (r**2 - 1) ** 2 / 4,
        fp_over_r=lambda r: r**2 - 1,
        fpp=lambda r: 3 * r**2 - 1,
        optimal_distance=lambda r: np.abs(r - 1.0),
    )


POTENTIALS = {
    "circle2d": lambda: _circle_family("circle2d", 2),
    "sphere3d": lambda: _circle_family("sphere3d", 3),
    "quadratic": lambda: _quadratic(2),
    "quadratic1d": lambda: _quadratic(1),
    "quartic": lambda: _quartic(2),
    "doublewell1d": _double_well,
    "ring2d_soft": _soft_ring,
    "torus3d": TorusPotential,
}


def get_potential(name: str) -> ScalarField:
    """Catalog lookup by name."""
    try:
        return POTENTIALS[name]()
    except KeyError:
        raise KeyError(f"unknown potential {name!r}; choose from {sorted(POTENTIALS)}") from None


def eval_bundle(field: ScalarField, x):
    """Return ``(value, gradient, laplacian)`` at a finite point ``x``."""
    x = np.asarray(x, dtype=float)
    if not np.all(np.isfinite(x)):
        raise ValueError(f"non-finite evaluation point {x!r}")
    return field.value(x), field.gradient(x), field.laplacian(x)


# --------------------------------------------------------------------------
# regions and probes


def _sphere_directions(dim, n):
    if dim == 1:
        return np.array([[-1.0], [1.0]])
    if dim == 2:
        t = 2 * np.pi * np.arange(n) / n
        return np.column_stack([np.cos(t), np.sin(t)])
    # Fibonacci lattice
    k = np.arange(n) + 0.5
    z = 1 - 2 * k / n
    phi = np.pi * (1 + 5**0.5) * k
    s = np.sqrt(1 - z**2)
    dirs = np.column_stack([s * np.cos(phi), s * np.sin(phi), z])
    if dim == 3:
        return dirs
    raise ValueError("directions only implemented for d <= 3")


@dataclass(frozen=True)
class RegionSpec:
    """Ball, annulus, box, or a base region with excluded sub-regions.

    For ``kind="complement-intersection"`` the region is ``base`` minus the
    union of ``excluded``.  Radii are in ambient coordinate units.
    """

    kind: str
    dim: int
    center: tuple = ()
    r_inner: float = 0.0
    r_outer: float = np.inf
    lower: tuple = ()
    upper: tuple = ()
    base: "RegionSpec | None" = None
    excluded: tuple = ()

    def __post_init__(self):
        if self.kind not in ("ball", "annulus", "box", "complement-intersection"):
            raise ValueError(f"unknown region kind {self.kind!r}")
        if self.kind in ("ball", "annulus") and not self.r_outer > self.r_inner:
            raise ValueError("region has zero volume: r_outer must exceed r_inner")
        if self.kind == "box" and not np.all(np.asarray(self.upper) > np.asarray(self.lower)):
            raise ValueError("region has zero volume: box upper must exceed lower")
        if self.kind == "complement-intersection" and self.base is None:
            raise ValueError("complement-intersection region needs a base region")

    @classmethod
    def ball(cls, radius, dim, center=None):
        c = tuple(np.zeros(dim)) if center is None else tuple(center)
        return cls("ball", dim, center=c, r_outer=float(radius))

    @classmethod
    def annulus(cls, r_inner, r_outer, dim, center=None):
        c = tuple(np.zeros(dim)) if center is None else tuple(center)
        return cls("annulus", dim, center=c, r_inner=float(r_inner), r_outer=float(r_outer))

    @classmethod
    def box(cls, lower, upper):
        lower = tuple(float(v) for v in np.atleast_1d(lower))
        upper = tuple(float(v) for v in np.atleast_1d(upper))
        return cls("box", len(lower), lower=lower, upper=upper)

    @classmethod
    def minus(cls, base, *excluded):
        return cls("complement-intersection", base.dim, base=base, excluded=tuple(excluded))

    def contains(self, x):
        pts = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind in ("ball", "annulus"):
            r = np.linalg.norm(pts - np.asarray(self.center), axis=-1)
            return (r >= self.r_inner) & (r <= self.r_outer)
        if self.kind == "box":
            return np.all((pts >= np.asarray(self.lower)) & (pts <= np.asarray(self.upper)), axis=-1)
        inside = self.base.contains(pts)
        for ex in self.excluded:
            inside &= ~ex.interior(pts)
        return inside

    def interior(self, x):
        """Open version of ``contains``: boundary points are not interior."""
        pts = np.atleast_2d(np.asarray(x, dtype=float))
        if self.kind in ("ball", "annulus"):
            r = np.linalg.norm(pts - np.asarray(self.center), axis=-1)
            lo = (r > self.r_inner) if self.r_inner > 0 else np.ones(len(r), bool)
            return lo & (r < self.r_outer)
        if self.kind == "box":
            return np.all((pts > np.asarray(self.lower)) & (pts < np.asarray(self.upper)), axis=-1)
        return self.contains(pts)

    def bounding_box(self):
        if self.kind in ("ball", "annulus"):
            c = np.asarray(self.center)
            return c - self.r_outer, c + self.r_outer
        if self.kind == "box":
            return np.asarray(self.lower), np.asarray(self.upper)
        return self.base.bounding_box()

    def boundary_samples(self, n=256):
        """Points on the boundary, used to attain infima at region edges."""
        if self.kind in ("ball", "annulus"):
            dirs = _sphere_directions(self.dim, n)
            c = np.asarray(self.center)
            radii = [r for r in (self.r_inner, self.r_outer) if 0 < r < np.inf]
            return np.vstack([c + r * dirs for r in radii]) if radii else np.empty((0, self.dim))
        if self.kind == "box":
            lo, hi = np.asarray(self.lower), np.asarray(self.upper)
            m = max(2, int(round(n ** (1 / max(self.dim - 1, 1)))))
            faces = []
            for axis in range(self.dim):
                others = [np.linspace(lo[b], hi[b], m) for b in range(self.dim) if b != axis]
                grid = np.meshgrid(*others, indexing="ij") if others else []
                flat = np.column_stack([g.ravel() for g in grid]) if others else np.empty((1, 0))
                for v in (lo[axis], hi[axis]):
                    pts = np.insert(flat, axis, v, axis=1)
                    faces.append(pts)
            return np.vstack(faces)
        pts = [self.base.boundary_samples(n)] + [ex.boundary_samples(n) for ex in self.excluded]
        pts = np.vstack(pts)
        return pts[self.contains(pts)]

    def to_dict(self):
        out = {"kind": self.kind, "dim": self.dim}
        if self.kind in ("ball", "annulus"):
            out.update(center=list(self.center), r_inner=self.r_inner, r_outer=self.r_outer)
        elif self.kind == "box":
            out.update(lower=list(self.lower), upper=list(self.upper))
        else:
            out.update(base=self.base.to_dict(), excluded=[e.to_dict() for e in self.excluded])
        return out


@dataclass(frozen=True)
class ProbePlan:
    """Probe points: a tensor grid over the region's bounding box plus boundary samples."""

    n_per_axis: int = 201
    n_boundary: int = 720

    def points(self, region: RegionSpec):
        lo, hi = region.bounding_box()
        axes = [np.linspace(a, b, self.n_per_axis) for a, b in zip(lo, hi)]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, region.dim)
        pts = np.vstack([grid, region.boundary_samples(self.n_boundary)])
        return pts[region.contains(pts)]

    def refined(self):
        return ProbePlan(2 * self.n_per_axis - 1, 2 * self.n_boundary)


# --------------------------------------------------------------------------
# certificates


@dataclass(frozen=True)
class PLCertificate:
    region: RegionSpec
    nu_hat: float
    worst_point: np.ndarray
    sample_count: int
    region_min: float
    low_confidence: bool = False

    @property
    def passed(self):
        return self.nu_hat > 0

    def to_record(self, potential):
        return {
            "potential": potential,
            "region": self.region.to_dict(),
            "constant_name": "nu",
            "value": self.nu_hat,
            "worst_point": np.asarray(self.worst_point).tolist(),
            "probes": self.sample_count,
            "low_confidence": self.low_confidence,
        }


@dataclass(frozen=True)
class ErrorBoundCertificate:
    region: RegionSpec
    nu_eb_hat: float
    worst_point: np.ndarray
    sample_count: int

    @property
    def passed(self):
        return self.nu_eb_hat > 0

    def to_record(self, potential):
        return {
            "potential": potential,
            "region": self.region.to_dict(),
            "constant_name": "nu_eb",
            "value": self.nu_eb_hat,
            "worst_point": np.asarray(self.worst_point).tolist(),
            "probes": self.sample_count,
        }


@dataclass(frozen=True)
class GrowthCertificate:
    R0: float
    C_g: float
    worst_point: np.ndarray
    sample_count: int
    shell_maxima: np.ndarray
    bounded: bool

    @property
    def passed(self):
        return self.bounded

    def to_record(self, potential):
        return {
            "potential": potential,
            "region": {"kind": "exterior", "R0": self.R0},
            "constant_name": "C_g",
            "value": self.C_g,
            "worst_point": np.asarray(self.worst_point).tolist(),
            "probes": self.sample_count,
            "bounded": self.bounded,
        }


def _region_minimum(field, region, pts, vals):
    i = int(np.argmin(vals))
    best = float(vals[i])
    lo, hi = region.bounding_box()
    res = optimize.minimize(
        lambda z: float(field.value(z)),
        pts[i],
        jac=lambda z: field.gradient(z),
        method="L-BFGS-B",
        bounds=list(zip(lo, hi)),
    )
    refined = float(res.fun)
    if region.contains(res.x)[0] and refined < best:
        # probes missed the minimum by more than the skip tolerance
        return refined, best - refined > 1e-6
    return best, False


def certify_pl(field: ScalarField, region: RegionSpec, probe_plan: ProbePlan | None = None) -> PLCertificate:
    """Smallest ratio ``|grad V|^2 / (V - min_region V)`` over the probes."""
    plan = probe_plan or ProbePlan()
    pts = plan.points(region)
    if len(pts) == 0:
        raise CertificateError("probe plan produced no points inside the region")
    vals = field.value(pts)
    vmin, low_conf = _region_minimum(field, region, pts, vals)
    excess = vals - vmin
    keep = excess > EXCESS_SKIP
    g2 = np.sum(field.gradient(pts[keep]) ** 2, axis=-1)
    ratio = g2 / excess[keep]
    j = int(np.argmin(ratio))
    nu = max(float(ratio[j]), 0.0)
    if nu < 1e-10:
        nu = 0.0
    return PLCertificate(region, nu, pts[keep][j], int(keep.sum()), vmin, low_conf)


def certify_error_bound(field, region, probe_plan=None) -> ErrorBoundCertificate:
    """Smallest ratio ``|grad V| / dist(x, S)`` over probes off the optimal set."""
    plan = probe_plan or ProbePlan()
    pts = plan.points(region)
    dist = np.asarray(field.distance_to_optimal(pts), dtype=float)
    keep = dist > 1e-12
    if not np.any(keep):
        raise CertificateError("every probe lies on the optimal set")
    gn = np.linalg.norm(field.gradient(pts[keep]), axis=-1)
    ratio = gn / dist[keep]
    j = int(np.argmin(ratio))
    return ErrorBoundCertificate(region, float(ratio[j]), pts[keep][j], int(keep.sum()))


def certify_growth(field, R0: float, probe_plan=None, r_max_factor=10.0, n_shells=64) -> GrowthCertificate:
    """Smallest ``C_g`` with ``|Lap V(x)| <= C_g |x|^2`` on probes with ``|x| >= R0``.

    Probes sit on geometric shells out to ``r_max_factor * R0``.  The bound is
    declared unbounded when the per-shell maximum of the ratio keeps growing
    over the outer half of the shells.
    """
    if R0 <= 0:
        raise ValueError("R0 must be positive")
    plan = probe_plan or ProbePlan()
    radii = R0 * np.geomspace(1.0, r_max_factor, n_shells)
    dirs = _sphere_directions(field.dim, max(8, plan.n_boundary // 4))
    pts = (radii[:, None, None] * dirs[None]).reshape(-1, field.dim)
    ratio = np.abs(field.laplacian(pts)) / np.sum(pts**2, axis=-1)
    shell_max = ratio.reshape(n_shells, -1).max(axis=1)
    outer = shell_max[n_shells // 2 :]
    diverging = bool(np.all(np.diff(outer) > 0) and outer[-1] > 2 * outer[0])
    j = int(np.argmax(ratio))
    return GrowthCertificate(float(R0), float(ratio[j]), pts[j], len(pts), shell_max, not diverging)


# --------------------------------------------------------------------------
# critical points and connectivity


@dataclass(frozen=True)
class CriticalPoint:
    location: np.ndarray
    grad_norm: float
    kind: str
    eig_min: float
    eig_max: float


@dataclass(frozen=True)
class CriticalPointReport:
    points: list
    g0: float
    g0_point: np.ndarray
    region: RegionSpec

    def of_kind(self, kind):
        return [p for p in self.points if p.kind == kind]


def _classify(eigs, on_optimal, tol):
    if np.all(eigs > tol):
        return "min"
    if np.all(eigs < -tol):
        return "max"
    if eigs.min() < -tol and eigs.max() > tol:
        return "saddle"
    # flat directions along the optimal manifold are expected
    return "min" if on_optimal else "degenerate"


def locate_critical_points(
    field: ScalarField,
    region: RegionSpec,
    n_per_axis: int = 121,
    excluded: Sequence[RegionSpec] = (),
    search_excluded: Sequence[RegionSpec] | None = None,
    eig_tol: float = 1e-6,
    stationary_tol: float = STATIONARY_TOL,
) -> CriticalPointReport:
    """Find and classify critical points of ``V`` in ``region``.

    Candidates are grid-local minima of ``|grad V|``; each is refined by
    minimizing ``|grad V|^2`` and kept when the refined gradient norm is
    below ``stationary_tol``.  The search skips ``search_excluded``
    (default: ``excluded``), typically a neighborhood of a continuum of
    minima.  ``g0`` is the smallest gradient norm over grid and boundary
    probes of the region with every ``excluded`` set removed.
    """
    d = field.dim
    lo, hi = region.bounding_box()
    axes = [np.linspace(a, b, n_per_axis) for a, b in zip(lo, hi)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    flat = grid.reshape(-1, d)
    gnorm = np.linalg.norm(field.gradient(flat), axis=-1).reshape(grid.shape[:-1])

    trimmed = RegionSpec.minus(region, *excluded) if excluded else region
    inside = trimmed.contains(flat).reshape(gnorm.shape)
    skip = excluded if search_excluded is None else search_excluded
    searched = RegionSpec.minus(region, *skip) if skip else region

    local_min = gnorm == ndimage.minimum_filter(gnorm, size=3, mode="nearest")
    cand = flat[(local_min & searched.contains(flat).reshape(gnorm.shape)).ravel()]

    found = []
    for x0 in cand:
        res = optimize.minimize(
            lambda z: 0.5 * float(np.sum(field.gradient(z) ** 2)),
            x0,
            jac=lambda z: field.hessian(z) @ field.gradient(z),
            method="BFGS",
            options={"gtol": 1e-14, "maxiter": 500},
        )
        x = res.x
        gn = float(np.linalg.norm(field.gradient(x)))
        if gn > stationary_tol:
            # Newton polish from the BFGS point
            for _ in range(20):
                H = field.hessian(x)
                try:
                    x = x - np.linalg.solve(H, field.gradient(x))
                except np.linalg.LinAlgError:
                    break
                gn = float(np.linalg.norm(field.gradient(x)))
                if gn <= stationary_tol:
                    break
        if gn > stationary_tol or not searched.contains(x)[0]:
            continue
        if any(np.linalg.norm(x - p.location) < 1e-6 for p in found):
            continue
        eigs = np.linalg.eigvalsh(field.hessian(x))
        on_opt = bool(field.distance_to_optimal(x) < 1e-6)
        found.append(CriticalPoint(x, gn, _classify(eigs, on_opt, eig_tol), float(eigs.min()), float(eigs.max())))

    probes = np.vstack([flat[inside.ravel()], trimmed.boundary_samples(720)])
    g = np.linalg.norm(field.gradient(probes), axis=-1)
    j = int(np.argmin(g))
    return CriticalPointReport(found, float(g[j]), probes[j], trimmed)


def connectivity_probe(field: ScalarField, level: float, bounds=None, n_per_axis: int = 401) -> int:
    """Number of face-connected components of the grid sublevel set ``{V <= level}``."""
    if level <= field.vmin:
        raise ValueError("level must exceed the global minimum")
    if bounds is None:
        R = 2.0 * max(field.optimal_radius, 1.0)
        bounds = (-R * np.ones(field.dim), R * np.ones(field.dim))
    lo, hi = (np.asarray(b, dtype=float) for b in bounds)
    axes = [np.linspace(a, b, n_per_axis) for a, b in zip(lo, hi)]
    grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    sub = field.value(grid.reshape(-1, field.dim)).reshape(grid.shape[:-1]) <= level
    _, count = ndimage.label(sub)
    return int(count)
