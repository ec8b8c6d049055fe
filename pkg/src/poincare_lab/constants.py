"""Explicit constants of the Lyapunov + perturbation + tube-stability argument.

Every quantity that can underflow (``C_P`` is about ``e^{-228}`` for the
circle potential) is carried as a natural logarithm; ``log10`` helpers are
provided for reporting.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .potential import (
    CertificateError,
    ProbePlan,
    RegionSpec,
    ScalarField,
    certify_error_bound,
    certify_growth,
    certify_pl,
    locate_critical_points,
)

__all__ = [
    "LedgerRegions",
    "ConstantsLedger",
    "LedgerError",
    "ThresholdError",
    "BoundRefused",
    "SigmaB",
    "LyapunovCheckReport",
    "FinalBound",
    "LEDGER_REGIONS",
    "ledger_regions",
    "build_ledger",
    "sigma_b",
    "epsilon_bounds",
    "epsilon_threshold",
    "verify_lyapunov",
    "combine_lyapunov_pi",
    "holley_stroock",
    "log_holley_stroock",
    "tube_oscillation",
    "final_bound",
    "chain_bound",
]

LN10 = np.log(10.0)


class LedgerError(ValueError):
    """A structural assumption failed its certificate."""


class ThresholdError(ValueError):
    """The temperature exceeds an admissibility threshold."""


class BoundRefused(ValueError):
    """The bound's preconditions do not hold, so no bound is emitted."""


# --------------------------------------------------------------------------
# regions and ledger


@dataclass(frozen=True)
class LedgerRegions:
    """Declared neighborhoods that make the existence statements concrete.

    ``n_s`` is N(S) with half-width ``delta0``; ``n_x`` is N(X) with radius
    ``R1``; ``R0`` bounds the optimal set and starts the error-bound region.
    ``critical_box`` is searched for critical points (skipping
    ``search_excluded``) and ``g0`` is taken over it minus ``g0_excluded``.
    """

    R0: float
    delta0: float
    R1: float
    n_s: RegionSpec
    n_x: RegionSpec
    critical_box: RegionSpec
    g0_excluded: tuple
    search_excluded: tuple
    k: int
    optimal_set: str = ""


def _circle_regions(dim=2):
    return LedgerRegions(
        R0=2.0,
        delta0=0.5,
        R1=0.25,
        n_s=RegionSpec.annulus(0.5, 1.5, dim),
        n_x=RegionSpec.ball(0.25, dim),
        critical_box=RegionSpec.box([-3.0] * dim, [3.0] * dim),
        g0_excluded=(RegionSpec.annulus(0.75, 1.25, dim), RegionSpec.ball(0.25, dim)),
        search_excluded=(RegionSpec.annulus(0.75, 1.25, dim),),
        k=dim - 1,
        optimal_set="circle" if dim == 2 else "sphere",
    )


def _soft_ring_regions(delta0=0.03):
    return LedgerRegions(
        R0=1.0,
        delta0=delta0,
        R1=0.5,
        n_s=RegionSpec.annulus(1 - delta0, 1 + delta0, 2),
        n_x=RegionSpec.ball(0.5, 2),
        critical_box=RegionSpec.box([-2.0, -2.0], [2.0, 2.0]),
        g0_excluded=(RegionSpec.annulus(1 - delta0, 1 + delta0, 2), RegionSpec.ball(0.5, 2)),
        search_excluded=(RegionSpec.annulus(1 - delta0, 1 + delta0, 2),),
        k=1,
        optimal_set="circle",
    )


def _quadratic_regions(dim=2):
    return LedgerRegions(
        R0=2.0,
        delta0=0.4,
        R1=0.0,
        n_s=RegionSpec.ball(0.4, dim),
        n_x=RegionSpec.ball(0.4, dim),
        critical_box=RegionSpec.box([-4.0] * dim, [4.0] * dim),
        g0_excluded=(RegionSpec.ball(0.4, dim),),
        search_excluded=(),
        k=0,
        optimal_set="point",
    )


LEDGER_REGIONS = {
    "circle2d": _circle_regions,
    "ring2d_soft": _soft_ring_regions,
    "quadratic": _quadratic_regions,
}


def ledger_regions(name: str, **kwargs) -> LedgerRegions:
    try:
        return LEDGER_REGIONS[name](**kwargs)
    except KeyError:
        raise KeyError(f"no declared ledger regions for {name!r}; choose from {sorted(LEDGER_REGIONS)}") from None


@dataclass(frozen=True)
class ConstantsLedger:
    """Certified inputs and the constants derived from them.

    ``mu_minus`` is the curvature at the local maxima (smallest
    ``-lambda_max(Hess V)`` over the maxima found); ``mu_minus_region`` is the
    weaker bound certified over all of N(X) and is informational.
    """

    nu: float
    nu_eb: float
    C_g: float
    R0: float
    R1: float
    delta0: float
    g0: float
    L: float
    M_Delta: float
    mu_minus: float
    d: int
    k: int
    potential: str = ""
    mu_minus_region: float | None = None
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        for name in ("nu", "nu_eb", "C_g", "R0", "delta0", "g0", "L", "M_Delta", "mu_minus"):
            v = getattr(self, name)
            # an infinite error-bound constant is allowed: it switches off the outer branch
            if not (v > 0 and (np.isfinite(v) or name == "nu_eb")):
                raise LedgerError(f"ledger input {name} = {v} must be positive and finite")
        if self.M_Delta < self.d * self.mu_minus:
            object.__setattr__(self, "mu_minus", self.M_Delta / self.d)

    @property
    def C(self) -> float:
        return 4 * self.M_Delta / self.nu**2

    @property
    def C_bar(self) -> float:
        return 4 * self.L * self.C

    @property
    def prefactor(self) -> float:
        """``d mu- / (d mu- + M_Delta)``."""
        dm = self.d * self.mu_minus
        return dm / (dm + self.M_Delta)

    @property
    def log_C_P(self) -> float:
        return np.log(0.25 * self.prefactor) - self.C_bar

    @property
    def log10_C_P(self) -> float:
        return self.log_C_P / LN10

    @property
    def C_P(self) -> float:
        return float(np.exp(self.log_C_P))

    @property
    def eps_star(self) -> float:
        """Temperature where the two branches of sigma coincide."""
        return self.nu_eb**2 * self.R0**2 / (64 * self.d * self.mu_minus)

    @property
    def eps_max(self) -> float:
        return epsilon_threshold(self)

    def tube_radius(self, eps) -> float:
        """Radius ``sqrt(C eps)`` of the set U."""
        return float(np.sqrt(self.C * eps))

    def to_dict(self):
        base = {k: v for k, v in asdict(self).items() if k != "provenance"}
        base.update(
            C=self.C,
            C_bar=self.C_bar,
            log_C_P=self.log_C_P,
            log10_C_P=self.log10_C_P,
            eps_star=self.eps_star,
            eps_bounds=epsilon_bounds(self),
            eps_max=self.eps_max,
            formulas=FORMULAS,
            provenance=self.provenance,
        )
        return base

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), default=_json_default, **kw)


FORMULAS = {
    "C": "4 M_Delta / nu^2",
    "C_bar": "4 L C",
    "C_P": "(1/4) d mu- / (d mu- + M_Delta) exp(-4 L C)",
    "sigma": "min{nu_eb^2 R0^2 / (128 eps^2), d mu- / (2 eps)}",
    "b": "sigma + M_Delta / (2 eps)",
    "eps_max": "min{nu_eb^2 / (64 C_g), delta0^2 / C, g0^2 / (4 M_Delta)}",
    "eps_star": "nu_eb^2 R0^2 / (64 d mu-)",
}


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.bool_):
        return bool(o)
    raise TypeError(type(o))


def _hessian_eigs(field: ScalarField, pts):
    return np.linalg.eigvalsh(field.hessian(pts))


def build_ledger(field: ScalarField, regions: LedgerRegions, probe_plan: ProbePlan | None = None) -> ConstantsLedger:
    """Certify every structural input on the declared regions and assemble the ledger.

    Raises
    ------
    LedgerError
        Naming the assumption whose certificate failed.
    """
    plan = probe_plan or ProbePlan()
    d = field.dim
    prov = {}

    pl = certify_pl(field, regions.n_s, plan)
    if not pl.passed:
        raise LedgerError(f"local PL condition fails on N(S) (nu_hat = {pl.nu_hat}) at {pl.worst_point}")
    prov["nu"] = pl.to_record(field.name)

    outer = RegionSpec.annulus(regions.R0, 10 * regions.R0, d)
    try:
        eb = certify_error_bound(field, outer, plan)
    except CertificateError as err:
        raise LedgerError(f"error bound beyond R0 cannot be certified: {err}") from err
    if not eb.passed:
        raise LedgerError(f"error bound fails beyond R0 (nu_eb_hat = {eb.nu_eb_hat})")
    prov["nu_eb"] = eb.to_record(field.name)

    gr = certify_growth(field, regions.R0, plan)
    if not gr.passed:
        raise LedgerError("Laplacian growth beyond R0 is not polynomially bounded")
    prov["C_g"] = gr.to_record(field.name)

    cp = locate_critical_points(
        field, regions.critical_box, excluded=regions.g0_excluded, search_excluded=regions.search_excluded
    )
    bad = [p for p in cp.points if p.kind in ("saddle", "degenerate")]
    if bad:
        raise LedgerError(f"critical point of kind {bad[0].kind} at {np.round(bad[0].location, 6).tolist()} "
                          "violates the no-saddle assumption")
    if not cp.g0 > 0:
        raise LedgerError("gradient vanishes outside N(S) and N(X): g0 = 0")
    prov["g0"] = {"value": cp.g0, "region": regions.critical_box.to_dict(),
                  "excluded": [r.to_dict() for r in regions.g0_excluded]}

    ns_pts = plan.points(regions.n_s)
    L = float(np.max(np.abs(_hessian_eigs(field, ns_pts))))
    prov["L"] = {"value": L, "region": regions.n_s.to_dict(), "probes": len(ns_pts),
                 "formula": "max |eig Hess V| over N(S)"}

    ball = RegionSpec.ball(regions.R0, d)
    ball_pts = plan.points(ball)
    M = float(np.max(np.abs(field.laplacian(ball_pts))))
    prov["M_Delta"] = {"value": M, "region": ball.to_dict(), "probes": len(ball_pts),
                       "formula": "max |Lap V| over |x| <= R0"}

    maxima = cp.of_kind("max")
    if maxima:
        mu = float(min(-p.eig_max for p in maxima))
        prov["mu_minus"] = {"value": mu, "formula": "min over local maxima of -lambda_max(Hess V)",
                            "points": [np.asarray(p.location).tolist() for p in maxima]}
        nx_pts = plan.points(regions.n_x)
        mu_region = float(-np.max(_hessian_eigs(field, nx_pts)[:, -1]))
    else:
        mu = M / d
        mu_region = None
        prov["mu_minus"] = {"value": mu, "formula": "no local maxima: mu- := M_Delta / d"}

    return ConstantsLedger(
        nu=pl.nu_hat, nu_eb=eb.nu_eb_hat, C_g=gr.C_g, R0=regions.R0, R1=regions.R1, delta0=regions.delta0,
        g0=float(cp.g0), L=L, M_Delta=M, mu_minus=mu, d=d, k=regions.k, potential=field.name,
        mu_minus_region=mu_region, provenance=prov,
    )


# --------------------------------------------------------------------------
# thresholds and the Lyapunov pair


def epsilon_bounds(ledger: ConstantsLedger, reach: float | None = None, B: float | None = None) -> dict:
    """Every temperature bound by name; geometric ones only when supplied."""
    out = {
        "nu_eb^2/(64 C_g)": ledger.nu_eb**2 / (64 * ledger.C_g),
        "delta0^2/C": ledger.delta0**2 / ledger.C,
        "g0^2/(4 M_Delta)": ledger.g0**2 / (4 * ledger.M_Delta),
    }
    if reach is not None:
        out["reach"] = float(reach)
        # U = S^{sqrt(C eps)} must itself be a tubular neighborhood
        out["reach^2/C"] = float(reach) ** 2 / ledger.C
    if B is not None and B > 0:
        out["(1/C)(1/(2B))^2"] = (1.0 / (2 * B)) ** 2 / ledger.C
    return out


def epsilon_threshold(ledger: ConstantsLedger, reach: float | None = None, B: float | None = None) -> float:
    return float(min(epsilon_bounds(ledger, reach, B).values()))


def _check_eps(ledger, eps, reach=None, B=None):
    if not eps > 0:
        raise ThresholdError(f"eps must be positive, got {eps}")
    bounds = epsilon_bounds(ledger, reach, B)
    name = min(bounds, key=bounds.get)
    if eps > bounds[name] * (1 + 1e-12):
        raise ThresholdError(f"eps = {eps:g} exceeds {name} = {bounds[name]:.6g}")


@dataclass(frozen=True)
class SigmaB:
    sigma: float
    b: float
    branch: str

    def __iter__(self):
        return iter((self.sigma, self.b))


def sigma_b(ledger: ConstantsLedger, eps: float, check=True) -> SigmaB:
    """Lyapunov constants; ``branch`` names the active term of the minimum."""
    if check:
        _check_eps(ledger, eps)
    outer = np.float64(ledger.nu_eb) ** 2 * ledger.R0**2 / (128 * eps**2)
    inner = ledger.d * ledger.mu_minus / (2 * eps)
    if outer < inner:
        sigma, branch = outer, "outer: nu_eb^2 R0^2 / (128 eps^2)"
    else:
        sigma, branch = inner, "curvature: d mu- / (2 eps)"
    return SigmaB(float(sigma), float(sigma + ledger.M_Delta / (2 * eps)), branch)


@dataclass
class LyapunovCheckReport:
    """Pointwise check of ``Lap V/(2 eps) - |grad V|^2/(4 eps^2) <= -sigma + b 1_U``.

    ``worst_margin`` is ``min(rhs - lhs)`` relative to ``max(|lhs|, |rhs|, 1)``;
    negative means a violation.
    """

    eps: float
    sigma: float
    b: float
    U: str
    grid: dict
    n_nodes: int
    violation_count: int
    worst_margin: float
    worst_point: np.ndarray
    violations: np.ndarray = field(repr=False)

    @property
    def passed(self):
        return self.violation_count == 0

    def violations_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf)
        dim = self.violations.shape[1] - 3 if self.violations.size else len(self.worst_point)
        w.writerow([f"x{i}" for i in range(dim)] + ["lhs", "rhs", "margin"])
        for row in self.violations:
            w.writerow([f"{v:.12g}" for v in row])
        return buf.getvalue()

    def to_dict(self):
        return {
            "eps": self.eps, "sigma": self.sigma, "b": self.b, "U": self.U, "grid": self.grid,
            "n_nodes": self.n_nodes, "violation_count": self.violation_count,
            "worst_margin": self.worst_margin, "worst_point": np.asarray(self.worst_point).tolist(),
        }


def verify_lyapunov(field: ScalarField, ledger: ConstantsLedger, eps: float, h: float = 0.01,
                    radius: float | None = None, rtol: float = 1e-9, check_eps=True,
                    chunk: int = 1 << 20) -> LyapunovCheckReport:
    """Evaluate the Lyapunov inequality at every node of ``h Z^d`` with ``|x| <= radius``.

    ``radius`` defaults to ``4 R0``.  A node counts as a violation when
    ``rhs - lhs < -rtol * max(|lhs|, |rhs|, 1)``.
    """
    sb = sigma_b(ledger, eps, check=check_eps)
    radius = 4 * ledger.R0 if radius is None else radius
    m = int(np.floor(radius / h + 1e-9))
    ticks = h * np.arange(-m, m + 1)
    d = field.dim
    rU = ledger.tube_radius(eps)
    count, worst, worst_x, n_nodes = 0, np.inf, None, 0
    bad_rows = []
    mesh = np.stack(np.meshgrid(*([ticks] * d), indexing="ij"), axis=-1).reshape(-1, d)
    mesh = mesh[np.sum(mesh**2, axis=-1) <= radius**2 * (1 + 1e-12)]
    for start in range(0, len(mesh), chunk):
        x = mesh[start : start + chunk]
        g2 = np.sum(field.gradient(x) ** 2, axis=-1)
        lhs = field.laplacian(x) / (2 * eps) - g2 / (4 * eps**2)
        inU = np.asarray(field.distance_to_optimal(x)) <= rU
        rhs = -sb.sigma + sb.b * inU
        margin = (rhs - lhs) / np.maximum.reduce([np.abs(lhs), np.abs(rhs), np.ones_like(lhs)])
        viol = margin < -rtol
        count += int(viol.sum())
        n_nodes += len(x)
        j = int(np.argmin(margin))
        if margin[j] < worst:
            worst, worst_x = float(margin[j]), x[j]
        if viol.any():
            bad_rows.append(np.column_stack([x[viol], lhs[viol], rhs[viol], margin[viol]]))
    bad = np.concatenate(bad_rows) if bad_rows else np.zeros((0, d + 3))
    return LyapunovCheckReport(
        float(eps), sb.sigma, sb.b, f"S^sqrt(C eps) = {{dist(x, S) <= {rU:.6g}}}",
        {"h": h, "radius": radius, "dim": d}, n_nodes, count, worst, worst_x, bad,
    )


# --------------------------------------------------------------------------
# composing bounds


def combine_lyapunov_pi(sigma: float, b: float, rho_U: float) -> float:
    """Poincare constant from a Lyapunov pair and the constant on U: ``sigma rho_U / (b + rho_U)``."""
    if np.isinf(rho_U):
        return float(sigma)
    return float(sigma * rho_U / (b + rho_U))


def holley_stroock(rho_base: float, oscillation: float, eps: float) -> float:
    """``e^{-osc/eps} rho_base``; the density perturbation has oscillation ``osc/eps``."""
    if oscillation < 0:
        raise ValueError("oscillation must be non-negative")
    return float(rho_base * np.exp(-oscillation / eps))


def log_holley_stroock(log_rho_base: float, oscillation: float, eps: float) -> float:
    if oscillation < 0:
        raise ValueError("oscillation must be non-negative")
    return float(log_rho_base - oscillation / eps)


def tube_oscillation(field: ScalarField, ledger: ConstantsLedger, eps: float, n: int = 201) -> dict:
    """Oscillation of ``V`` on ``U`` two ways.

    ``budget`` is ``C_bar * eps``, behind the factor ``e^{-C_bar}``;
    ``direct`` is max minus min over grid nodes of ``U``.
    """
    rU = ledger.tube_radius(eps)
    reach = ledger.R0 + rU
    ticks = np.linspace(-reach, reach, n)
    mesh = np.stack(np.meshgrid(*([ticks] * field.dim), indexing="ij"), axis=-1).reshape(-1, field.dim)
    inside = np.asarray(field.distance_to_optimal(mesh)) <= rU
    V = field.value(mesh[inside])
    direct = float(V.max() - min(V.min(), field.vmin))
    budget = ledger.C_bar * eps
    return {"budget": budget, "direct": direct, "used": min(budget, direct)}


@dataclass
class FinalBound:
    """Certified lower bounds on the Poincare constant in natural-log form.

    ``factors`` itemizes each multiplicative factor as ``(name, log value)``.
    """

    eps: float
    log_bound_U: float | None
    log_bound_S: float | None
    factors: list
    conditions: dict

    @property
    def log10_bound_U(self):
        return None if self.log_bound_U is None else self.log_bound_U / LN10

    @property
    def log10_bound_S(self):
        return None if self.log_bound_S is None else self.log_bound_S / LN10

    def to_dict(self):
        return {
            "eps": self.eps,
            "log_bound_U": self.log_bound_U,
            "log_bound_S": self.log_bound_S,
            "log10_bound_U": self.log10_bound_U,
            "log10_bound_S": self.log10_bound_S,
            "factors": self.factors,
            "conditions": self.conditions,
        }


def _log(x):
    return -np.inf if x == 0 else float(np.log(x))


def final_bound(ledger: ConstantsLedger, eps: float, lambda_U: float | None = None,
                lambda_S: float | None = None, reach: float | None = None, B: float | None = None) -> FinalBound:
    """Both certified bounds at temperature ``eps``.

    The tube bound is ``(1/2) prefactor e^{-C_bar} lambda_U`` and needs the
    curvature branch of sigma to be active; the manifold bound is
    ``C_P lambda_S`` and additionally needs ``reach`` and the stability
    constant ``B``.

    Raises
    ------
    BoundRefused
        When a precondition fails; no partial bound is emitted.
    """
    if lambda_U is None and lambda_S is None:
        raise ValueError("give lambda_U and/or lambda_S")
    try:
        _check_eps(ledger, eps)
    except ThresholdError as err:
        raise BoundRefused(str(err)) from err
    sb = sigma_b(ledger, eps)
    conditions = {"eps_max": ledger.eps_max, "branch": sb.branch}
    if not sb.branch.startswith("curvature"):
        raise BoundRefused(f"sigma takes the outer branch at eps = {eps:g} (> eps* = {ledger.eps_star:.6g})")
    factors = [("1/2", np.log(0.5)), ("d mu-/(d mu- + M_Delta)", np.log(ledger.prefactor)), ("exp(-C_bar)", -ledger.C_bar)]
    log_U = log_S = None
    if lambda_U is not None:
        if lambda_U < 0:
            raise BoundRefused("negative Neumann eigenvalue")
        log_U = float(sum(v for _, v in factors) + _log(lambda_U))
    if lambda_S is not None:
        if reach is None or B is None:
            raise BoundRefused("the manifold bound needs the reach and the tube stability constant B")
        try:
            _check_eps(ledger, eps, reach, B)
        except ThresholdError as err:
            raise BoundRefused(str(err)) from err
        conditions["eps_max_geometric"] = epsilon_threshold(ledger, reach, B)
        log_S = float(ledger.log_C_P + _log(lambda_S))
    return FinalBound(float(eps), log_U, log_S, factors + [("tube-to-manifold 1/2", np.log(0.5))], conditions)


def chain_bound(ledger: ConstantsLedger, eps: float, lambda_U: float, oscillation: float) -> float:
    """Log of ``sigma rho / (b + rho)`` with ``rho = e^{-osc/eps} lambda_U``, without simplification.

    Used with the directly measured oscillation; this is the experimental
    version of the tube bound and is not a certificate on its own.
    """
    sb = sigma_b(ledger, eps)
    log_rho = log_holley_stroock(_log(lambda_U), oscillation, eps)
    # sigma rho / (b + rho) in log form
    return float(np.log(sb.sigma) + log_rho - np.logaddexp(np.log(sb.b), log_rho))
