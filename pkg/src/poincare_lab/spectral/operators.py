"""Symmetric finite-volume discretizations of the Neumann Laplacian and the
reversible Langevin generator.

Both operators have the form ``A = M^{-1} K`` with a diagonal mass ``M`` and a
symmetric, zero-row-sum-after-weighting stiffness ``K``.  We store the
symmetrized matrix ``S = W^{1/2} A W^{-1/2}`` together with ``log W``, so that
weights spanning hundreds of orders of magnitude never materialize.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy import ndimage

from .grid import GridDomain

__all__ = [
    "DiscreteOperator",
    "CoverageError",
    "assemble_neumann_laplacian",
    "assemble_weighted_generator",
    "default_generator_domain",
    "COVERAGE_LEVEL",
    "TRUNCATION_LEVEL",
]

#: truncation boundary cells must sit this many multiples of eps above V*
COVERAGE_LEVEL = 20.0
#: default domain is the sublevel set V <= V* + TRUNCATION_LEVEL * eps
TRUNCATION_LEVEL = 40.0


class CoverageError(ValueError):
    """The truncated domain cuts through non-negligible Gibbs mass."""


@dataclass
class DiscreteOperator:
    """Self-adjoint operator in a weighted inner product.

    Attributes
    ----------
    sym : scipy.sparse.csr_matrix
        Symmetrized matrix ``W^{1/2} A W^{-1/2}``.
    log_weights : ndarray
        ``log w`` per node, defined up to an additive constant.
    tag : str
        Human-readable description.
    """

    sym: sp.csr_matrix
    log_weights: np.ndarray
    tag: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.sym.shape[0]

    def sqrt_weights(self):
        """``sqrt(w)`` normalized to a maximum of 1."""
        return np.exp(0.5 * (self.log_weights - self.log_weights.max()))

    def weights(self):
        """Weights normalized to a maximum of 1."""
        return np.exp(self.log_weights - self.log_weights.max())

    def matrix(self) -> sp.csr_matrix:
        """The operator ``A`` itself, scaled entrywise through log-weight differences."""
        S = self.sym.tocoo()
        scale = np.exp(0.5 * (self.log_weights[S.col] - self.log_weights[S.row]))
        return sp.csr_matrix((S.data * scale, (S.row, S.col)), shape=S.shape)

    def apply(self, f):
        return self.matrix() @ f

    def inner(self, f, g):
        return float(np.sum(self.weights() * f * g))

    def zero_mode(self):
        """Unit vector of the constant function in symmetrized coordinates."""
        psi = self.sqrt_weights()
        return psi / np.linalg.norm(psi)

    def norm_estimate(self) -> float:
        """Gershgorin bound on the spectral radius of ``sym``."""
        return float(np.max(np.asarray(abs(self.sym).sum(axis=1)).ravel()))

    def zero_mode_residual(self) -> float:
        """``max |A 1|`` relative to the largest diagonal entry."""
        r = self.matrix() @ np.ones(self.n)
        return float(np.max(np.abs(r)) / np.max(np.abs(self.sym.diagonal())))

    def symmetry_defect(self, rng=None, trials=4) -> float:
        """Largest relative ``|<Af, g>_w - <f, Ag>_w|`` over random pairs."""
        rng = np.random.default_rng(0) if rng is None else rng
        A = self.matrix()
        w = self.weights()
        worst = 0.0
        for _ in range(trials):
            f, g = rng.standard_normal((2, self.n))
            lhs = np.sum(w * (A @ f) * g)
            rhs = np.sum(w * f * (A @ g))
            scale = np.sqrt(np.sum(w * (A @ f) ** 2) * np.sum(w * g**2)) or 1.0
            worst = max(worst, abs(lhs - rhs) / scale)
        return worst


def _stiffness(domain: GridDomain, edge_factor=None):
    """Symmetric pieces of the discretization: per-face ``(i, j, conductance)``."""
    rows, cols, vals = [], [], []
    for i, j, c in domain.faces():
        rows.append(i)
        cols.append(j)
        vals.append(c)
    if not rows:
        return np.zeros(0, int), np.zeros(0, int), np.zeros(0)
    return np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)


def _assemble(domain: GridDomain, values, eps):
    """Shared assembly of ``S`` for ``-eps e^{V/eps} div(e^{-V/eps} grad)``.

    With ``values = None`` this is ``-eps * Laplacian``.
    """
    n = domain.n_active
    vol = domain.masses()
    i, j, c = _stiffness(domain)
    off = -eps * c / np.sqrt(vol[i] * vol[j])
    if values is None:
        gi = gj = eps * c
    else:
        dv = (values[j] - values[i]) / (2 * eps)
        gi = eps * c * np.exp(-dv)
        gj = eps * c * np.exp(dv)
    diag = np.bincount(i, weights=gi, minlength=n) + np.bincount(j, weights=gj, minlength=n)
    diag = diag / vol
    S = sp.coo_matrix(
        (np.concatenate([off, off, diag]), (np.concatenate([i, j, np.arange(n)]), np.concatenate([j, i, np.arange(n)]))),
        shape=(n, n),
    ).tocsr()
    logw = np.log(vol)
    if values is not None:
        logw = logw - (values - values.min()) / eps
    return S, logw


def assemble_neumann_laplacian(domain: GridDomain) -> DiscreteOperator:
    """Finite-volume ``-Laplacian`` with reflecting (Neumann) boundary.

    Fluxes cross a face in proportion to its inside aperture; no flux leaves
    the domain, which is the cut-cell analogue of mirrored ghost values.
    """
    S, logw = _assemble(domain, None, 1.0)
    return DiscreteOperator(S, logw, f"neumann-laplacian {domain!r}", {"h": float(domain.h.max()), "dim": domain.dim})


def _sublevel_extent(field, level, h, start=2.0, max_half=64.0):
    """Half-width of a centred box whose surface lies above ``level``."""
    d = field.dim
    half = start
    while half <= max_half:
        m = 41 if d <= 2 else 21
        g = np.linspace(-half, half, m)
        surface = []
        for a in range(d):
            for side in (-half, half):
                grids = [g] * d
                grids[a] = np.array([side])
                mesh = np.meshgrid(*grids, indexing="ij")
                surface.append(np.stack([x.ravel() for x in mesh], axis=-1))
        if np.min(field.value(np.concatenate(surface))) > level:
            return half
        half *= 1.5
    raise CoverageError(f"sublevel set {{V <= {level:.4g}}} not bounded within |x| <= {max_half}")


def default_generator_domain(field, eps, h, level=TRUNCATION_LEVEL, pad_cells=2) -> GridDomain:
    """Grid covering the sublevel set ``{V <= V* + level*eps}``.

    The domain is the masked sublevel set when it is connected, otherwise the
    bounding box of its cells.
    """
    vstar = field.vmin
    half = _sublevel_extent(field, vstar + level * eps, h)
    full = GridDomain.box(-half * np.ones(field.dim), half * np.ones(field.dim), h, boundary="truncation")
    V = field.value(full.centers(active_only=False)).reshape(full.shape)
    inside = V <= vstar + level * eps
    if not inside.any():
        raise CoverageError("no grid cell inside the sublevel set; refine h")
    nz = np.nonzero(inside)
    lo_i = [max(int(ix.min()) - pad_cells, 0) for ix in nz]
    hi_i = [min(int(ix.max()) + 1 + pad_cells, n) for ix, n in zip(nz, full.shape)]
    sl = tuple(slice(a, b) for a, b in zip(lo_i, hi_i))
    lower = full.lower + full.h * np.array(lo_i)
    upper = full.lower + full.h * np.array(hi_i)
    sub = inside[sl]
    _, ncomp = ndimage.label(sub)
    if ncomp == 1:
        return GridDomain(lower, upper, sub.shape, mask=sub, boundary="truncation")
    return GridDomain(lower, upper, sub.shape, boundary="truncation")


def assemble_weighted_generator(field, eps, domain: GridDomain | None = None, h=None,
                                check_coverage=True) -> DiscreteOperator:
    """Square-root-approximation discretization of ``-L = -eps e^{V/eps} div(e^{-V/eps} grad .)``.

    Rates across a face with conductance ``c`` are
    ``eps c / vol_i * exp(-(V_j - V_i) / (2 eps))``, which satisfy detailed
    balance for the weights ``w_i = vol_i exp(-(V_i - V_min)/eps)``.

    Parameters
    ----------
    field : ScalarField
    eps : float
        Temperature, must be positive.
    domain : GridDomain, optional
        Defaults to :func:`default_generator_domain` with spacing ``h``.
    check_coverage : bool
        Reject domains whose boundary cells have ``V <= V* + 20 eps``.
    """
    if not eps > 0:
        raise ValueError(f"eps must be positive, got {eps}")
    if domain is None:
        if h is None:
            raise ValueError("give either a domain or a spacing h")
        domain = default_generator_domain(field, eps, h)
    x = domain.centers()
    V = field.value(x)
    if check_coverage and domain.boundary == "truncation":
        bmask = domain.boundary_cells()[domain.mask]
        bad = np.flatnonzero(bmask & (V <= field.vmin + COVERAGE_LEVEL * eps))
        if bad.size:
            k = bad[np.argmin(V[bad])]
            raise CoverageError(
                f"truncation boundary cell at {np.round(x[k], 6).tolist()} has V - V* = "
                f"{V[k] - field.vmin:.4g} <= {COVERAGE_LEVEL:g} eps = {COVERAGE_LEVEL * eps:.4g}"
            )
    S, logw = _assemble(domain, V, eps)
    return DiscreteOperator(
        S, logw, f"generator {getattr(field, 'name', field)} eps={eps:g} {domain!r}",
        {"eps": float(eps), "h": float(domain.h.max()), "dim": domain.dim},
    )
