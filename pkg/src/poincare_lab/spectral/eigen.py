"""Smallest eigenpairs of weighted symmetric operators, and Rayleigh witnesses."""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy import linalg
from scipy.sparse.linalg import ArpackNoConvergence, LinearOperator, eigsh, splu

from .operators import DiscreteOperator

__all__ = [
    "SpectrumResult",
    "RayleighWitness",
    "smallest_eigenvalues",
    "rayleigh_quotient",
    "rayleigh_witness",
    "cluster_multiplicities",
    "richardson",
    "SOLVER_TOL",
    "CLUSTER_RTOL",
]

SOLVER_TOL = 1e-8
CLUSTER_RTOL = 1e-6
DENSE_LIMIT = 1500


def cluster_multiplicities(values, rtol=CLUSTER_RTOL):
    """Group sorted eigenvalues whose relative spacing is below ``rtol``.

    Returns a list of ``(representative, multiplicity)``.
    """
    out = []
    for v in values:
        if out and abs(v - out[-1][0]) <= rtol * max(abs(v), abs(out[-1][0]), 1e-300):
            rep, m = out[-1]
            out[-1] = (rep, m + 1)
        else:
            out.append((v, 1))
    return out


@dataclass
class SpectrumResult:
    """Smallest eigenvalues of a weighted operator.

    ``vectors`` hold orthonormal eigenvectors of the symmetrized matrix;
    :meth:`eigenfunction` maps them back to node values.
    """

    eigenvalues: np.ndarray
    residuals: np.ndarray
    h: float | None = None
    eps: float | None = None
    vectors: np.ndarray | None = field(default=None, repr=False)
    log_weights: np.ndarray | None = field(default=None, repr=False)
    converged: bool = True
    tol: float = SOLVER_TOL
    extrapolated: np.ndarray | None = None
    cluster_rtol: float = CLUSTER_RTOL
    tag: str = ""

    @property
    def multiplicities(self):
        vals = self.extrapolated if self.extrapolated is not None else self.eigenvalues
        return cluster_multiplicities(vals[1:], self.cluster_rtol)

    @property
    def lambda1(self) -> float:
        return float(self.eigenvalues[1])

    @property
    def gap(self) -> float:
        return self.lambda1

    @property
    def lambda1_multiplicity(self) -> int:
        return self.multiplicities[0][1]

    @property
    def rho(self) -> float | None:
        """Poincare constant estimate ``gap / eps`` for generator spectra."""
        return None if self.eps is None else self.gap / self.eps

    def eigenfunction(self, i):
        psi = self.vectors[:, i]
        return psi * np.exp(-0.5 * (self.log_weights - self.log_weights.max()))

    def to_dict(self):
        d = {
            "h": self.h,
            "eps": self.eps,
            "eigenvalues": self.eigenvalues.tolist(),
            "residuals": self.residuals.tolist(),
            "multiplicities": [[float(v), int(m)] for v, m in self.multiplicities],
            "converged": self.converged,
            "lambda0": float(self.eigenvalues[0]),
            "lambda1": self.lambda1,
            "rho": self.rho,
            "tag": self.tag,
        }
        if self.extrapolated is not None:
            d["extrapolated"] = self.extrapolated.tolist()
        return d

    def csv_row(self, config=None, scale=None):
        """``(config_hash, h, eps_or_radius, lambda0, lambda1, residual, rho)``."""
        blob = json.dumps(config or {"tag": self.tag}, sort_keys=True, default=str).encode()
        return {
            "config_hash": hashlib.sha256(blob).hexdigest()[:12],
            "h": self.h,
            "eps": self.eps if scale is None else scale,
            "lambda0": float(self.eigenvalues[0]),
            "lambda1": self.lambda1,
            "residual": float(self.residuals[:2].max()),
            "rho": self.rho,
        }


def _residuals(S, vals, vecs, scale):
    R = S @ vecs - vecs * vals
    return np.linalg.norm(R, axis=0) / (scale * np.linalg.norm(vecs, axis=0))


def _dense(op: DiscreteOperator, m):
    S = op.sym
    n = op.n
    if S.nnz and (S - sp.diags(S.diagonal()) - sp.diags(S.diagonal(1), 1) - sp.diags(S.diagonal(-1), -1)).nnz == 0:
        vals, vecs = linalg.eigh_tridiagonal(S.diagonal(), S.diagonal(1), select="i", select_range=(0, m - 1))
    else:
        vals, vecs = linalg.eigh(S.toarray(), subset_by_index=(0, min(m, n) - 1))
    return vals, vecs


def _krylov(op: DiscreteOperator, m, tol, maxiter):
    S = op.sym.tocsc()
    n = op.n
    psi0 = op.zero_mode()
    shift = 1e-10 * float(np.median(S.diagonal()))
    lu = splu((S + shift * sp.identity(n, format="csc")).tocsc())

    def proj(x):
        return x - psi0 * (psi0 @ x)

    def matvec(x):
        x = np.asarray(x).ravel()
        return proj(lu.solve(proj(x)))

    Op = LinearOperator((n, n), matvec=matvec, dtype=float)
    v0 = proj(np.cos(np.arange(n) * 0.7371 + 0.3) + 0.5)
    converged = True
    try:
        nu, vecs = eigsh(Op, k=m - 1, which="LA", v0=v0, tol=tol * 1e-2, maxiter=maxiter)
    except ArpackNoConvergence as err:
        nu, vecs = err.eigenvalues, err.eigenvectors
        converged = False
    lam = 1.0 / nu - shift
    order = np.argsort(lam)
    lam, vecs = lam[order], vecs[:, order]
    lam0 = float(psi0 @ (S @ psi0))
    vals = np.concatenate([[lam0], lam])
    vecs = np.column_stack([psi0, vecs])
    return vals, vecs, converged


def smallest_eigenvalues(op: DiscreteOperator, m=2, tol=SOLVER_TOL, maxiter=None, dense=None) -> SpectrumResult:
    """The ``m`` smallest eigenpairs of ``op``.

    Large operators use Lanczos on the projected shift-inverse
    ``P (S + s I)^{-1} P`` where ``P`` removes the constant mode, so that the
    zero eigenvalue cannot shadow a small gap.  The constant mode itself is
    reported as ``lambda_0`` via its Rayleigh quotient.  Small operators and
    all 1-D problems are solved densely.  Residuals are
    ``||S v - lambda v|| / ||S||`` with ``||S||`` a Gershgorin bound.
    """
    if m < 2:
        raise ValueError("need m >= 2 (zero mode plus at least one gap)")
    m = min(m, op.n)
    is_1d = op.meta.get("dim", None) == 1
    use_dense = dense if dense is not None else (op.n <= DENSE_LIMIT or is_1d)
    scale = op.norm_estimate()
    if use_dense:
        vals, vecs = _dense(op, m)
        converged = True
    else:
        vals, vecs, converged = _krylov(op, m, tol, maxiter)
    res = _residuals(op.sym, vals, vecs, scale)
    return SpectrumResult(
        eigenvalues=np.asarray(vals, float),
        residuals=res,
        h=op.meta.get("h"),
        eps=op.meta.get("eps"),
        vectors=vecs,
        log_weights=op.log_weights,
        converged=bool(converged and np.all(res <= tol)),
        tol=tol,
        tag=op.tag,
    )


@dataclass(frozen=True)
class RayleighWitness:
    values: np.ndarray
    mean_zero: bool
    quotient: float


def rayleigh_witness(op: DiscreteOperator, u) -> RayleighWitness:
    """Project ``u`` to weighted mean zero and evaluate its Rayleigh quotient.

    By the min-max principle the quotient bounds the first nonzero
    eigenvalue from above.
    """
    u = np.asarray(u, dtype=float)
    w = op.weights()
    u = u - np.sum(w * u) / np.sum(w)
    psi = op.sqrt_weights() * u
    den = psi @ psi
    if not den > 1e-300:
        raise ValueError("witness vanishes after removing its weighted mean")
    q = float(psi @ (op.sym @ psi) / den)
    mean = abs(np.sum(w * u)) / np.sqrt(np.sum(w) * np.sum(w * u * u))
    return RayleighWitness(u, bool(mean <= 1e-10), q)


def rayleigh_quotient(op: DiscreteOperator, u) -> float:
    return rayleigh_witness(op, u).quotient


def richardson(coarse, fine, order=2, ratio=2.0):
    """Extrapolate ``lambda(h), lambda(h/ratio)`` assuming error ``~ h^order``."""
    coarse, fine = np.asarray(coarse, float), np.asarray(fine, float)
    f = ratio**order
    return (f * fine - coarse) / (f - 1)
