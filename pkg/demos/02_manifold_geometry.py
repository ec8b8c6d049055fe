"""Geometry of the optimal set: Laplace-Beltrami gaps, tubes and the Weyl density."""
import numpy as np

from poincare_lab.cli import WEYL_INTEGRANDS
from poincare_lab.manifold import (
    Sphere,
    TubularNeighborhood,
    ambient_shell_integral,
    get_manifold,
    reach_estimate,
    tube_integrate,
)
from poincare_lab.spectral import laplace_beltrami_gap, tube_stability_report

for name in ("circle", "circleR", "sphere"):
    mf = get_manifold(name)
    spec = laplace_beltrami_gap(mf)
    print(f"{name:8s} reach={reach_estimate(mf):.3f} lambda1={spec.lambda1:.5f} "
          f"(multiplicity {spec.lambda1_multiplicity})")

# Neumann gap of a thin tube tends to lambda_1(S) linearly in the radius
rep = tube_stability_report(get_manifold("circle"), (0.2, 0.1, 0.05, 0.025), lambda_ref=1.0)
for r, lam in zip(rep.radii, rep.lambdas):
    print(f"tube radius {r:<6} lambda1 = {lam:.5f}")
print(f"fit: limit {rep.limit:.5f}, R^2 {rep.r2:.3f}, B {rep.B:.3f}")

# integrals over a shell in tube coordinates vs plain Cartesian quadrature
tube = TubularNeighborhood.build(Sphere(), 0.1)
for key, phi in WEYL_INTEGRANDS.items():
    a = tube_integrate(tube, phi, 64, 16).value
    b = ambient_shell_integral(Sphere(), 0.1, phi)
    print(f"sphere shell, {key:8s} tube={a:.10f} ambient={b:.10f} rel={abs(a - b) / abs(b):.1e}")
print("unit circle shell volume", tube_integrate(TubularNeighborhood.build(get_manifold("circle"), 0.1),
                                                 WEYL_INTEGRANDS["one"]).value, "vs", 0.4 * np.pi)
