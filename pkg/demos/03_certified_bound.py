"""Constants ledger, Lyapunov check and the certified Poincare lower bound.

The certified bound is valid but extremely conservative for the raw circle
potential; a softened ring keeps it within a few orders of magnitude.
"""
import numpy as np

from poincare_lab import get_manifold, get_potential
from poincare_lab.constants import build_ledger, final_bound, ledger_regions, sigma_b, verify_lyapunov
from poincare_lab.spectral import generator_spectrum, tube_stability_report

circle = get_potential("circle2d")
led = build_ledger(circle, ledger_regions("circle2d"))
print(f"C = {led.C:.3f}, C_bar = {led.C_bar:.3f}, log10 C_P = {led.log10_C_P:.3f}, eps_max = {led.eps_max:.3g}")

sb = sigma_b(led, 1e-3)
rep = verify_lyapunov(circle, led, 1e-3, h=0.01)
print(f"eps = 1e-3: sigma = {sb.sigma:g}, b = {sb.b:g}, violations {rep.violation_count}/{rep.n_nodes}")

# tube stability constant of the unit circle enters the admissible range
B = tube_stability_report(get_manifold("circle"), (0.2, 0.1, 0.05, 0.025), lambda_ref=1.0).B
for name, eps in (("circle2d", 0.001), ("ring2d_soft", 4e-4)):
    field = get_potential(name)
    led = build_ledger(field, ledger_regions(name))
    fb = final_bound(led, eps, lambda_S=1.0, reach=get_manifold("circle").reach, B=B)
    rho = generator_spectrum(field, eps, np.sqrt(eps) / 8, m=2).rho
    print(f"{name:12s} eps={eps:g}: log10 bound {fb.log10_bound_S:9.2f}, log10 measured rho {np.log10(rho):.3f}")
