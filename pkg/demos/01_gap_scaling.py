"""How the generator gap scales with temperature.

A minimizing circle keeps ``rho = gap / eps`` of order one, a single
quadratic well has ``gap = 1`` (``rho = 1/eps``), and a double well closes
its gap exponentially.
"""
import numpy as np

from poincare_lab import get_potential
from poincare_lab.spectral import generator_spectrum

# %% circle of minima: rho approaches lambda_1(S) = 1
circle = get_potential("circle2d")
for eps in (0.05, 0.02, 0.01):
    spec = generator_spectrum(circle, eps, np.sqrt(eps) / 8, m=3)
    print(f"circle  eps={eps:<5} gap={spec.gap:.5f} rho={spec.rho:.4f} mult={spec.lambda1_multiplicity}")

# %% quadratic well: the spectrum is {0, 1, 2, ...} at every temperature
ou = get_potential("quadratic1d")
for eps in (0.1, 0.01):
    lam = generator_spectrum(ou, eps, np.sqrt(eps) / 16, m=3).eigenvalues
    print(f"OU      eps={eps:<5} eigenvalues={np.round(lam, 5)}")

# %% double well: log(gap) is linear in 1/eps with slope -(barrier height)
dw = get_potential("doublewell1d")
eps = np.array([0.05, 0.04, 0.035, 0.03])
gaps = np.array([generator_spectrum(dw, e, np.sqrt(e) / 16, m=2).gap for e in eps])
slope = np.polyfit(1 / eps, np.log(gaps), 1)[0]
print("double well gaps", gaps)
print(f"slope of log gap vs 1/eps: {slope:.4f} (barrier 0.25)")
