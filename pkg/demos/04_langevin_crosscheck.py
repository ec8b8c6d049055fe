"""Euler-Maruyama ensembles: autocorrelation decay rate vs the eigensolver gap."""
import numpy as np

from poincare_lab import get_potential
from poincare_lab.langevin import SimConfig, em_ou_variance, estimate_gap_autocorr, simulate_ensemble
from poincare_lab.spectral import generator_spectrum

ou = get_potential("quadratic1d")
eps = 0.1
ens = simulate_ensemble(SimConfig(eps=eps, h=0.01, T=200.0, N=100, seed=0, obs_dt=0.05), ou)
est = estimate_gap_autocorr(ens)
gap = generator_spectrum(ou, eps, np.sqrt(eps) / 16, m=2).gap
print(f"OU: rate {est.rate:.4f} (95% CI {est.ci[0]:.4f}..{est.ci[1]:.4f}), eigensolver gap {gap:.4f}")
print("stationary variance", np.mean(ens.samples ** 2), "AR(1) value", em_ou_variance(eps, 0.01))

# circle potential at eps = 0.02 takes about half a minute at the admissible step
circle = get_potential("circle2d")
cfg = SimConfig(eps=0.02, h=0.02 / 150, T=600.0, N=100, seed=0, obs_dt=0.5)
est = estimate_gap_autocorr(simulate_ensemble(cfg, circle))
gap = generator_spectrum(circle, 0.02, np.sqrt(0.02) / 8, m=2).gap
print(f"circle: rate {est.rate:.4f}, eigensolver gap {gap:.4f}, rel {est.rate / gap - 1:+.1%}")
