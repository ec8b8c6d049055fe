import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate

from poincare_lab.langevin import (
    SimConfig,
    SimulationRejected,
    TrajectoryEnsemble,
    default_R0,
    em_ou_variance,
    em_step,
    estimate_gap_autocorr,
    gibbs_grid_mean,
    lipschitz_bound,
    mixing_sweep,
    simulate_ensemble,
    sweep_csv,
)
from poincare_lab.potential import ScalarField, get_potential

ou = get_potential("quadratic1d")
circle = get_potential("circle2d")


class PlainQuadratic(ScalarField):
    """``|x|^2 / 2`` without the radial fast path."""

    name, dim, vmin, optimal_radius = "plain", 1, 0.0, 0.0

    def _value(self, x):
        return 0.5 * np.sum(x**2, axis=-1)

    def _gradient(self, x):
        return x.copy()

    def _hessian(self, x):
        return np.broadcast_to(np.eye(self.dim), (len(x), self.dim, self.dim)).copy()


class BrokenField(PlainQuadratic):
    """Gradient becomes non-finite for ``x > 0.5``."""

    name = "broken"

    def _gradient(self, x):
        return np.where(x > 0.5, np.nan, x)


# ---- single steps -------------------------------------------------------


def test_em_step_fixed_point():
    x = np.array([[0.0, 0.0]])
    np.testing.assert_array_equal(em_step(x, get_potential("quadratic"), 0.1, 0.3, np.zeros((1, 2))), x)


def test_em_step_ou_contraction():
    assert em_step(np.array([1.0]), ou, 0.1, 0.7, np.array([0.0]))[0] == pytest.approx(0.9)


def test_em_step_noise_on_optimal_set():
    out = em_step(np.array([1.0, 0.0]), circle, 0.02, 0.5, np.array([1.0, 0.0]))
    np.testing.assert_allclose(out, [1 + np.sqrt(0.02), 0.0])


def test_em_step_flags_non_finite():
    assert not np.isfinite(em_step(np.array([1.0]), BrokenField(), 0.1, 0.1, np.array([0.0]))).all()


# ---- configuration ------------------------------------------------------


def test_step_bound_enforced():
    L = lipschitz_bound(ou, 4.0)
    assert L == pytest.approx(1.0)
    with pytest.raises(ValueError, match="exceeds the bound"):
        simulate_ensemble(SimConfig(eps=0.1, h=0.02, T=1.0, init="point", x0=(0.0,)), ou)


def test_zero_temperature_step_bound():
    cfg = SimConfig(eps=0.0, h=6e-3, T=1.0, init="point", x0=(2.0, 0.0)).resolved(circle)
    assert cfg.L_global == pytest.approx(15.0, rel=1e-2)
    with pytest.raises(ValueError):
        SimConfig(eps=0.0, h=0.05, T=1.0, init="point", x0=(2.0, 0.0)).resolved(circle)


def test_default_R0():
    assert default_R0(circle) == 2.0
    assert default_R0(get_potential("doublewell1d")) == 1.0
    assert default_R0(ou) == 1.0


@pytest.mark.parametrize("kw", [
    {"eps": -1.0, "h": 0.1, "T": 1.0},
    {"eps": 0.1, "h": 0.0, "T": 1.0},
    {"eps": 0.1, "h": 0.1, "T": 1.0, "init": "point"},
    {"eps": 0.1, "h": 0.1, "T": 1.0, "init": "uniform"},
    {"eps": 0.0, "h": 0.1, "T": 1.0},
    {"eps": 0.1, "h": 0.1, "T": 1.0, "init": "gaussian"},
])
def test_invalid_configs(kw):
    with pytest.raises(ValueError):
        SimConfig(**kw)


def test_config_hash_depends_on_content():
    a = SimConfig(eps=0.1, h=1e-3, T=1.0)
    assert a.config_hash("x") == SimConfig(eps=0.1, h=1e-3, T=1.0).config_hash("x")
    assert a.config_hash("x") != SimConfig(eps=0.1, h=1e-3, T=1.0, seed=1).config_hash("x")
    assert a.config_hash("x") != a.config_hash("y")


# ---- ensembles ----------------------------------------------------------


def small(seed=0, N=20, **kw):
    base = dict(eps=0.1, h=5e-4, T=2.0, N=N, seed=seed, obs_dt=0.05)
    base.update(kw)
    return SimConfig(**base)


def test_bit_exact_reproducibility():
    a = simulate_ensemble(small(seed=3), circle)
    b = simulate_ensemble(small(seed=3), circle)
    assert np.array_equal(a.samples, b.samples)
    assert a.config_hash == b.config_hash
    c = simulate_ensemble(small(seed=4), circle)
    assert not np.array_equal(a.samples, c.samples)


def test_streams_independent_of_ensemble_size():
    a = simulate_ensemble(small(N=5), ou)
    b = simulate_ensemble(small(N=12), ou)
    assert np.array_equal(a.samples, b.samples[:5])
    assert b.stream_ids[7] == [0, 7]


def test_compiled_and_numpy_paths_agree():
    cfg = small(N=3, T=0.5, init="point", x0=(0.8,))
    a = simulate_ensemble(cfg, ou)
    b = simulate_ensemble(cfg, PlainQuadratic())
    np.testing.assert_allclose(a.samples, b.samples, rtol=1e-12, atol=1e-14)


def test_observation_times():
    e = simulate_ensemble(small(N=2, init="point", x0=(0.0,)), ou)
    assert e.times[0] == 0.0
    np.testing.assert_allclose(np.diff(e.times), 0.05)
    assert e.samples.shape == (2, len(e.times), 1)
    assert np.all(e.samples[:, 0, 0] == 0.0)
    assert np.isfinite(e.samples).all()


def test_reflection_rejects_run():
    with pytest.raises(SimulationRejected, match="reflected"):
        simulate_ensemble(SimConfig(eps=5.0, h=0.01, T=5.0, N=20, init="point", x0=(0.0,)), ou)


def test_divergence_rejects_run():
    cfg = SimConfig(eps=0.1, h=1e-3, T=5.0, N=20, init="point", x0=(0.0,), R0=1.0, L_global=1.0)
    with pytest.raises(SimulationRejected):
        simulate_ensemble(cfg, BrokenField())


def test_save_and_load(tmp_path):
    e = simulate_ensemble(small(N=4), circle)
    npy, js = e.save(tmp_path / "run")
    assert npy.exists() and js.exists()
    back = TrajectoryEnsemble.load(tmp_path / "run")
    assert np.array_equal(back.samples, e.samples)
    assert back.config == e.config
    assert back.config_hash == e.config_hash
    assert back.sidecar()["seed"] == 0
    np.testing.assert_array_equal(back.times, e.times)


# ---- stationary statistics ------------------------------------------------


def test_em_ou_variance_formula():
    # solve the AR(1) fixed point v = (1 - a h)^2 v + 2 eps h directly
    for eps, h, a in [(0.1, 1e-3, 1.0), (0.3, 0.05, 2.0)]:
        v = 2 * eps * h / (1 - (1 - a * h) ** 2)
        assert em_ou_variance(eps, h, a) == pytest.approx(v)


def test_ou_stationary_variance():
    eps, h = 0.1, 1e-3
    e = simulate_ensemble(SimConfig(eps=eps, h=h, T=200.0, N=100, seed=11, obs_dt=0.5), ou)
    per_traj = np.mean(e.samples[..., 0] ** 2, axis=1)
    se = per_traj.std(ddof=1) / np.sqrt(len(per_traj))
    assert abs(per_traj.mean() - em_ou_variance(eps, h)) <= 3 * se
    assert abs(per_traj.mean() - eps) <= 3 * se


def test_circle_radial_spread():
    eps = 0.01
    cfg = SimConfig(eps=eps, h=6e-5, T=4.0, N=100, seed=2, init="uniform", box=((-1.5, -1.5), (1.5, 1.5)),
                    obs_dt=0.01)
    e = simulate_ensemble(cfg, circle)
    r = np.linalg.norm(e.samples[:, e.times >= 2.0], axis=-1)
    # Laplace approximation: V''(1) = 1
    assert r.std() == pytest.approx(np.sqrt(eps), rel=0.1)
    assert r.mean() == pytest.approx(1.0, abs=0.02)


def test_zero_noise_gradient_flow():
    cfg = SimConfig(eps=0.0, h=6e-3, T=20.0, N=1, init="point", x0=(2.0, 0.0))
    e = simulate_ensemble(cfg, circle)
    np.testing.assert_allclose(e.samples[0, -1], [1.0, 0.0], atol=1e-10)
    r = np.linalg.norm(e.samples[0], axis=-1)
    assert np.all(np.diff(r) <= 0)


def test_zero_noise_matches_radial_ode():
    cfg = SimConfig(eps=0.0, h=1e-4, T=1.0, N=1, init="point", x0=(2.0, 0.0), obs_dt=0.5)
    e = simulate_ensemble(cfg, circle)
    sol = integrate.solve_ivp(lambda t, r: -r * (r - 1), (0, 1), [2.0], rtol=1e-12, atol=1e-12)
    assert e.samples[0, -1, 0] == pytest.approx(sol.y[0, -1], rel=1e-3)


def test_energy_matches_grid_quadrature():
    eps = 0.05
    cfg = SimConfig(eps=eps, h=3e-4, T=12.0, N=100, seed=5, init="uniform", box=((-2, -2), (2, 2)), obs_dt=0.02)
    e = simulate_ensemble(cfg, circle)
    V = circle.value(e.samples[:, e.times >= 3.0].reshape(-1, 2)).reshape(100, -1).mean(axis=1)
    se = V.std(ddof=1) / np.sqrt(len(V))
    assert abs(V.mean() - gibbs_grid_mean(circle, eps)) <= 3 * se


def test_gibbs_grid_mean_ou():
    assert gibbs_grid_mean(ou, 0.1) == pytest.approx(0.05, rel=1e-4)
    assert gibbs_grid_mean(ou, 0.1, fn=lambda x: x[:, 0] ** 2) == pytest.approx(0.1, rel=1e-4)


# ---- rate estimation ------------------------------------------------------


@pytest.fixture(scope="module")
def ou_ensemble():
    return simulate_ensemble(SimConfig(eps=0.1, h=1e-3, T=40.0, N=200, seed=0, obs_dt=0.02), ou)


def test_ou_gap_estimate(ou_ensemble):
    est = estimate_gap_autocorr(ou_ensemble)
    assert est.rate == pytest.approx(1.0, rel=0.15)
    assert est.ci[0] <= est.rate <= est.ci[1]
    assert est.r2 >= 0.9 and not est.low_confidence
    assert est.window[0] > 0
    assert est.n_traj == 200


def test_observable_independence(ou_ensemble):
    a = estimate_gap_autocorr(ou_ensemble, window=(0.3, 0.05))
    b = estimate_gap_autocorr(ou_ensemble, lambda s: s[..., 0] ** 3, window=(0.3, 0.05))
    assert max(a.ci[0], b.ci[0]) <= min(a.ci[1], b.ci[1])


def test_fit_window_excludes_burn_in(ou_ensemble):
    est = estimate_gap_autocorr(ou_ensemble, burn_in=5.0)
    assert est.rate == pytest.approx(1.0, rel=0.15)


def test_too_few_trajectories(ou_ensemble):
    e = simulate_ensemble(small(N=50), ou)
    with pytest.raises(ValueError, match="at least 100"):
        estimate_gap_autocorr(e)


def test_constant_observable_rejected(ou_ensemble):
    with pytest.raises(ValueError, match="zero variance"):
        estimate_gap_autocorr(ou_ensemble, lambda s: np.ones(s.shape[:2]))


def test_step_halving_consistency():
    rates, halfs = [], []
    for h in (0.01, 0.005):
        e = simulate_ensemble(SimConfig(eps=0.1, h=h, T=40.0, N=200, seed=21, obs_dt=0.02), ou)
        est = estimate_gap_autocorr(e)
        rates.append(est.rate)
        halfs.append(0.5 * (est.ci[1] - est.ci[0]))
    # EM on OU decays at -log(1 - h)/h = 1 + h/2 + O(h^2)
    bias = 0.5 * (0.01 - 0.005)
    assert abs(rates[0] - rates[1]) <= bias + np.hypot(*halfs)


# ---- sweeps -------------------------------------------------------------


def test_ou_sweep_is_temperature_free(tmp_path):
    rows = mixing_sweep(ou, [0.2, 0.1, 0.05], {"N": 100, "seed": 1, "gap_pilot": 1.0})
    for r in rows:
        assert abs(r["gap_hat"] - 1) <= 0.15
        assert r["gap_over_eps"] == pytest.approx(r["gap_hat"] / r["epsilon"])
    text = sweep_csv(rows, tmp_path / "sweep.csv")
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0] == "epsilon,gap_hat,gap_over_eps,ci_lo,ci_hi,r2,low_confidence,gap_pilot"
    assert len(lines) == 4
    assert text.splitlines() == lines


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_seeds_give_independent_streams(seed):
    a = simulate_ensemble(small(seed=seed, N=2, T=0.1, init="point", x0=(0.0,)), ou)
    assert not np.array_equal(a.samples[0], a.samples[1])
