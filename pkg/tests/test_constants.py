import dataclasses
import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from poincare_lab.constants import (
    BoundRefused,
    ConstantsLedger,
    LedgerError,
    ThresholdError,
    build_ledger,
    chain_bound,
    combine_lyapunov_pi,
    epsilon_bounds,
    epsilon_threshold,
    final_bound,
    holley_stroock,
    ledger_regions,
    log_holley_stroock,
    sigma_b,
    tube_oscillation,
    verify_lyapunov,
)
from poincare_lab.potential import RegionSpec, get_potential
from poincare_lab.spectral import generator_spectrum

circle = get_potential("circle2d")


@pytest.fixture(scope="module")
def circle_ledger():
    return build_ledger(circle, ledger_regions("circle2d"))


@pytest.fixture(scope="module")
def quad_ledger():
    return build_ledger(get_potential("quadratic"), ledger_regions("quadratic"))


def manual(**kw):
    base = dict(nu=0.75, nu_eb=2.0, C_g=1.0, R0=2.0, R1=0.25, delta0=0.5, g0=0.1875, L=2.0, M_Delta=4.0,
                mu_minus=1.0, d=2, k=1)
    base.update(kw)
    return ConstantsLedger(**base)


def test_circle_ledger_inputs(circle_ledger):
    led = circle_ledger
    expected = dict(nu=0.75, nu_eb=2.0, C_g=1.0, R0=2.0, delta0=0.5, R1=0.25, g0=0.1875, L=2.0, M_Delta=4.0, mu_minus=1.0)
    for name, value in expected.items():
        assert getattr(led, name) == pytest.approx(value, rel=1e-9), name


def test_circle_ledger_derived(circle_ledger):
    led = circle_ledger
    assert led.C == pytest.approx(16 / 0.5625, rel=1e-9)
    assert led.C_bar == pytest.approx(227.5556, abs=1e-4)
    # (1/4)(2/6) e^{-227.5556}
    assert led.log_C_P == pytest.approx(np.log(1 / 12) - 2048 / 9, rel=1e-9)
    assert led.log10_C_P == pytest.approx(-99.905, abs=1e-3)
    assert led.C_P == pytest.approx(np.exp(led.log_C_P), rel=1e-9)


def test_ledger_deterministic():
    a = build_ledger(circle, ledger_regions("circle2d"))
    b = build_ledger(circle, ledger_regions("circle2d"))
    assert a == b
    assert a.to_json(sort_keys=True) == b.to_json(sort_keys=True)


def test_ledger_json_carries_formulas(circle_ledger):
    d = json.loads(circle_ledger.to_json())
    assert d["C"] == pytest.approx(28.4444, abs=1e-4)
    assert "C_P" in d["formulas"]
    assert {"nu", "nu_eb", "L", "M_Delta"} <= set(d["provenance"])


def test_quadratic_ledger(quad_ledger):
    led = quad_ledger
    assert led.nu == pytest.approx(2.0)
    assert led.M_Delta == pytest.approx(2.0)
    assert led.L == pytest.approx(1.0)
    assert led.C == pytest.approx(2.0)
    assert led.C_bar == pytest.approx(8.0)
    assert np.exp(-led.C_bar) == pytest.approx(3.3546e-4, rel=1e-4)
    bounds = epsilon_bounds(led)
    assert min(bounds, key=bounds.get) == "g0^2/(4 M_Delta)"


def test_soft_ring_ledger_is_mild():
    led = build_ledger(get_potential("ring2d_soft"), ledger_regions("ring2d_soft"))
    assert led.C_bar <= 5


def test_failed_certificate_names_assumption():
    # N(S) reaching the local maximum at the origin breaks the PL condition
    regions = dataclasses.replace(ledger_regions("circle2d"), n_s=RegionSpec.ball(1.5, 2))
    with pytest.raises(LedgerError, match="PL"):
        build_ledger(circle, regions)


def test_unknown_regions():
    with pytest.raises(KeyError):
        ledger_regions("torus3d")


def test_nonpositive_input_rejected():
    with pytest.raises(LedgerError):
        manual(nu=0.0)


def test_mu_minus_clipped_to_laplacian_bound():
    led = manual(mu_minus=5.0)
    assert led.mu_minus == pytest.approx(2.0)


def test_sigma_b_example(circle_ledger):
    sb = sigma_b(circle_ledger, 0.001)
    assert sb.sigma == pytest.approx(1000.0)
    assert sb.b == pytest.approx(3000.0)
    assert sb.branch.startswith("curvature")
    sigma, b = sb
    assert (sigma, b) == (sb.sigma, sb.b)


def test_sigma_b_branches_agree_at_crossing():
    led = manual()
    assert led.eps_star == pytest.approx(0.125)
    s = led.eps_star
    outer = led.nu_eb**2 * led.R0**2 / (128 * s**2)
    inner = led.d * led.mu_minus / (2 * s)
    assert abs(outer - inner) <= 1e-12 * inner
    assert sigma_b(led, s, check=False).sigma == pytest.approx(inner, rel=1e-12)


def test_sigma_b_infinite_error_bound():
    led = manual(nu_eb=np.inf)
    assert led.eps_star == np.inf
    for eps in (1e-4, 0.05, 10.0):
        assert sigma_b(led, eps, check=False).sigma == pytest.approx(led.d * led.mu_minus / (2 * eps))


def test_sigma_b_rejects_hot_temperature(circle_ledger):
    with pytest.raises(ThresholdError, match="g0"):
        sigma_b(circle_ledger, 0.01)


def test_epsilon_threshold_examples(circle_ledger):
    b = epsilon_bounds(circle_ledger)
    assert b["nu_eb^2/(64 C_g)"] == pytest.approx(0.0625)
    assert b["delta0^2/C"] == pytest.approx(0.008789, abs=1e-6)
    assert b["g0^2/(4 M_Delta)"] == pytest.approx(0.002197, abs=1e-6)
    assert epsilon_threshold(circle_ledger) == pytest.approx(0.03515625 / 16)


def test_epsilon_threshold_geometric_terms(circle_ledger):
    base = epsilon_threshold(circle_ledger)
    assert epsilon_threshold(circle_ledger, reach=1.0, B=0.05) == pytest.approx(base)
    assert epsilon_threshold(circle_ledger, reach=1.0, B=5.0) == pytest.approx(1 / 100 / circle_ledger.C)


@given(st.floats(1e-6, 0.5), st.floats(1e-6, 0.5))
def test_threshold_monotone_in_delta0(a, b):
    lo, hi = sorted((a, b))
    assert epsilon_threshold(manual(delta0=lo)) <= epsilon_threshold(manual(delta0=hi))


def test_threshold_vanishes_with_delta0():
    assert epsilon_threshold(manual(delta0=1e-9)) < 1e-18


def test_lyapunov_single_point_example(circle_ledger):
    eps = 0.001
    x = np.array([[5.0, 0.0]])
    lhs = circle.laplacian(x)[0] / (2 * eps) - np.sum(circle.gradient(x) ** 2) / (4 * eps**2)
    # Lap V = 3r - 2 = 13, |grad V| = r(r - 1) = 20
    assert lhs == pytest.approx(13 / (2 * eps) - 400 / (4 * eps**2))
    assert lhs == pytest.approx(6500 - 1e8)
    assert lhs <= -sigma_b(circle_ledger, eps).sigma


def test_lyapunov_grid_circle(circle_ledger):
    rep = verify_lyapunov(circle, circle_ledger, 0.001, h=0.01)
    assert rep.grid["radius"] == pytest.approx(8.0)
    assert rep.violation_count == 0
    assert rep.passed
    assert rep.worst_margin >= -1e-9
    assert rep.violations_csv().splitlines() == ["x0,x1,lhs,rhs,margin"]


def test_lyapunov_counts_violations_exactly(circle_ledger):
    # an inflated sigma breaks the inequality near S, outside U
    led = manual(mu_minus=2.0, M_Delta=4.0)
    rep = verify_lyapunov(circle, led, 0.001, h=0.05, check_eps=False)
    assert rep.violation_count > 0
    assert rep.violation_count == len(rep.violations)
    assert np.all(rep.violations[:, -1] < 0)
    assert len(rep.violations_csv().splitlines()) == rep.violation_count + 1


def test_lyapunov_margin_tightens_as_eps_falls(circle_ledger):
    # outside U the -|grad V|^2 / (4 eps^2) term dominates
    pts = np.array([[2.0, 0.0], [0.0, 3.0], [1.5, 1.5], [-4.0, 0.5]])
    g2 = np.sum(circle.gradient(pts) ** 2, axis=-1)
    prev = None
    for eps in (0.002, 0.001, 5e-4, 2.5e-4):
        sb = sigma_b(circle_ledger, eps)
        lhs = circle.laplacian(pts) / (2 * eps) - g2 / (4 * eps**2)
        margin = -sb.sigma - lhs
        if prev is not None:
            assert np.all(margin > prev)
        prev = margin


def test_lyapunov_inside_U_holds_by_construction(circle_ledger):
    eps = 0.001
    sb = sigma_b(circle_ledger, eps)
    r = 1 + np.linspace(-1, 1, 41) * circle_ledger.tube_radius(eps)
    pts = np.column_stack([r, np.zeros_like(r)])
    lhs = circle.laplacian(pts) / (2 * eps)
    assert np.all(lhs <= -sb.sigma + sb.b)


def test_combine_examples():
    assert combine_lyapunov_pi(1, 1, 1) == pytest.approx(0.5)
    assert combine_lyapunov_pi(100, 300, 1) == pytest.approx(100 / 301)
    assert combine_lyapunov_pi(7.0, 30.0, np.inf) == 7.0
    assert combine_lyapunov_pi(7.0, 30.0, 1e15) == pytest.approx(7.0)


positive = st.floats(1e-3, 1e3)


@given(positive, positive, positive, st.floats(1.01, 10.0), st.integers(0, 2))
def test_combine_monotone(s, b, r, factor, which):
    args = [s, b, r]
    bumped = list(args)
    bumped[which] *= factor
    lo, hi = combine_lyapunov_pi(*args), combine_lyapunov_pi(*bumped)
    if which == 1:
        # larger b weakens the bound
        assert hi <= lo
    else:
        assert hi >= lo


def test_holley_stroock_examples():
    assert holley_stroock(3.0, 0.0, 0.01) == 3.0
    assert holley_stroock(1.0, 0.02, 0.02) == pytest.approx(np.exp(-1))
    assert log_holley_stroock(0.0, 0.5, 0.1) == pytest.approx(-5.0)
    with pytest.raises(ValueError):
        holley_stroock(1.0, -1.0, 0.1)


def test_oscillation_budget_is_temperature_free(circle_ledger):
    for eps in (0.002, 0.001):
        osc = tube_oscillation(circle, circle_ledger, eps)
        assert osc["budget"] / eps == pytest.approx(circle_ledger.C_bar)
        assert osc["direct"] <= osc["budget"]
        assert osc["used"] == osc["direct"]


def test_final_bound_circle(circle_ledger):
    fb = final_bound(circle_ledger, 0.001, lambda_U=1.0, lambda_S=1.0, reach=1.0, B=0.1)
    assert fb.log_bound_S == pytest.approx(circle_ledger.log_C_P)
    assert fb.log10_bound_S == pytest.approx(-99.905, abs=1e-3)
    assert fb.log_bound_U == pytest.approx(np.log(0.5 / 3) - circle_ledger.C_bar)
    names = [n for n, _ in fb.factors]
    assert "exp(-C_bar)" in names
    json.dumps(fb.to_dict())


def test_final_bound_refusals(circle_ledger):
    with pytest.raises(BoundRefused):
        final_bound(circle_ledger, 0.01, lambda_U=1.0)
    with pytest.raises(BoundRefused, match="reach"):
        final_bound(circle_ledger, 0.001, lambda_S=1.0)
    with pytest.raises(BoundRefused):
        final_bound(circle_ledger, 0.001, lambda_S=1.0, reach=1.0, B=50.0)
    with pytest.raises(BoundRefused):
        final_bound(circle_ledger, 0.001, lambda_U=-1.0)
    with pytest.raises(ValueError):
        final_bound(circle_ledger, 0.001)


def test_final_bound_zero_eigenvalue(circle_ledger):
    fb = final_bound(circle_ledger, 0.001, lambda_U=0.0)
    assert fb.log_bound_U == -np.inf


@pytest.mark.parametrize("eps", [0.002, 0.001])
def test_measured_rho_exceeds_bound(circle_ledger, eps):
    rho = generator_spectrum(circle, eps, np.sqrt(eps) / 8).rho
    fb = final_bound(circle_ledger, eps, lambda_U=1.0, lambda_S=1.0, reach=1.0, B=0.1)
    assert np.log(rho) >= fb.log_bound_S
    assert np.log(rho) >= fb.log_bound_U


def test_chain_bound_with_direct_oscillation(circle_ledger):
    eps = 0.001
    osc = tube_oscillation(circle, circle_ledger, eps)["direct"]
    log_b = chain_bound(circle_ledger, eps, 1.0, osc)
    sb = sigma_b(circle_ledger, eps)
    rho_U = np.exp(-osc / eps)
    assert log_b == pytest.approx(np.log(combine_lyapunov_pi(sb.sigma, sb.b, rho_U)))
