import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import integrate

from poincare_lab.manifold import (
    MANIFOLDS,
    Circle,
    EmbeddingError,
    ReachError,
    Sphere,
    TubularNeighborhood,
    ambient_shell_integral,
    get_manifold,
    metric_at,
    pushforward_gradient,
    reach_estimate,
    second_fundamental_at,
    tube_integrate,
    tube_point,
    weyl_density,
)

CATALOG = sorted(MANIFOLDS)


def _random_params(mf, n, seed=0):
    rng = np.random.default_rng(seed)
    lo, hi = np.array(mf.lower), np.array(mf.upper)
    # keep away from chart singularities on closed coordinates
    pad = np.where(mf.periodic, 0.0, 0.02 * (hi - lo))
    return rng.uniform(lo + pad, hi - pad, size=(n, mf.k))


@pytest.mark.parametrize("name", CATALOG)
def test_frame_orthonormal_at_random_points(name):
    mf = get_manifold(name)
    U = _random_params(mf, 1000)
    T = mf.tangents(U)
    N = mf.normals(U)
    assert np.max(np.abs(np.einsum("nid,nld->nil", T, N))) <= 1e-10
    gram = np.einsum("nid,njd->nij", N, N)
    assert np.max(np.abs(gram - np.eye(mf.d - mf.k))) <= 1e-10


@pytest.mark.parametrize("name", CATALOG)
def test_metric_analytic_matches_finite_difference(name):
    mf = get_manifold(name)
    for u in _random_params(mf, 20, seed=1):
        a = metric_at(mf, u)
        b = metric_at(mf, u, method="fd")
        np.testing.assert_allclose(a.g, b.g, atol=1e-6)
        np.testing.assert_allclose(a.g @ a.g_inv, np.eye(mf.k), atol=1e-10)
        assert a.det_g > 0
        sf = second_fundamental_at(mf, u)
        for Gl in sf.G:
            np.testing.assert_allclose(Gl, Gl.T, atol=1e-10)


def test_metric_examples():
    assert metric_at(Circle(1.0), [0.3]).g == pytest.approx(np.array([[1.0]]))
    assert metric_at(Circle(2.0), [1.2]).g == pytest.approx(np.array([[4.0]]))
    th = 0.7
    np.testing.assert_allclose(metric_at(Sphere(), [th, 2.0]).g, np.diag([1.0, np.sin(th) ** 2]), atol=1e-14)


def test_rank_drop_rejected():
    with pytest.raises(EmbeddingError):
        metric_at(Sphere(), [0.0, 1.0])


def test_second_fundamental_examples():
    for R in (1.0, 2.0, 0.5):
        sf = second_fundamental_at(Circle(R), [0.4])
        np.testing.assert_allclose(sf.G_tilde, [[[1 / R]]])
        assert sf.sup_norm == pytest.approx(1 / R)
    np.testing.assert_allclose(second_fundamental_at(Sphere(), [1.1, 0.3]).G_tilde[0], np.eye(2), atol=1e-12)
    np.testing.assert_allclose(second_fundamental_at(get_manifold("segment"), [0.5]).G_tilde, [[[0.0]]])


def test_torus_principal_curvatures():
    t = get_manifold("torus")
    tt = 0.9
    sf = second_fundamental_at(t, [0.2, tt])
    w = t.R + t.a * np.cos(tt)
    np.testing.assert_allclose(sorted(np.linalg.eigvals(sf.G_tilde[0]).real), sorted([np.cos(tt) / w, 1 / t.a]))


def test_tube_point_examples():
    tube = TubularNeighborhood.build(Circle(), 0.2)
    np.testing.assert_allclose(tube_point(tube, [0.0], 0.1), [1.1, 0.0])
    np.testing.assert_allclose(tube_point(tube, [np.pi / 2], -0.1), [0.0, 0.9], atol=1e-15)
    stube = TubularNeighborhood.build(Sphere(), 0.1)
    y = tube_point(stube, [1e-3, 0.0], 0.05)
    assert np.linalg.norm(y) == pytest.approx(1.05)
    np.testing.assert_allclose(y / 1.05, Sphere().embed([1e-3, 0.0]))


def test_tube_offsets_beyond_radius_rejected():
    tube = TubularNeighborhood.build(Circle(), 0.1)
    with pytest.raises(ReachError):
        tube_point(tube, [0.0], 0.2)
    with pytest.raises(ReachError):
        TubularNeighborhood.build(Circle(), 1.5)


@given(st.floats(0, 2 * np.pi), st.floats(-0.5, 0.5))
def test_tube_coordinates_recover_distance(theta, r):
    tube = TubularNeighborhood.build(Circle(), 0.5)
    y = tube_point(tube, [theta], r)
    assert abs(Circle().distance(y)[0] - abs(r)) <= 1e-10


def test_weyl_density_examples():
    assert weyl_density(Circle(), [1.3], 0.2) == pytest.approx(1.2)
    assert weyl_density(Circle(), [4.0], -0.3) == pytest.approx(0.7)
    assert weyl_density(Sphere(), [0.8, 1.0], 0.1) == pytest.approx(1.21)
    assert weyl_density(get_manifold("segment"), [0.3], 0.4) == 1.0
    with pytest.raises(ReachError):
        weyl_density(Circle(), [0.0], -1.0)


@pytest.mark.parametrize("name", CATALOG)
def test_weyl_density_is_one_on_the_manifold(name):
    mf = get_manifold(name)
    for u in _random_params(mf, 10, seed=2):
        assert weyl_density(mf, u, np.zeros(mf.d - mf.k)) == 1.0


def test_tube_integral_examples():
    tube = TubularNeighborhood.build(Circle(), 0.1)
    one = tube_integrate(tube, lambda y: np.ones(len(y)))
    assert one.value == pytest.approx(0.4 * np.pi, abs=1e-10)
    assert one.converged
    sq = tube_integrate(tube, lambda y: np.sum(y**2, axis=-1)).value
    ref = 2 * np.pi * integrate.quad(lambda r: r**3, 0.9, 1.1)[0]
    assert sq == pytest.approx(ref, rel=1e-12)
    assert sq == pytest.approx(1.269203, abs=1e-6)
    shell = tube_integrate(TubularNeighborhood.build(Sphere(), 0.1), lambda y: np.ones(len(y)), 96, 16).value
    assert shell == pytest.approx(4 * np.pi / 3 * (1.1**3 - 0.9**3), rel=1e-9)
    assert shell == pytest.approx(2.521652, abs=1e-6)


def test_tube_record_is_json():
    tube = TubularNeighborhood.build(Circle(), 0.1)
    rec = tube_integrate(tube, lambda y: np.ones(len(y))).to_record("circle", 0.1, "one")
    back = json.loads(json.dumps(rec))
    assert set(back) == {"manifold", "radius", "integrand", "value", "refinement_delta"}


INTEGRANDS = {
    "exp_x0": lambda y: np.exp(y[:, 0]),
    "cos_mix": lambda y: np.cos(2 * y[:, 0] + y[:, 1]) + y[:, -1] ** 2,
}


@pytest.mark.parametrize("name", sorted(INTEGRANDS))
def test_tube_integral_matches_ambient_quadrature_circle(name):
    phi = INTEGRANDS[name]
    tube = TubularNeighborhood.build(Circle(), 0.1)
    got = tube_integrate(tube, phi).value
    ref = ambient_shell_integral(Circle(), 0.1, phi, n=96)
    assert got == pytest.approx(ref, rel=1e-6)


def test_ambient_reference_checks_against_polar_quadrature():
    # independent of both implementations: scipy dblquad in polar coordinates
    phi = INTEGRANDS["cos_mix"]
    ref = integrate.dblquad(
        lambda r, t: r * phi(np.array([[r * np.cos(t), r * np.sin(t)]]))[0],
        0, 2 * np.pi, 0.9, 1.1, epsabs=1e-13, epsrel=1e-12,
    )[0]
    assert ambient_shell_integral(Circle(), 0.1, phi, n=64) == pytest.approx(ref, rel=1e-9)


def test_tube_integral_matches_ambient_quadrature_sphere():
    phi = INTEGRANDS["exp_x0"]
    got = tube_integrate(TubularNeighborhood.build(Sphere(), 0.1), phi, 64, 16).value
    ref = ambient_shell_integral(Sphere(), 0.1, phi, n=32)
    assert got == pytest.approx(ref, rel=1e-6)


def test_ambient_reference_unsupported_manifold():
    with pytest.raises(NotImplementedError):
        ambient_shell_integral(get_manifold("torus"), 0.1, lambda y: y[:, 0])


def test_pushforward_examples():
    tube = TubularNeighborhood.build(Circle(), 0.2)
    np.testing.assert_allclose(pushforward_gradient(tube, lambda y: y[0], [0.0], 0.0), [0.0, 1.0], atol=1e-9)
    np.testing.assert_allclose(pushforward_gradient(tube, lambda y: y[1], [0.0], 0.1), [1.1, 0.0], atol=1e-9)
    g = pushforward_gradient(tube, lambda y: y @ y, [2.3], -0.15, grad_phi=lambda y: 2 * y)
    np.testing.assert_allclose(g, [0.0, 2 * 0.85], atol=1e-12)


def _fd_tube_gradient(tube, phi, u, r, h=1e-6):
    k = len(u)
    z0 = np.concatenate([u, r])
    out = np.empty(len(z0))
    for i in range(len(z0)):
        e = np.zeros(len(z0))
        e[i] = h
        zp, zm = z0 + e, z0 - e
        out[i] = (phi(tube_point(tube, zp[:k], zp[k:])) - phi(tube_point(tube, zm[:k], zm[k:]))) / (2 * h)
    return out


@pytest.mark.parametrize("name", ["circle", "circleR", "sphere", "torus"])
@given(st.floats(0.1, 0.9), st.floats(0.1, 0.9), st.floats(-0.8, 0.8), st.integers(0, 2))
def test_pushforward_matches_finite_differences(name, a, b, s, which):
    mf = get_manifold(name)
    radius = 0.5 * mf.reach
    tube = TubularNeighborhood.build(mf, radius)
    lo, hi = np.array(mf.lower), np.array(mf.upper)
    u = lo + (hi - lo) * np.array([a, b][: mf.k])
    r = np.array([s * radius * 0.9])
    phis = [
        (lambda y: np.exp(0.3 * y[0]) * np.cos(y[1]), None),
        (lambda y: y @ y + y[0] * y[-1], lambda y: 2 * y + np.eye(len(y))[0] * y[-1] + np.eye(len(y))[-1] * y[0]),
        (lambda y: np.sin(y[0] + 2 * y[-1]), None),
    ]
    phi, grad = phis[which]
    got = pushforward_gradient(tube, phi, u, r, grad_phi=grad)
    ref = _fd_tube_gradient(tube, phi, u, r)
    scale = max(np.linalg.norm(ref), 1.0)
    np.testing.assert_allclose(got, ref, rtol=1e-6, atol=1e-6 * scale)


@pytest.mark.parametrize("mf,expected", [(Circle(1.0), 1.0), (Circle(2.0), 2.0), (Sphere(), 1.0)])
def test_reach_examples(mf, expected):
    assert reach_estimate(mf) == pytest.approx(expected, rel=1e-6)


def test_reach_torus_is_tube_radius():
    assert reach_estimate(get_manifold("torus")) == pytest.approx(0.5, rel=1e-6)


def test_unknown_manifold():
    with pytest.raises(KeyError, match="unknown manifold"):
        get_manifold("klein")
