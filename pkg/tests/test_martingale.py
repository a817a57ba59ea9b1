import math

import numpy as np
import pytest
from scipy import integrate

from homogenization.errors import BoundaryPoint, DomainViolation, NotInHyperplane, PreconditionViolated
from homogenization.martingale import (F, G, MONTE_CARLO, J_alpha, MartingaleIntegrator, chart_H, chart_J,
                                       chart_K, deviation_bound_check, deviation_constants, flow, harmonic_g,
                                       harmonic_h, harmonicity_residual, identity_suite, in_domain,
                                       in_hyperplane, integrability_bound, martingale_constancy, potential0,
                                       potential0_many, primitive, psi, psi_jacobian, psi_map, psi_map_inverse,
                                       random_domain_point)
from homogenization.spectral import semigroup
from homogenization.state import NetworkParams
from homogenization.utils import RngStream


def test_flow_preserves_hyperplane(cycle):
    v = np.array([1.0, -0.5, -0.5])
    assert in_hyperplane(cycle, v)
    assert in_hyperplane(cycle, flow(cycle, v, 1.3))
    np.testing.assert_allclose(flow(cycle, flow(cycle, v, 0.4), 0.6), flow(cycle, v, 1.0), atol=1e-12)


def test_domain_needs_hyperplane(symmetric):
    with pytest.raises(NotInHyperplane):
        in_domain(symmetric, [1.0, 1.0], 0.0)
    assert in_domain(symmetric, [0.5, -0.5], 0.0)
    # phi(v, t) = e^{2t} v grows until 1 + phi leaves the positive orthant
    assert not in_domain(symmetric, [0.5, -0.5], 1.0)


def test_closed_form_potential_matches_quadrature(lopsided):
    params = NetworkParams([0.3, 0.9], [1.2, 0.4])
    rng = np.random.default_rng(3)
    for _ in range(5):
        v = random_domain_point(lopsided, 0.0, rng, margin=0.8)
        assert potential0(lopsided, params, v, closed_form=True) == pytest.approx(
            potential0(lopsided, params, v, closed_form=False), abs=1e-8)


def test_closed_form_needs_two_nodes(cycle, subcritical3):
    with pytest.raises(PreconditionViolated):
        potential0(cycle, subcritical3, [0.2, -0.1, -0.1], closed_form=True)


def test_potential_outside_domain(symmetric, subcritical2):
    with pytest.raises(DomainViolation):
        potential0(symmetric, subcritical2, [1.5, -1.5])


def test_potential_many_agrees(cycle, subcritical3):
    rng = np.random.default_rng(8)
    V = np.vstack([random_domain_point(cycle, 0.0, rng) for _ in range(4)])
    values, err = potential0_many(cycle, subcritical3, V)
    for v, value in zip(V, values):
        assert value == pytest.approx(potential0(cycle, subcritical3, v), abs=1e-7)
    assert err < 1e-6


def test_primitive_starts_at_potential(cycle, subcritical3):
    v = random_domain_point(cycle, 0.0, np.random.default_rng(1))
    assert primitive(cycle, subcritical3, v, 0.0) == pytest.approx(potential0(cycle, subcritical3, v), abs=1e-12)


def test_mm1_reduction(cycle, subcritical3):
    u, t = 0.6, 0.7
    x = np.array([2, 1, 3])
    lam, mu = subcritical3.lam, subcritical3.mu
    exact = u ** 6 * math.exp((lam * (1 - u) + mu * (1 - 1 / u)) * t)
    assert harmonic_h(cycle, subcritical3, (u - 1.0) * np.ones(3), t, x) == pytest.approx(exact, rel=1e-8)


def test_harmonicity(cycle, subcritical3):
    rng = np.random.default_rng(4)
    for _ in range(3):
        t = rng.uniform(0.0, 1.0)
        v = random_domain_point(cycle, t, rng)
        x = rng.integers(1, 4, size=3)
        assert harmonicity_residual(cycle, subcritical3, v, t, x) < 1e-6


def test_psi_equivariance(random_spectral):
    S = random_spectral(4, seed=9)
    w = np.array([0.3, -1.0, 0.4, 0.2])
    for t in (-1.0, 0.5, 2.0):
        assert psi(S, semigroup(S, t) @ w) == pytest.approx(math.exp(-S.theta * t) * psi(S, w), rel=1e-10)


def test_chart_maps(cycle):
    u = np.array([0.2, 0.5])
    assert cycle.pi @ chart_H(cycle, u) == pytest.approx(0.0, abs=1e-15)
    assert chart_K(u).sum() == pytest.approx(1.0)
    np.testing.assert_allclose(chart_J(chart_K(u)), u)
    for t in (0.0, 0.8):
        np.testing.assert_allclose(psi_map(cycle, psi_map_inverse(cycle, u, t), t), u, atol=1e-12)
        expected = math.exp(cycle.theta * t) * float(np.prod(cycle.pi[:-1]))
        assert psi_jacobian(cycle, t) == pytest.approx(expected, rel=1e-9)


def test_F_and_G_at_pi(cycle, subcritical3):
    assert F(cycle, cycle.pi) == pytest.approx(0.0, abs=1e-12)
    assert G(cycle, subcritical3, cycle.pi) == pytest.approx(1.0, abs=1e-12)
    with pytest.raises(BoundaryPoint):
        G(cycle, subcritical3, [1.0, 0.0, 0.0])


@pytest.mark.parametrize("n", [2, 3, 4])
def test_unit_alpha_integral(n, random_spectral):
    S = random_spectral(n, seed=12)
    still = NetworkParams(np.zeros(n), np.zeros(n))
    value, _ = MartingaleIntegrator(S, still, 1.0, samples=20000).integral(np.zeros(n, dtype=int))
    assert value == pytest.approx(1.0 / math.factorial(n - 1), rel=1e-10)


def test_two_node_integral_against_scipy(lopsided):
    still = NetworkParams([0.0, 0.0], [0.0, 0.0])
    alpha, x = 0.5, np.array([1, 2])
    p1, p2 = lopsided.pi

    def f(u):
        return (u / p1) ** x[0] * ((1.0 - u) / p2) ** x[1] * F(lopsided, [u, 1.0 - u]) ** (alpha - 1.0)

    reference = integrate.quad(f, 0.0, p1, epsabs=1e-13, epsrel=1e-10, limit=200)[0] + \
        integrate.quad(f, p1, 1.0, epsabs=1e-13, epsrel=1e-10, limit=200)[0]
    value = J_alpha(lopsided, still, x, 0.0, alpha, rtol=1e-8).value
    assert value == pytest.approx(reference, rel=1e-6)


def test_product_and_entropy_forms_agree(cycle, subcritical3):
    integrator = MartingaleIntegrator(cycle, subcritical3, 0.5)
    x = np.array([3, 1, 2])
    product, _ = integrator.integral(x, "product")
    entropic, _ = integrator.integral(x, "entropy")
    assert entropic == pytest.approx(product, rel=1e-9)


def test_evaluate_applies_decay(symmetric, subcritical2):
    integrator = MartingaleIntegrator(symmetric, subcritical2, 0.5)
    at0 = integrator.evaluate([2, 1], 0.0)
    at1 = integrator.evaluate([2, 1], 1.0)
    assert at1.value == pytest.approx(at0.value * math.exp(-0.5 * symmetric.theta), rel=1e-12)
    assert at0.value > 0 and at0.method == "tensor-quadrature"


def test_monte_carlo_method_close_to_quadrature(cycle, subcritical3):
    x = np.array([1, 1, 1])
    exact = J_alpha(cycle, subcritical3, x, 0.0, 0.7).value
    mc = J_alpha(cycle, subcritical3, x, 0.0, 0.7, method=MONTE_CARLO, samples=60000, rng=RngStream(5))
    assert mc.method == MONTE_CARLO
    assert abs(mc.value - exact) <= max(5.0 * mc.error, 1e-2 * exact)


def test_harmonic_g_matches_J(lopsided):
    params = NetworkParams([0.2, 0.4], [0.5, 0.7])
    x = np.array([2, 1])
    g = harmonic_g(lopsided, params, 0.3, x, 0.5)
    J = J_alpha(lopsided, params, x, 0.3, 0.5).value
    assert g * lopsided.pi[0] == pytest.approx(J, rel=1e-5)


def test_integrability_bound_two_nodes(symmetric):
    report = integrability_bound(symmetric, [0.3, 1.0])
    assert not report.diverging
    assert report.rows[1]["value"] == pytest.approx(1.0, rel=1e-12)
    assert report.sup >= report.rows[0]["refined"]


@pytest.mark.parametrize("kind", ["symmetric", "cycle"])
def test_identity_suite_passes(kind, request, stream):
    S = request.getfixturevalue(kind)
    params = NetworkParams(np.full(S.n, 0.5 / S.n), np.full(S.n, 1.0 / S.n))
    report = identity_suite(S, params, stream, samples=5, g_samples=3)
    failed = [row for row in report.rows if not row["passed"]]
    assert not failed, failed
    points = {row["check"]: row["points"] for row in report.rows}
    assert points["mm1_reduction"] == points["harmonicity"] == 5
    if S.n == 2:
        assert points["g_harmonicity"] == points["g_versus_J"] == 3
        assert points["closed_form_potential"] == 5
    else:
        assert "g_versus_J" not in points


def test_martingale_constancy_small(symmetric, subcritical2, stream):
    report = martingale_constancy(symmetric, subcritical2, [3, 3], 0.5, [0.0, 0.5], 300, stream, sigmas=4.0)
    assert [row["t"] for row in report.rows] == [0.0, 0.5]
    assert report.rows[0]["se"] == 0.0
    assert report.passed


def test_deviation_constants_positive(symmetric, subcritical2):
    constants = deviation_constants(symmetric, subcritical2, 0.01, grid_step=0.02)
    assert constants["C3"] == pytest.approx(constants["sup_G"] * constants["integrability_sup"], rel=1e-12)
    assert constants["B_delta"] > 0
    assert math.isfinite(constants["C_delta"]) and constants["C_delta"] > 0
    assert constants["beta"] <= 1.0


def test_deviation_bound_preconditions(symmetric, subcritical2, stream):
    with pytest.raises(PreconditionViolated):
        deviation_bound_check(symmetric, subcritical2, [5, 5], 0.05, 0.01, [0.5], [2], 10, stream)
    with pytest.raises(PreconditionViolated):
        deviation_bound_check(symmetric, subcritical2, [5, 5], 0.03, 0.01, [1.0], [2], 10, stream)


def test_deviation_bound_report_shape(symmetric, subcritical2, stream):
    constants = deviation_constants(symmetric, subcritical2, 0.01, grid_step=0.02)
    report = deviation_bound_check(symmetric, subcritical2, [5, 5], 0.03, 0.01, [0.3, 0.7], [2, 4], 50, stream,
                                   horizon=10.0, constants=constants)
    assert len(report.rows) == 4
    assert len(report.decay) == 2
    assert all(r["bound"] > 0 for r in report.rows)
    assert 0 <= report.censored <= 50


@pytest.fixture
def four_nodes(random_spectral):
    S = random_spectral(4, seed=3)
    return S, NetworkParams(np.full(4, 0.1), np.full(4, 0.3))


def test_four_node_J_alpha_is_sampled(four_nodes):
    S, params = four_nodes
    x = np.array([1, 2, 0, 1])
    first = J_alpha(S, params, x, 0.0, 0.8, samples=20000, rng=RngStream(1))
    second = J_alpha(S, params, x, 0.0, 0.8, samples=20000, rng=RngStream(2))
    later = J_alpha(S, params, x, 1.0, 0.8, samples=20000, rng=RngStream(1))
    assert first.method == MONTE_CARLO
    assert first.value > 0 and 0 < first.error < first.value
    assert abs(first.value - second.value) <= 5.0 * math.hypot(first.error, second.error)
    assert later.value == pytest.approx(first.value * math.exp(-0.8 * S.theta), rel=1e-12)


def test_four_node_integrability_bound(four_nodes):
    S, _ = four_nodes
    report = integrability_bound(S, [0.8, 1.0], samples=20000, rng=RngStream(4))
    assert not report.diverging
    assert report.rows[1]["value"] == pytest.approx(1.0 / 6.0, rel=1e-10)
    assert report.rows[1]["refined"] == pytest.approx(1.0 / 6.0, rel=1e-10)
    assert math.isfinite(report.sup) and report.sup >= report.rows[0]["refined"]


def test_four_node_deviation_constants(four_nodes):
    S, params = four_nodes
    constants = deviation_constants(S, params, 0.5, grid_step=0.1, alpha_grid=[0.8, 1.0], samples=20000)
    assert not constants["integrability_diverging"]
    assert constants["C3"] == pytest.approx(constants["sup_G"] * constants["integrability_sup"], rel=1e-12)
    assert constants["B_delta"] > 0
    assert math.isfinite(constants["C_delta"]) and constants["C_delta"] > 0
