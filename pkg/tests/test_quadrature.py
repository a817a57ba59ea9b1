import math

import numpy as np
import pytest

from homogenization.errors import PreconditionViolated, QuadratureDivergence
from homogenization.martingale import F, integral_F, singular_chart
from homogenization.quadrature import (_segment_rule, fan_monte_carlo, fan_rule, jacobi_interval, refine,
                                       stratified_estimate)


def test_jacobi_interval_plain_and_weighted():
    s, w = jacobi_interval(8, 0.0, 2.0, 0.0, 0.0)
    assert math.fsum(w * s ** 2) == pytest.approx(8.0 / 3.0, rel=1e-13)
    s, w = jacobi_interval(8, 0.0, 1.0, 0.5, 0.0)
    assert math.fsum(w) == pytest.approx(2.0 / 3.0, rel=1e-13)
    assert np.all((s > 0.0) & (s < 1.0))


@pytest.mark.parametrize("n", [2, 3])
def test_fan_rule_area(n, random_spectral):
    S = random_spectral(n, seed=n)
    rule = fan_rule(singular_chart(S), 1.0, 1)
    assert math.fsum(rule.weights) == pytest.approx(1.0 / math.factorial(n - 1), rel=1e-12)
    assert np.all(rule.points > 0)
    assert np.all(rule.points.sum(axis=1) < 1.0)


def test_fan_rule_stops_at_three_nodes(random_spectral):
    with pytest.raises(PreconditionViolated):
        fan_rule(singular_chart(random_spectral(4, seed=4)), 0.5, 0)


@pytest.mark.parametrize("a, b, expected", [
    ([0.0], [1.0], 2.0),
    ([1.0], [-1.0], 2.0),
    ([0.0, 1.0], [1.0, -1.0], math.pi),
    ([1e-14, 1.0], [1.0, -1.0], math.pi),
])
def test_segment_rule_keeps_endpoint_singularities(a, b, expected):
    # int_0^1 of s^-1/2, (1 - s)^-1/2 and their product
    nodes, weights = _segment_rule(np.array(a), np.array(b), 0.5, 8)
    assert math.fsum(weights) == pytest.approx(expected, rel=1e-10)
    assert np.all((nodes > 0.0) & (nodes < 1.0))


@pytest.mark.parametrize("alpha", [0.2, 0.5, 0.9])
def test_two_node_integral_is_exact(lopsided, alpha):
    # F is m |u - pi_1| along the segment, so the integral is m^(alpha-1) (pi_1^alpha + pi_2^alpha) / alpha
    p1, p2 = lopsided.pi
    m = F(lopsided, [1.0, 0.0]) / p2
    expected = m ** (alpha - 1.0) * (p1 ** alpha + p2 ** alpha) / alpha
    assert integral_F(lopsided, alpha, level=2) == pytest.approx(expected, rel=1e-11)


def test_three_node_integral_stable(random_spectral):
    S = random_spectral(3, seed=5)
    coarse, fine = integral_F(S, 0.5, level=3), integral_F(S, 0.5, level=4)
    assert abs(fine - coarse) <= 1e-2 * abs(fine)


def test_monte_carlo_area_is_exact(random_spectral):
    S = random_spectral(3, seed=1)
    points, weights, strata = fan_monte_carlo(singular_chart(S), 1.0, 3000, np.random.default_rng(0))
    total, se = stratified_estimate(weights, strata)
    assert total == pytest.approx(0.5, rel=1e-12)
    assert se == pytest.approx(0.0, abs=1e-12)
    assert np.all(points > 0) and np.all(points.sum(axis=1) < 1.0)


def test_refine_converges_and_diverges():
    value, err, level = refine(lambda level: 1.0 + 2.0 ** (-10 * level), rtol=1e-6)
    assert value == pytest.approx(1.0, abs=1e-6)
    assert level >= 1
    with pytest.raises(QuadratureDivergence):
        refine(lambda level: float(level), rtol=1e-6, max_level=3)
    with pytest.raises(QuadratureDivergence):
        refine(lambda level: math.inf, rtol=1e-6)


def test_monte_carlo_area_four_nodes(random_spectral):
    S = random_spectral(4, seed=2)
    _, weights, strata = fan_monte_carlo(singular_chart(S), 1.0, 4000, np.random.default_rng(1))
    total, se = stratified_estimate(weights, strata)
    assert total == pytest.approx(1.0 / 6.0, rel=1e-12)
    assert se == pytest.approx(0.0, abs=1e-12)
