"""Integration over the open unit simplex S in R^(n-1) against prod_i |A_i(u)|^(alpha-1).

``A(u) = M (u - c)`` is affine and vanishes at the interior point c, so S is
cut into the n pieces spanned by c and a facet. On a piece, u = c + r (y - c)
with y on the facet: the singular weight factors into r^((n-1)(alpha-1)) times
a facet term, the radial part is integrated exactly by Gauss-Jacobi and the
facet part by Gauss-Jacobi segments split at the zeros of each A_i.

The deterministic rule covers facets of dimension at most one (n <= 3). On
larger facets the zero sets of the A_i are hyperplanes a tensor rule does not
follow, so those simplices are sampled by ``fan_monte_carlo`` instead.
"""
import math
import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import roots_jacobi

from .errors import QuadratureDivergence, PreconditionViolated

logger = logging.getLogger(__name__)

ROOT_TOL = 1e-12
BASE_ORDER = 8
MAX_RULE_DIM = 2


@dataclass(frozen=True, eq=False)
class SingularChart:
    """Center c and linear part M (complex, (n-1)x(n-1)) of the singular affine map."""
    center: np.ndarray
    M: np.ndarray

    @property
    def dim(self):
        return self.center.shape[0]


@dataclass(frozen=True, eq=False)
class SimplexRule:
    points: np.ndarray
    weights: np.ndarray
    level: int


def _facets(dim):
    vertices = np.vstack([np.zeros(dim), np.eye(dim)])
    return [np.delete(vertices, drop, axis=0) for drop in range(dim + 1)]


def jacobi_interval(order, p, q, left, right):
    """Nodes and weights on [p, q] for the weight (sigma - p)^left (q - sigma)^right."""
    x, w = roots_jacobi(order, right, left)
    half = (q - p) / 2.0
    return p + half * (1.0 + x), w * half ** (1.0 + left + right)


def _singular_product(values, alpha):
    if alpha == 1.0:
        return np.ones(values.shape[0])
    return np.prod(np.abs(values), axis=1) ** (alpha - 1.0)


def _segment_rule(a, b, alpha, order):
    """Rule on [0, 1] for prod_i |a_i + b_i s|^(alpha-1) ds, weight included."""
    singular, breaks = [], [0.0, 1.0]
    if alpha != 1.0:
        for ai, bi in zip(a, b):
            if abs(bi) == 0:
                continue
            root = -ai / bi
            if not -ROOT_TOL <= root.real <= 1.0 + ROOT_TOL:
                continue
            # roots on an endpoint keep their exponent there
            at = min(max(root.real, 0.0), 1.0)
            if at <= ROOT_TOL:
                at = 0.0
            elif at >= 1.0 - ROOT_TOL:
                at = 1.0
            breaks.append(at)
            if abs(root.imag) <= ROOT_TOL * (1.0 + abs(root.real)):
                singular.append(at)
    breaks = np.unique(np.round(breaks, 14))
    nodes, weights = [], []
    for p, q in zip(breaks[:-1], breaks[1:]):
        if q - p <= ROOT_TOL:
            continue
        left = (alpha - 1.0) * sum(abs(s - p) <= ROOT_TOL for s in singular)
        right = (alpha - 1.0) * sum(abs(s - q) <= ROOT_TOL for s in singular)
        left, right = max(left, -0.999), max(right, -0.999)
        s, w = jacobi_interval(order, p, q, left, right)
        vals = a[None, :] + s[:, None] * b[None, :]
        weight_fn = (s - p) ** left * (q - s) ** right
        nodes.append(s)
        weights.append(w * _singular_product(vals, alpha) / weight_fn)
    return np.concatenate(nodes)[:, None], np.concatenate(weights)


def fan_rule(chart, alpha, level):
    """Rule whose weights absorb the singular factor; points are u in S (dim <= 2)."""
    dim = chart.dim
    if dim > MAX_RULE_DIM:
        raise PreconditionViolated("fan_rule covers simplices of dimension <= {}, got {}; use fan_monte_carlo"
                                   .format(MAX_RULE_DIM, dim))
    c, M = chart.center, chart.M
    beta = (dim - 1) + dim * (alpha - 1.0)
    order = BASE_ORDER * 2 ** level
    x, w = roots_jacobi(order, 0.0, beta)
    r = (1.0 + x) / 2.0
    wr = w / 2.0 ** (beta + 1.0)
    points, weights = [], []
    for W in _facets(dim):
        W0 = W[0]
        D = np.column_stack([W0 - c] + [W[m] - W0 for m in range(1, dim)])
        det = abs(np.linalg.det(D))
        a = M @ (W0 - c)
        if dim == 1:
            sigma, wa = np.zeros((1, 0)), _singular_product(a[None, :], alpha)
        else:
            sigma, wa = _segment_rule(a, M @ (W[1] - W0), alpha, order)
        ys = W0[None, :] + sigma @ (W[1:] - W0) if dim > 1 else np.tile(W0, (1, 1))
        u = c[None, None, :] + r[:, None, None] * (ys[None, :, :] - c[None, None, :])
        points.append(u.reshape(-1, dim))
        weights.append((det * wr[:, None] * wa[None, :]).ravel())
    return SimplexRule(points=np.vstack(points), weights=np.concatenate(weights), level=level)


def fan_monte_carlo(chart, alpha, samples, generator):
    """Stratified sample (one stratum per fan piece) with the radial singularity sampled exactly.

    Returns points, per-sample weights and stratum ids; the integral of f is
    estimated by the sum over strata of mean(weight * f).
    """
    dim = chart.dim
    c, M = chart.center, chart.M
    beta = (dim - 1) + dim * (alpha - 1.0)
    per = max(2, samples // (dim + 1))
    points, weights, strata = [], [], []
    for k, W in enumerate(_facets(dim)):
        W0 = W[0]
        D = np.column_stack([W0 - c] + [W[m] - W0 for m in range(1, dim)])
        det = abs(np.linalg.det(D))
        r = generator.random(per) ** (1.0 / (beta + 1.0))
        if dim > 1:
            sigma = generator.dirichlet(np.ones(dim), size=per)[:, 1:]
            ys = W0[None, :] + sigma @ (W[1:] - W0)
        else:
            ys = np.tile(W0, (per, 1))
        wa = _singular_product((ys - c) @ M.T, alpha)
        points.append(c[None, :] + r[:, None] * (ys - c[None, :]))
        weights.append(det * wa / ((beta + 1.0) * math.factorial(dim - 1)))
        strata.append(np.full(per, k))
    return np.vstack(points), np.concatenate(weights), np.concatenate(strata)


def stratified_estimate(values, strata):
    total, var = 0.0, 0.0
    for k in np.unique(strata):
        v = values[strata == k]
        total += v.mean()
        var += v.var(ddof=1) / v.shape[0]
    return total, math.sqrt(var)


def refine(estimate, rtol, atol=0.0, min_level=1, max_level=5):
    """Run ``estimate(level)`` on finer rules until successive values agree.

    Returns (value, error estimate, level). Raises QuadratureDivergence when
    ``max_level`` is reached without agreement.
    """
    previous = None
    for level in range(max_level + 1):
        value = estimate(level)
        if not np.isfinite(value):
            raise QuadratureDivergence("non-finite quadrature value at level {}".format(level))
        if previous is not None:
            err = abs(value - previous)
            if level >= min_level and err <= rtol * abs(value) + atol:
                return value, err, level
        previous = value
    raise QuadratureDivergence("no convergence to rtol={:.1e} by level {} (last change {:.3e})"
                               .format(rtol, max_level, err))
