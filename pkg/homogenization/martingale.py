"""Space-time harmonic functions of the network process and the local martingale J_alpha.

Vectors v live in R^n; the hyperplane H = {v : pi.v = 0} is invariant under
the semigroup, and phi(v, t) = P_{-t} v is the flow that drives the harmonic
functions h_v(t, x) = exp(varphi(v, t)) prod_i (1 + phi_i(v, t))^x_i.
Integrating h over the admissible domain against |psi|^(alpha-1) and changing
variables onto the open simplex S gives J_alpha.
"""
import math
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import integrate
from scipy.special import rel_entr
from tqdm import tqdm

from .errors import (NotInHyperplane, DomainViolation, AdmissibilityViolation, BoundaryPoint,
                     PreconditionViolated, InvalidParams)
from .quadrature import (SingularChart, fan_rule, fan_monte_carlo, stratified_estimate,
                         refine, jacobi_interval)
from .simulator import simulate, check_state
from .spectral import semigroup
from .state import (entropy, epsilon_zero, empty_time, generator_apply,
                    simplex_grid, check_simplex_point)
from .utils import RngStream

logger = logging.getLogger(__name__)

FLOOR = 1e-14
HYPERPLANE_TOL = 1e-10
TAIL_TOL = 1e-10
QUAD_EPSABS = 1e-10
TENSOR_QUADRATURE = "tensor-quadrature"
MONTE_CARLO = "monte-carlo"
TENSOR_MAX_N = 3
SAFETY_MARGIN = 1.1


# ---------------------------------------------------------------------------
# flow and domains
# ---------------------------------------------------------------------------

def flow(S, v, t):
    """phi(v, t) = P_{-t} v."""
    return semigroup(S, -float(t)) @ np.asarray(v, dtype=float)


def _flow_path(S, v):
    coef = S.omega_inv @ np.asarray(v, dtype=float)

    def at(s):
        return (S.omega @ (coef * np.exp(-S.eigenvalues * s))).real
    return at


def in_hyperplane(S, v, tol=HYPERPLANE_TOL):
    v = np.asarray(v, dtype=float)
    return abs(float(S.pi @ v)) <= tol * max(1.0, float(np.abs(v).max()))


def in_domain(S, v, t):
    """v in D(t) = {v in H : 1 + phi(v, t) > 0}."""
    if not in_hyperplane(S, v):
        raise NotInHyperplane("pi.v = {:.3e} is not zero".format(float(S.pi @ np.asarray(v, dtype=float))))
    return bool(np.all(1.0 + flow(S, v, t) > FLOOR))


def random_domain_point(S, t, generator, margin=0.5):
    """Random v in D(t) with |phi(v, t)| <= margin."""
    w = generator.normal(size=S.n)
    v = w - (S.pi @ w)
    phi = flow(S, v, t)
    return v * (margin * generator.uniform(0.2, 1.0) / np.abs(phi).max())


def flow_integrand(params, phi):
    """sum_i mu_i phi_i / (1 + phi_i) - lambda_i phi_i over the last axis."""
    phi = np.asarray(phi, dtype=float)
    return (phi / (1.0 + phi)) @ params.capacities - phi @ params.arrival_rates


# ---------------------------------------------------------------------------
# potential phi_0 and the primitive varphi
# ---------------------------------------------------------------------------

def _tail_cutoff(S, params, norm_v):
    K = S.n * S.B * norm_v
    rate = params.lam + params.mu
    if K <= 0 or rate <= 0:
        return 0.0
    return max(math.log(K * rate / TAIL_TOL) / S.eta, math.log(2.0 * K) / S.eta, 0.0)


def _tail_bound(S, params, norm_v, T):
    K = S.n * S.B * norm_v
    return (params.lam + 2.0 * params.mu) * K * math.exp(-S.eta * T) / S.eta


def potential0_with_error(S, params, v, closed_form=None):
    """phi_0(v) = int_{-inf}^0 flow_integrand(phi(v, s)) ds and an error bound.

    For n = 2 the flow is a single exponential on H and the integral has the
    closed form sum_i (mu_i log(1 + v_i) - lambda_i v_i) / theta; pass
    ``closed_form=False`` to force quadrature.
    """
    v = np.asarray(v, dtype=float)
    if not in_domain(S, v, 0.0):
        raise DomainViolation("v = {} is outside D(0)".format(v))
    norm_v = float(np.abs(v).max())
    if norm_v == 0 or (params.lam == 0 and params.mu == 0):
        return 0.0, 0.0
    if closed_form is None:
        closed_form = S.n == 2
    if closed_form:
        if S.n != 2:
            raise PreconditionViolated("closed-form potential needs n = 2")
        value = (params.capacities @ np.log1p(v) - params.arrival_rates @ v) / S.theta
        return float(value), 0.0
    path = _flow_path(S, v)

    def integrand(s):
        phi = path(s)
        if np.any(1.0 + phi <= 0):
            raise DomainViolation("1 + phi(v, {:.6g}) has a non-positive entry".format(s))
        return float(flow_integrand(params, phi))

    T = _tail_cutoff(S, params, norm_v)
    value, err = integrate.quad(integrand, -T, 0.0, epsabs=QUAD_EPSABS, epsrel=1e-12, limit=500)
    return value, err + _tail_bound(S, params, norm_v, T)


def potential0(S, params, v, closed_form=None):
    return potential0_with_error(S, params, v, closed_form)[0]


def potential0_many(S, params, V, check=True):
    """phi_0 on every row of V, sharing one vector-valued quadrature."""
    V = np.atleast_2d(np.asarray(V, dtype=float))
    if check:
        residual = np.abs(V @ S.pi) / np.maximum(1.0, np.abs(V).max(axis=1))
        if np.any(residual > HYPERPLANE_TOL):
            raise NotInHyperplane("{} rows are off the hyperplane".format(int(np.sum(residual > HYPERPLANE_TOL))))
    if np.any(1.0 + V <= FLOOR):
        raise DomainViolation("rows outside D(0)")
    norm_v = float(np.abs(V).max()) if V.size else 0.0
    if norm_v == 0 or (params.lam == 0 and params.mu == 0):
        return np.zeros(V.shape[0]), 0.0
    if S.n == 2:
        return (np.log1p(V) @ params.capacities - V @ params.arrival_rates) / S.theta, 0.0
    coef = V @ S.omega_inv.T

    def integrand(s):
        phi = ((coef * np.exp(-S.eigenvalues * s)) @ S.omega.T).real
        if np.any(1.0 + phi <= 0):
            raise DomainViolation("1 + phi has a non-positive entry at s = {:.6g}".format(s))
        return flow_integrand(params, phi)

    T = _tail_cutoff(S, params, norm_v)
    values, err = integrate.quad_vec(integrand, -T, 0.0, epsabs=QUAD_EPSABS, epsrel=1e-10,
                                     norm="max", limit=2000)
    return values, err + _tail_bound(S, params, norm_v, T)


def primitive(S, params, v, t):
    """varphi(v, t) with d/dt varphi = flow_integrand(phi(v, t)).

    On H this is phi_0(P_{-t} v); off H (e.g. v = (u - 1) 1) the primitive is
    anchored at varphi(v, 0) = 0.
    """
    v = np.asarray(v, dtype=float)
    if in_hyperplane(S, v):
        if not in_domain(S, v, t):
            raise AdmissibilityViolation("v is outside D({:.6g})".format(t))
        return potential0(S, params, flow(S, v, t))
    path = _flow_path(S, v)

    def integrand(s):
        phi = path(s)
        if np.any(np.abs(1.0 + phi) <= FLOOR):
            raise AdmissibilityViolation("1 + phi(v, {:.6g}) vanishes".format(s))
        return float(flow_integrand(params, phi))

    return integrate.quad(integrand, 0.0, float(t), epsabs=1e-13, epsrel=1e-12, limit=500)[0]


def _check_admissible(phi):
    if np.any(np.abs(1.0 + phi) <= FLOOR):
        raise AdmissibilityViolation("1 + phi has a vanishing coordinate: {}".format(1.0 + phi))


def harmonic_h(S, params, v, t, x):
    """h_v(t, x) = exp(varphi(v, t)) prod_i (1 + phi_i(v, t))^x_i."""
    x = np.asarray(x, dtype=np.int64)
    phi = flow(S, v, t)
    _check_admissible(phi)
    one = 1.0 + phi
    sign = float(np.prod(np.sign(one) ** x))
    return sign * math.exp(primitive(S, params, v, t) + float(x @ np.log(np.abs(one))))


def harmonicity_residual(S, params, v, t, x, dt=1e-5):
    """|dh/dt + Omega h| / |h| at (t, x) by central differences in t."""
    v = np.asarray(v, dtype=float)
    x = np.asarray(x, dtype=np.int64)
    if in_hyperplane(S, v) and not in_domain(S, v, t + dt):
        raise AdmissibilityViolation("v is outside D({:.6g})".format(t + dt))
    path = _flow_path(S, v)
    phis = {k: path(t + k * dt) for k in (-1, 0, 1)}
    for phi in phis.values():
        _check_admissible(phi)

    def I(s):
        return float(flow_integrand(params, path(s)))

    inc = {0: 0.0,
           1: integrate.quad(I, t, t + dt, epsabs=1e-16, epsrel=1e-13)[0],
           -1: -integrate.quad(I, t - dt, t, epsabs=1e-16, epsrel=1e-13)[0]}
    base_log = float(x @ np.log(np.abs(1.0 + phis[0])))
    base_sign = float(np.prod(np.sign(1.0 + phis[0]) ** x))

    def relative(y, k):
        one = 1.0 + phis[k]
        sign = float(np.prod(np.sign(one) ** y)) * base_sign
        return sign * math.exp(inc[k] + float(y @ np.log(np.abs(one))) - base_log)

    dh = (relative(x, 1) - relative(x, -1)) / (2.0 * dt)
    omega_h = generator_apply(params, S.Q, lambda y: relative(y, 0), x)
    return abs(dh + omega_h)


# ---------------------------------------------------------------------------
# charts: H, K, J, Psi_t and the functions psi, F, G
# ---------------------------------------------------------------------------

def chart_H(S, u):
    """Completion of u in R^(n-1) to the point of H with the same first coordinates."""
    u = np.asarray(u, dtype=float)
    last = -(u @ S.pi[:-1]) / S.pi[-1]
    return np.concatenate([u, np.expand_dims(last, -1)], axis=-1)


def chart_K(u):
    """Completion of u to the point of K = {sum v = 1}."""
    u = np.asarray(u, dtype=float)
    return np.concatenate([u, np.expand_dims(1.0 - u.sum(axis=-1), -1)], axis=-1)


def chart_J(v):
    return np.asarray(v, dtype=float)[..., :-1]


def psi_map(S, u, t):
    """Psi_t(u) = J Delta (P_{-t} H u + 1)."""
    v = chart_H(S, u)
    return chart_J(S.pi * (v @ semigroup(S, -float(t)).T + 1.0))


def psi_map_inverse(S, u, t):
    """Psi_t^-1(u) = J P_t (Delta^-1 K u - 1)."""
    v = chart_K(u) / S.pi - 1.0
    return chart_J(v @ semigroup(S, float(t)).T)


def psi_jacobian(S, t):
    """Determinant of the linear part J Delta P_{-t} H of Psi_t."""
    d = S.n - 1
    H = chart_H(S, np.eye(d)).T
    linear = (S.pi[:, None] * semigroup(S, -float(t)) @ H)[:d]
    return float(np.linalg.det(linear))


def in_C(S, u, t):
    """u in C(t) = H^-1(D(t))."""
    return in_domain(S, chart_H(S, u), t)


def in_S(u):
    u = np.asarray(u, dtype=float)
    return bool(np.all(u > 0) and u.sum() < 1.0)


def psi(S, v):
    """prod_{i<n} |(omega^-1 v)_i|."""
    return float(np.prod(np.abs((S.omega_inv @ np.asarray(v, dtype=float))[:-1])))


def psi_rows(S, V):
    return np.prod(np.abs((np.asarray(V, dtype=float) @ S.omega_inv.T)[:, :-1]), axis=1)


def singular_chart(S):
    """Center J pi and linear part of u -> (omega^-1 Delta^-1 K u)_{i<n}, which vanishes at J pi."""
    d = S.n - 1
    K_lin = np.vstack([np.eye(d), -np.ones((1, d))])
    M = (S.omega_inv @ (K_lin / S.pi[:, None]))[:d]
    return SingularChart(center=S.pi[:d].copy(), M=M)


def F(S, v):
    v = check_simplex_point(v)
    return psi(S, v / S.pi)


def F_rows(S, V):
    return psi_rows(S, np.asarray(V, dtype=float) / S.pi)


def _check_interior(V):
    V = np.atleast_2d(np.asarray(V, dtype=float))
    if np.any(V <= FLOOR) or np.any(np.abs(V.sum(axis=1) - 1.0) > 1e-12):
        raise BoundaryPoint("G needs points strictly inside P")
    return V


def G(S, params, v):
    """G(v) = exp(phi_0(Delta^-1 v - 1)) for v interior to P."""
    v = _check_interior(v)[0]
    return math.exp(potential0(S, params, v / S.pi - 1.0))


def G_rows(S, params, V):
    V = _check_interior(V)
    values, _ = potential0_many(S, params, V / S.pi - 1.0, check=False)
    return np.exp(values)


# ---------------------------------------------------------------------------
# integrability of F^(alpha-1) and the martingale J_alpha
# ---------------------------------------------------------------------------

@dataclass
class IntegrabilityReport:
    rows: list
    sup: float
    diverging: bool

    def as_dict(self):
        return {"rows": self.rows, "sup": self.sup, "diverging": self.diverging}


def integral_F(S, alpha, level=3, samples=200000, rng=None):
    """int_S F^(alpha-1) du: the fan rule of the given level up to n = 3, a stratified sample above."""
    chart = singular_chart(S)
    if S.n <= TENSOR_MAX_N:
        return math.fsum(fan_rule(chart, float(alpha), level).weights)
    _, w, strata = fan_monte_carlo(chart, float(alpha), samples, (rng or _default_stream()).generator())
    return stratified_estimate(w, strata)[0]


def integrability_bound(S, alphas, level=3, samples=200000, rng=None, change_limit=0.05):
    """alpha^n int_S F^(alpha-1) per alpha, each compared with its refinement.

    Up to n = 3 the refinement is the next fan-rule level; above, a sample four
    times larger.
    """
    rows = []
    chart = singular_chart(S)
    for alpha in alphas:
        if not 0 < alpha <= 1:
            raise InvalidParams("alpha must lie in (0, 1], got {}".format(alpha))
        if S.n <= TENSOR_MAX_N:
            value = math.fsum(fan_rule(chart, alpha, level).weights)
            refined = math.fsum(fan_rule(chart, alpha, level + 1).weights)
        else:
            generator = (rng or _default_stream()).generator()
            _, w, strata = fan_monte_carlo(chart, alpha, samples, generator)
            value, _ = stratified_estimate(w, strata)
            _, w, strata = fan_monte_carlo(chart, alpha, 4 * samples, generator)
            refined, _ = stratified_estimate(w, strata)
        scale = alpha ** S.n
        change = abs(refined - value) / abs(refined) if refined else math.inf
        rows.append({"alpha": float(alpha), "value": scale * value, "refined": scale * refined,
                     "rel_change": change, "stable": bool(np.isfinite(refined) and change <= change_limit)})
    sup = max(r["refined"] for r in rows) if rows else 0.0
    diverging = not all(r["stable"] for r in rows)
    if diverging:
        logger.warning("alpha^n int F^(alpha-1) is not stable under refinement")
    return IntegrabilityReport(rows=rows, sup=sup, diverging=diverging)


def _default_stream():
    return RngStream(0, (7,))


@dataclass(frozen=True)
class MartingaleEval:
    alpha: float
    t: float
    value: float
    error: float
    method: str

    def __post_init__(self):
        if self.value < 0 or not math.isfinite(self.error):
            raise ValueError("J_alpha evaluation must be non-negative with a finite error")


class MartingaleIntegrator:
    """Evaluates int_S w_x(u~) G(u~) F(u~)^(alpha-1) du for many states x at one alpha.

    The rule points and the G values on them are computed once per refinement
    level (or once per Monte Carlo sample) and reused across states.
    """

    def __init__(self, S, params, alpha, rtol=1e-6, max_level=5, method=None, samples=200000, rng=None):
        if not alpha > 0:
            raise PreconditionViolated("alpha must be positive")
        self.S = S
        self.params = params
        self.alpha = float(alpha)
        self.rtol = rtol
        self.max_level = max_level
        self.method = method or (TENSOR_QUADRATURE if S.n <= TENSOR_MAX_N else MONTE_CARLO)
        if self.method not in (TENSOR_QUADRATURE, MONTE_CARLO):
            raise ValueError("method needs to be '{}' or '{}'".format(TENSOR_QUADRATURE, MONTE_CARLO))
        self.samples = samples
        self.rng = rng or _default_stream()
        self.chart = singular_chart(S)
        self._levels = {}
        self._sample = None
        self._log_pi = np.log(S.pi)

    def _level(self, level):
        if level not in self._levels:
            rule = fan_rule(self.chart, self.alpha, level)
            tilde = chart_K(rule.points)
            self._levels[level] = (tilde, rule.weights * G_rows(self.S, self.params, tilde))
            logger.debug("Quadrature level %d: %d nodes", level, tilde.shape[0])
        return self._levels[level]

    def _monte_carlo(self):
        if self._sample is None:
            pts, w, strata = fan_monte_carlo(self.chart, self.alpha, self.samples, self.rng.generator())
            tilde = chart_K(pts)
            self._sample = (tilde, w * G_rows(self.S, self.params, tilde), strata)
        return self._sample

    def _log_weight(self, tilde, x, form):
        if form == "product":
            return np.log(tilde) @ x - float(x @ self._log_pi)
        if form == "entropy":
            L = int(x.sum())
            if L == 0:
                return np.zeros(tilde.shape[0])
            rho = x / L
            return L * (entropy(rho, self.S.pi) - rel_entr(rho[None, :], tilde).sum(axis=1))
        raise ValueError("form needs to be 'product' or 'entropy'")

    def integral(self, x, form="product"):
        """Return (value, error estimate) of the state-x integral."""
        x = check_state(x, self.S.n)
        if self.method == MONTE_CARLO:
            tilde, w, strata = self._monte_carlo()
            return stratified_estimate(w * np.exp(self._log_weight(tilde, x, form)), strata)

        def estimate(level):
            tilde, w = self._level(level)
            return math.fsum(w * np.exp(self._log_weight(tilde, x, form)))

        value, err, _ = refine(estimate, self.rtol, max_level=self.max_level)
        return value, err

    def evaluate(self, x, t, form="product"):
        value, err = self.integral(x, form)
        decay = math.exp(-self.alpha * self.S.theta * float(t))
        return MartingaleEval(alpha=self.alpha, t=float(t), value=value * decay,
                              error=err * decay, method=self.method)


def J_alpha(S, params, x, t, alpha, rtol=1e-6, form="product", method=None, samples=200000, rng=None):
    """J_alpha(t) for the path sitting in state x at time t."""
    integrator = MartingaleIntegrator(S, params, alpha, rtol=rtol, method=method, samples=samples, rng=rng)
    return integrator.evaluate(x, t, form)


# ---------------------------------------------------------------------------
# n = 2: the harmonic function g on C(t)
# ---------------------------------------------------------------------------

def harmonic_g(S, params, t, x, alpha, order=64):
    """g(t, x) = int_{C(t)} h_{Hu}(t, x) |psi(Hu)|^(alpha-1) du for two nodes.

    C(t) is the interval (-e^{-theta t}, e^{-theta t} pi_2 / pi_1); both halves
    around the zero of psi(Hu) are integrated by Gauss-Jacobi with the
    algebraic end behaviour taken into the weight.
    """
    if S.n != 2:
        raise PreconditionViolated("harmonic_g is implemented for two nodes")
    x = check_state(x, 2)
    theta = S.theta
    lam_i, mu_i = params.arrival_rates, params.capacities
    scale = math.exp(theta * float(t))
    lo, hi = -1.0 / scale, S.pi[1] / (S.pi[0] * scale)
    m = abs((S.omega_inv @ np.array([1.0, -S.pi[0] / S.pi[1]]))[0])
    ends = mu_i / theta + x

    def log_integrand(u):
        phi = scale * np.column_stack([u, -S.pi[0] * u / S.pi[1]])
        logs = np.log1p(phi)
        return logs @ ends - (phi @ lam_i) / theta + (alpha - 1.0) * np.log(m * np.abs(u))

    total = []
    for p, q, left, right in ((lo, 0.0, ends[0], alpha - 1.0), (0.0, hi, alpha - 1.0, ends[1])):
        u, w = jacobi_interval(order, p, q, left, right)
        log_weight_fn = left * np.log(u - p) + right * np.log(q - u)
        total.extend((w * np.exp(log_integrand(u) - log_weight_fn)).tolist())
    return math.fsum(total)


def harmonic_g_residual(S, params, t, x, alpha, dt=1e-4, order=64):
    """|dg/dt + Omega g| / |g| by central differences in t."""
    g = lambda s, y: harmonic_g(S, params, s, y, alpha, order)
    g0 = g(t, x)
    dg = (g(t + dt, x) - g(t - dt, x)) / (2.0 * dt)
    omega_g = generator_apply(params, S.Q, lambda y: g(t, y), x)
    return abs(dg + omega_g) / abs(g0)


# ---------------------------------------------------------------------------
# simulation checks
# ---------------------------------------------------------------------------

@dataclass
class MartingaleReport:
    alpha: float
    rows: list
    pairs: list
    passed: bool

    def as_dict(self):
        return {"alpha": self.alpha, "rows": self.rows, "pairs": self.pairs, "passed": self.passed}


def martingale_constancy(S, params, x0, alpha, times, paths, rng, rtol=1e-6, sigmas=3.0):
    """Mean of J_alpha(t ^ T_0) over simulated paths, compared across times."""
    times = sorted(float(t) for t in times)
    x0 = check_state(x0, S.n)
    integrator = MartingaleIntegrator(S, params, alpha, rtol=rtol)
    cache = {}
    samples = np.zeros((paths, len(times)))
    quad_error = np.zeros(len(times))
    horizon = max(times[-1], 1e-12)
    logger.info("***** Running martingale constancy check *****")
    logger.info("  alpha = %g", alpha)
    logger.info("  Num paths = %d", paths)
    for p in tqdm(range(paths), desc="J_alpha paths"):
        traj = simulate(params, S, x0, horizon, rng.spawn(p))
        T0 = empty_time(traj)
        for k, t in enumerate(times):
            tau = min(t, T0)
            state = tuple(int(v) for v in traj.state_at(tau))
            if state not in cache:
                cache[state] = integrator.integral(np.array(state))
            value, err = cache[state]
            decay = math.exp(-integrator.alpha * S.theta * tau)
            samples[p, k] = value * decay
            quad_error[k] = max(quad_error[k], err * decay)
    means = samples.mean(axis=0)
    ses = samples.std(axis=0, ddof=1) / math.sqrt(paths) if paths > 1 else np.zeros(len(times))
    rows = [{"t": t, "mean": float(m), "se": float(s), "quad_error": float(q)}
            for t, m, s, q in zip(times, means, ses, quad_error)]
    pairs = []
    for a in range(len(times)):
        for b in range(a + 1, len(times)):
            gap = abs(means[a] - means[b])
            band = sigmas * math.sqrt(ses[a] ** 2 + ses[b] ** 2) + quad_error[a] + quad_error[b]
            pairs.append({"t_a": times[a], "t_b": times[b], "gap": float(gap), "band": float(band),
                          "passed": bool(gap <= band)})
    passed = all(p["passed"] for p in pairs)
    if not passed:
        logger.warning("J_alpha means drift beyond %g standard errors", sigmas)
    return MartingaleReport(alpha=float(alpha), rows=rows, pairs=pairs, passed=passed)


class EntropyExit:
    """Stop rule H(chi(x), pi) > eps evaluated on a state list."""

    def __init__(self, pi, eps):
        self.log_pi = [math.log(p) for p in pi]
        self.eps = eps

    def __call__(self, x):
        L = sum(x)
        if L == 0:
            return -self.log_pi[0] > self.eps
        h = math.fsum(xi * (math.log(xi / L) - lp) for xi, lp in zip(x, self.log_pi) if xi > 0)
        return h / L > self.eps


def _grid_points(n, step):
    m = int(math.ceil(1.0 / step - 1e-9))
    return np.vstack(list(simplex_grid(n, m)))


def deviation_constants(S, params, delta, grid_step=0.005, alpha_grid=None, chunk=64, samples=200000):
    """C_3, B_delta and C_delta = C_3 / B_delta from grid evaluations with a 10% margin.

    The margin enters once per grid supremum or infimum; C_3 carries it through sup_G.
    ``samples`` sizes the integrability estimate when n is above the quadrature range.
    """
    n = S.n
    alpha_grid = np.linspace(0.05, 1.0, 20) if alpha_grid is None else np.asarray(alpha_grid)
    grid = _grid_points(n, grid_step)
    interior = grid[np.all(grid > 0, axis=1)]
    sup_G = SAFETY_MARGIN * float(G_rows(S, params, interior).max())
    integrability = integrability_bound(S, alpha_grid, samples=samples)
    C3 = sup_G * integrability.sup
    sup_F = SAFETY_MARGIN * float(F_rows(S, grid).max())
    beta = min(1.0 / sup_F, 1.0) if sup_F > 0 else 1.0
    # S_delta(v) must contain lattice points even at the vertices of P
    u_step = min(grid_step, -math.expm1(-delta) / 3.0)
    lattice = _grid_points(n, u_step)
    interior = lattice[np.all(lattice > 0, axis=1)]
    m = int(math.ceil(1.0 / u_step - 1e-9))
    weighted = G_rows(S, params, interior) * float(m) ** -(n - 1)
    inf_phi = math.inf
    for start in range(0, grid.shape[0], chunk):
        V = grid[start:start + chunk]
        H = rel_entr(V[:, None, :], interior[None, :, :]).sum(axis=2)
        phi = (H <= delta) @ weighted
        inf_phi = min(inf_phi, float(phi.min()))
    B_delta = beta * inf_phi / SAFETY_MARGIN
    if B_delta <= 0:
        raise PreconditionViolated("grid too coarse: some S_delta(v) holds no grid point (delta={})".format(delta))
    return {"sup_G": sup_G, "integrability_sup": integrability.sup, "C3": C3, "sup_F": sup_F,
            "beta": beta, "inf_Phi": inf_phi, "B_delta": B_delta, "C_delta": C3 / B_delta,
            "grid_step": grid_step, "lattice_step": 1.0 / m, "integrability_diverging": integrability.diverging}


@dataclass
class DeviationBoundReport:
    constants: dict
    rows: list
    decay: list
    censored: int
    passed: bool

    def as_dict(self):
        return {"constants": self.constants, "rows": self.rows, "decay": self.decay,
                "censored": self.censored, "passed": self.passed}


def _log_slope(ells, means, ses):
    """Least-squares slope of log(mean) on ell and its delta-method standard error."""
    keep = [(l, m, s) for l, m, s in zip(ells, means, ses) if m > 0]
    if len(keep) < 2:
        return None, None
    ell = np.array([k[0] for k in keep], dtype=float)
    y = np.log([k[1] for k in keep])
    var = np.array([(k[2] / k[1]) ** 2 for k in keep])
    centered = ell - ell.mean()
    denom = float(centered @ centered)
    if denom == 0:
        return None, None
    slope = float(centered @ (y - y.mean())) / denom
    return slope, math.sqrt(float((centered ** 2) @ var)) / denom


def deviation_bound_check(S, params, x0, eps, delta, alphas, ells, paths, rng, horizon=50.0,
                          grid_step=0.005, constants=None):
    """Monte Carlo E_x(exp(-alpha theta T); L(T) >= ell) at the entropy exit T against its bound."""
    x0 = check_state(x0, S.n)
    _, eps0 = epsilon_zero(S.pi)
    if not 0 < delta < eps < eps0:
        raise PreconditionViolated("need 0 < delta < eps < eps0 = {:.6g}, got delta={} eps={}"
                                   .format(eps0, delta, eps))
    if any(not 0 < a < 1 for a in alphas):
        raise PreconditionViolated("alphas must lie in (0, 1)")
    constants = constants or deviation_constants(S, params, delta, grid_step)
    stop = EntropyExit(S.pi, eps)
    exit_times = np.full(paths, math.inf)
    exit_sizes = np.zeros(paths, dtype=np.int64)
    censored = 0
    logger.info("***** Running deviation bound check *****")
    logger.info("  eps = %g, delta = %g", eps, delta)
    logger.info("  C_delta = %.6g", constants["C_delta"])
    for p in tqdm(range(paths), desc="exit paths"):
        traj = simulate(params, S, x0, horizon, rng.spawn(p), stop=stop)
        if traj.stopped:
            exit_times[p] = traj.horizon
            exit_sizes[p] = int(traj.final.sum())
        else:
            censored += 1
    if censored:
        logger.warning("%d of %d paths censored at horizon %g; counted at the horizon", censored, paths, horizon)
    L0 = int(x0.sum())
    h0 = L0 * entropy(x0 / L0, S.pi) if L0 else 0.0
    rows, decay = [], []
    for alpha in alphas:
        means, ses = [], []
        for ell in ells:
            hit = (exit_sizes >= ell) & np.isfinite(exit_times)
            values = np.where(hit, np.exp(-alpha * S.theta * np.where(hit, exit_times, 0.0)), 0.0)
            values = values + np.where(np.isfinite(exit_times), 0.0, math.exp(-alpha * S.theta * horizon))
            mean = float(values.mean())
            se = float(values.std(ddof=1) / math.sqrt(paths)) if paths > 1 else 0.0
            upper = mean + 1.96 * se
            bound = constants["C_delta"] * alpha ** (-S.n) * math.exp(h0 - (eps - delta) * ell)
            rows.append({"alpha": float(alpha), "ell": float(ell), "mean": mean, "se": se, "upper": upper,
                         "bound": bound, "slack": bound - upper, "passed": bool(upper <= bound)})
            means.append(mean)
            ses.append(se)
        slope, slope_se = _log_slope(ells, means, ses)
        ok = None if slope is None else bool(slope <= -(eps - delta) + 1.96 * slope_se)
        decay.append({"alpha": float(alpha), "slope": slope, "slope_se": slope_se,
                      "target": -(eps - delta), "passed": ok})
        if ok is False:
            logger.warning("log-slope %.4g above -(eps - delta) = %.4g at alpha=%g", slope, -(eps - delta), alpha)
    passed = all(r["passed"] for r in rows)
    return DeviationBoundReport(constants=constants, rows=rows, decay=decay, censored=censored, passed=passed)


# ---------------------------------------------------------------------------
# exact identities
# ---------------------------------------------------------------------------

@dataclass
class IdentityReport:
    rows: list = field(default_factory=list)

    def add(self, name, error, tolerance, points=1):
        self.rows.append({"check": name, "max_error": float(error), "tolerance": float(tolerance),
                          "points": int(points), "passed": bool(error <= tolerance)})

    @property
    def passed(self):
        return all(r["passed"] for r in self.rows)

    def as_dict(self):
        return {"rows": self.rows, "passed": self.passed}


def _rel(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.abs(a - b).max() / max(1.0, float(np.abs(b).max())))


def identity_suite(S, params, rng, samples=100, g_samples=20, alpha=0.5):
    """Algebraic identities of the flow, the charts and the harmonic functions on random inputs."""
    generator = rng.generator()
    n = S.n
    report = IdentityReport()
    errs = {k: 0.0 for k in ("flow_group", "hyperplane", "psi_equivariance", "chart_inverse", "jacobian",
                             "chart_domain", "flow_tail", "domain_nesting", "mm1_reduction",
                             "harmonicity", "primitive_shift")}
    for _ in range(samples):
        w = generator.normal(size=n)
        s, t = generator.uniform(-2.0, 2.0, size=2)
        errs["flow_group"] = max(errs["flow_group"], _rel(flow(S, w, s + t), flow(S, flow(S, w, t), s)))
        v = w - (S.pi @ w)
        errs["hyperplane"] = max(errs["hyperplane"], abs(float(S.pi @ flow(S, v, t))))
        tp = generator.uniform(-3.0, 3.0)
        ref = psi(S, w)
        errs["psi_equivariance"] = max(errs["psi_equivariance"],
                                       abs(psi(S, semigroup(S, tp) @ w) - math.exp(-S.theta * tp) * ref)
                                       / max(ref * math.exp(-S.theta * tp), 1e-300))
        t3 = generator.uniform(0.0, 3.0)
        u = generator.dirichlet(np.ones(n))[:-1]
        errs["chart_inverse"] = max(errs["chart_inverse"], _rel(psi_map(S, psi_map_inverse(S, u, t3), t3), u))
        formula = math.exp(S.theta * t3) * float(np.prod(S.pi[:-1]))
        errs["jacobian"] = max(errs["jacobian"], abs(psi_jacobian(S, t3) - formula) / formula)
        probe = generator.uniform(-2.0, 2.0, size=n - 1)
        mapped = psi_map(S, probe, t3)
        margin = min(float(mapped.min()), 1.0 - float(mapped.sum()))
        if abs(margin) > 1e-9:
            errs["chart_domain"] = max(errs["chart_domain"], float(in_C(S, probe, t3) != in_S(mapped)))
        ss = -generator.uniform(0.0, 10.0)
        bound = n * S.B * math.exp(S.eta * ss) * float(np.abs(v).max())
        errs["flow_tail"] = max(errs["flow_tail"], max(0.0, float(np.abs(flow(S, v, ss)).max()) - bound))
        td = generator.uniform(0.0, 2.0)
        vd = random_domain_point(S, td, generator, margin=1.5)
        if in_domain(S, vd, td):
            errs["domain_nesting"] = max(errs["domain_nesting"],
                                         float(not in_domain(S, vd, generator.uniform(-2.0, td))))
        uu = generator.uniform(0.05, 1.95)
        x = generator.integers(1, 6, size=n)
        L = int(x.sum())
        exact = L * math.log(uu) + (params.lam * (1 - uu) + params.mu * (1 - 1 / uu)) * td
        got = harmonic_h(S, params, (uu - 1.0) * np.ones(n), td, x)
        errs["mm1_reduction"] = max(errs["mm1_reduction"], abs(got / math.exp(exact) - 1.0))
        vh = random_domain_point(S, td, generator)
        errs["harmonicity"] = max(errs["harmonicity"], harmonicity_residual(S, params, vh, td, x))
        direct = _shifted_primitive(S, params, vh, td)
        errs["primitive_shift"] = max(errs["primitive_shift"], abs(primitive(S, params, vh, td) - direct))
    tolerances = {"flow_group": 1e-9, "hyperplane": 1e-10, "psi_equivariance": 1e-10, "chart_inverse": 1e-10,
                  "jacobian": 1e-9, "chart_domain": 0.0, "flow_tail": 1e-12, "domain_nesting": 0.0,
                  "mm1_reduction": 1e-8, "harmonicity": 1e-6, "primitive_shift": 1e-8}
    for name, tolerance in tolerances.items():
        report.add(name, errs[name], tolerance, points=samples)
    report.add("F_at_pi", F(S, S.pi), 1e-12)
    report.add("G_at_pi", abs(G(S, params, S.pi) - 1.0), 1e-12)
    if n == 2:
        report.add("closed_form_potential", _closed_form_gap(S, params, generator, samples), 1e-8, points=samples)
        integrator = MartingaleIntegrator(S, params, alpha)
        g_residual, g_gap = 0.0, 0.0
        for _ in range(g_samples):
            t = generator.uniform(0.05, 1.0)
            x = generator.integers(1, 5, size=2)
            g_residual = max(g_residual, harmonic_g_residual(S, params, t, x, alpha))
            J = integrator.evaluate(x, t).value
            g_gap = max(g_gap, abs(harmonic_g(S, params, t, x, alpha) * S.pi[0] / J - 1.0))
        report.add("g_harmonicity", g_residual, 1e-4, points=g_samples)
        report.add("g_versus_J", g_gap, 1e-5, points=g_samples)
    for row in report.rows:
        if not row["passed"]:
            logger.warning("Identity %s failed: %.3e > %.1e", row["check"], row["max_error"], row["tolerance"])
    return report


def _shifted_primitive(S, params, v, t):
    """int_{-inf}^t flow_integrand(phi(v, r)) dr by direct quadrature."""
    path = _flow_path(S, v)
    T = _tail_cutoff(S, params, float(np.abs(v).max()))
    return integrate.quad(lambda r: float(flow_integrand(params, path(r))), -T, t,
                          epsabs=1e-12, epsrel=1e-12, limit=500)[0]


def _closed_form_gap(S, params, generator, samples):
    gap = 0.0
    for _ in range(samples):
        v = random_domain_point(S, 0.0, generator, margin=0.9)
        gap = max(gap, abs(potential0(S, params, v, closed_form=True) - potential0(S, params, v, closed_form=False)))
    return gap
