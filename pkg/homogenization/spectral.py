"""Mobility generator Q: validation, eigenstructure, semigroup and mixing constants."""
import logging
from collections import deque
from dataclasses import dataclass, replace

import numpy as np
from scipy import linalg

from .errors import (InvalidRateMatrix, RowSumViolation, NotIrreducible,
                     NotDiagonalizable, ComplexResidue)

logger = logging.getLogger(__name__)

ROW_SUM_TOL = 1e-12
IMAG_TOL = 1e-10
COND_LIMIT = 1e8
EIGEN_RESIDUAL_TOL = 1e-10
MIXING_MARGIN = 1.1


@dataclass(frozen=True, eq=False)
class SpectralData:
    """Eigenstructure of an irreducible, diagonalizable generator Q.

    Columns of ``omega`` are eigenvectors, the last one being the all-ones
    vector for the eigenvalue 0. Conjugate pairs sit next to each other with
    the positive imaginary part first.
    """
    Q: np.ndarray
    eigenvalues: np.ndarray
    omega: np.ndarray
    omega_inv: np.ndarray
    pi: np.ndarray
    theta: float
    eta: float
    B: float = float("nan")

    def __post_init__(self):
        for name in ("Q", "eigenvalues", "omega", "omega_inv", "pi"):
            arr = np.array(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self):
        return self.Q.shape[0]


def rate_matrix(rows):
    """Build Q from row-major rates; ``None`` on the diagonal means negative row sum."""
    if not isinstance(rows, (list, tuple, np.ndarray)):
        raise TypeError("Q needs to be a list of rows.")
    n = len(rows)
    Q = np.zeros((n, n))
    for i, row in enumerate(rows):
        if len(row) != n:
            raise InvalidRateMatrix("row {} has {} entries, expected {}".format(i + 1, len(row), n))
        for j, value in enumerate(row):
            if value is None:
                if i != j:
                    raise InvalidRateMatrix("only diagonal entries may be omitted (row {}, col {})".format(i + 1, j + 1))
                continue
            Q[i, j] = float(value)
    for i, row in enumerate(rows):
        if row[i] is None:
            Q[i, i] = -(Q[i].sum() - Q[i, i])
    return Q


def _reachable(adjacency, start=0):
    seen = {start}
    queue = deque([start])
    while queue:
        i = queue.popleft()
        for j in np.flatnonzero(adjacency[i]):
            if j not in seen:
                seen.add(int(j))
                queue.append(int(j))
    return seen


def is_irreducible(Q):
    edges = Q > 0
    np.fill_diagonal(edges, False)
    n = Q.shape[0]
    return len(_reachable(edges)) == n and len(_reachable(edges.T)) == n


def _normalize_column(v):
    v = v / np.linalg.norm(v)
    k = int(np.argmax(np.abs(v)))
    return v * (abs(v[k]) / v[k])


def _ordered_eigenpairs(Q):
    w, vr = linalg.eig(Q)
    scale = max(1.0, np.abs(Q).max())
    zero = int(np.argmin(np.abs(w)))
    units = []
    used_conjugates = 0
    for j in range(len(w)):
        if j == zero:
            continue
        lam = w[j]
        if abs(lam.imag) <= IMAG_TOL * scale:
            vec = _normalize_column(vr[:, j]).real.astype(complex)
            units.append(((lam.real, 0.0), [(complex(lam.real, 0.0), vec / np.linalg.norm(vec))]))
        elif lam.imag > 0:
            vec = _normalize_column(vr[:, j])
            units.append(((lam.real, lam.imag), [(lam, vec), (np.conj(lam), np.conj(vec))]))
        else:
            used_conjugates += 1
    if used_conjugates != sum(len(u[1]) == 2 for u in units):
        raise NotDiagonalizable("eigenvalues of Q are not closed under conjugation")
    units.sort(key=lambda unit: (-unit[0][0], unit[0][1]))
    pairs = [pair for _, members in units for pair in members]
    pairs.append((0j, np.ones(Q.shape[0], dtype=complex)))
    eigenvalues = np.array([p[0] for p in pairs], dtype=complex)
    omega = np.column_stack([p[1] for p in pairs])
    return eigenvalues, omega


def stationary_distribution(Q):
    basis = linalg.null_space(Q.T)
    if basis.shape[1] != 1:
        raise NotIrreducible("left null space of Q has dimension {}".format(basis.shape[1]))
    pi = basis[:, 0] / basis[:, 0].sum()
    if np.any(pi <= 0):
        raise NotIrreducible("stationary vector is not strictly positive: {}".format(pi))
    return pi


def validate(Q):
    """Check Q and return its SpectralData (with certified mixing constant B)."""
    Q = np.array(Q, dtype=float)
    if Q.ndim != 2 or Q.shape[0] != Q.shape[1]:
        raise InvalidRateMatrix("Q must be square, got shape {}".format(Q.shape))
    n = Q.shape[0]
    if n < 2:
        raise InvalidRateMatrix("Q needs at least 2 nodes")
    if not np.all(np.isfinite(Q)):
        raise InvalidRateMatrix("Q has non-finite entries")
    off = Q - np.diag(np.diag(Q))
    if np.any(off < 0):
        i, j = np.argwhere(off < 0)[0]
        raise InvalidRateMatrix("negative off-diagonal rate q[{},{}] = {}".format(i + 1, j + 1, Q[i, j]))
    row_sums = Q.sum(axis=1)
    bad = np.flatnonzero(np.abs(row_sums) > ROW_SUM_TOL)
    if bad.size:
        raise RowSumViolation("row {} sums to {:.3e}".format(bad[0] + 1, row_sums[bad[0]]))
    if not is_irreducible(Q):
        raise NotIrreducible("the migration graph of Q is not strongly connected")

    eigenvalues, omega = _ordered_eigenpairs(Q)
    cond = np.linalg.cond(omega)
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise NotDiagonalizable("eigenvector matrix condition number {:.3e} exceeds {:.0e}".format(cond, COND_LIMIT))
    omega_inv = np.linalg.inv(omega)
    residual = np.linalg.norm(Q @ omega - omega * eigenvalues, axis=0)
    if np.any(residual > EIGEN_RESIDUAL_TOL * max(1.0, np.abs(Q).max()) * np.linalg.norm(omega, axis=0)):
        raise NotDiagonalizable("eigen-residual {:.3e} too large".format(residual.max()))
    if np.any(eigenvalues[:-1].real >= 0):
        raise NotIrreducible("nonzero eigenvalue with non-negative real part")

    S = SpectralData(Q=Q, eigenvalues=eigenvalues, omega=omega, omega_inv=omega_inv,
                     pi=stationary_distribution(Q), theta=float(-np.trace(Q)),
                     eta=float(np.min(-eigenvalues[:-1].real)))
    B, _ = mixing_constants(S)
    S = replace(S, B=B)
    logger.debug("Validated Q (n=%d): theta=%.6g eta=%.6g B=%.6g", n, S.theta, S.eta, S.B)
    return S


def _real_part(M, what):
    scale = max(1.0, float(np.abs(M.real).max()))
    residue = float(np.abs(M.imag).max()) if np.iscomplexobj(M) else 0.0
    if residue > IMAG_TOL * scale:
        raise ComplexResidue("{} has imaginary residue {:.3e}".format(what, residue))
    return np.ascontiguousarray(M.real)


def semigroup(S, t):
    """P_t = omega diag(exp(theta_j t)) omega^-1, for any signed real t."""
    M = (S.omega * np.exp(S.eigenvalues * float(t))) @ S.omega_inv
    return _real_part(M, "P_{}".format(t))


def semigroup_grid(S, times):
    """Stack of P_t over an array of times, shape (len(times), n, n)."""
    times = np.asarray(times, dtype=float)
    scaled = np.exp(np.outer(times, S.eigenvalues))
    M = np.einsum("ij,kj,jl->kil", S.omega, scaled, S.omega_inv)
    return _real_part(M, "P_t grid")


def evolve_distribution(S, rho, times):
    """Rows rho P_t for each t in ``times``."""
    times = np.atleast_1d(np.asarray(times, dtype=float))
    left = np.asarray(rho, dtype=float) @ S.omega
    M = (left * np.exp(np.outer(times, S.eigenvalues))) @ S.omega_inv
    return _real_part(M, "rho P_t")


def mixing_deviation(S, times):
    """max_ij |P_t(i,j) - pi_j| on each time of the grid."""
    P = semigroup_grid(S, times)
    return np.abs(P - S.pi[None, None, :]).max(axis=(1, 2))


def mixing_constants(S, num=2001):
    """Return (B, eta) with B certified on a grid of [0, 20/eta] plus a 10% margin."""
    eta = float(np.min(-S.eigenvalues[:-1].real))
    times = np.linspace(0.0, 20.0 / eta, num)
    weighted = mixing_deviation(S, times) * np.exp(eta * times)
    B = MIXING_MARGIN * float(weighted.max())
    assert np.all(mixing_deviation(S, times) <= B * np.exp(-eta * times))
    return B, eta


def random_rate_matrix(n, rng, low=0.2, high=2.0):
    """Dense random generator with off-diagonal rates uniform in [low, high]."""
    Q = rng.uniform(low, high, size=(n, n))
    np.fill_diagonal(Q, 0.0)
    np.fill_diagonal(Q, -Q.sum(axis=1))
    return Q
