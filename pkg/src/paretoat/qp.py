"""Lower-level optimization of Pareto adversarial training.

Loss statistics are tracked over a sliding window of per-batch loss means
(component order fixed as 0=natural, 1=PGD, 2=flow, 3=RT). From the window's
mean vector mu and covariance Sigma we assemble the quadratic form

    P = 8 (diag(Sigma) + diag(mu mu^T)) - 2 (Sigma + mu mu^T)

whose value alpha^T P alpha equals the summed expected squared differences
between all weighted loss pairs. The weights alpha are found by minimizing
alpha^T P alpha subject to

    [0 mu1 mu2 mu3] alpha = r,   sum(alpha) = 1,   alpha >= 0,

solved in float64 by a small dense active-set method, with an exhaustive
simplex-lattice oracle for independent verification.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Sequence

import numpy as np

from .errors import InputError, NumericalError

RIDGE = 1e-6
LOSS_NAMES = ("nat", "pgd", "flow", "rt")

DIAGNOSTIC_COLUMNS = (
    "step",
    "mu0",
    "mu1",
    "mu2",
    "mu3",
    "alpha0",
    "alpha1",
    "alpha2",
    "alpha3",
    "r_requested",
    "r_effective",
    "qp_objective",
    "clamped",
)


@dataclass
class LossMoments:
    mu: np.ndarray
    sigma: np.ndarray
    window: int
    samples_seen: int


@dataclass
class QPProblem:
    P: np.ndarray
    mu: np.ndarray
    r: float
    r_requested: float
    clamped: bool = False

    @property
    def a_eq(self) -> np.ndarray:
        return np.array(
            [[0.0, self.mu[1], self.mu[2], self.mu[3]], [1.0, 1.0, 1.0, 1.0]]
        )

    @property
    def b_eq(self) -> np.ndarray:
        return np.array([self.r, 1.0])


@dataclass
class ParetoWeights:
    alpha: np.ndarray
    objective: float
    active_set: tuple = field(default_factory=tuple)


def estimate_moments(loss_history: Sequence, window: int) -> LossMoments:
    """Mean and unbiased covariance of the most recent min(window, seen) samples.

    A window of 1 (or a single sample) yields zero covariance; the ridge
    RIDGE * I is always added so Sigma stays usable downstream.
    """
    hist = np.asarray(loss_history, dtype=np.float64)
    if hist.size == 0:
        raise InputError("empty loss history")
    if hist.ndim != 2 or hist.shape[1] != 4:
        raise InputError(f"loss history must be (n, 4), got {hist.shape}")
    recent = hist[-min(window, hist.shape[0]):]
    mu = recent.mean(axis=0)
    if window >= 2 and recent.shape[0] >= 2:
        sigma = np.cov(recent.T, ddof=1)
    else:
        sigma = np.zeros((4, 4))
    sigma = sigma + RIDGE * np.eye(4)
    return LossMoments(mu=mu, sigma=sigma, window=window, samples_seen=hist.shape[0])


def build_qp(moments: LossMoments, r: float) -> QPProblem:
    """Assemble P and clamp r into the feasible interval [0, max(mu[1:])]."""
    mu = np.asarray(moments.mu, dtype=np.float64)
    sigma = np.asarray(moments.sigma, dtype=np.float64)
    m = sigma + np.outer(mu, mu)
    p = 8.0 * np.diag(np.diag(m)) - 2.0 * m
    hi = float(np.max(mu[1:]))
    if hi <= 0.0 and r > 0.0:
        raise NumericalError(
            f"infeasible robustness level r={r}: all robust-loss means <= 0 ({mu[1:]})"
        )
    r_eff = min(max(r, 0.0), max(hi, 0.0))
    return QPProblem(P=p, mu=mu, r=r_eff, r_requested=r, clamped=(r_eff != r))


def _kkt_solve(p: np.ndarray, a_eq: np.ndarray, b_eq: np.ndarray, active: tuple):
    """Solve the equality-constrained subproblem with coordinates in `active`
    pinned to zero. Returns (alpha, bound multipliers) or None if inconsistent.
    """
    n = 4
    rows = [np.eye(n)[i] for i in active]
    a = np.vstack([a_eq] + rows) if rows else a_eq
    b = np.concatenate([b_eq, np.zeros(len(rows))])
    m = a.shape[0]
    kkt = np.zeros((n + m, n + m))
    kkt[:n, :n] = 2.0 * p
    kkt[:n, n:] = a.T
    kkt[n:, :n] = a
    rhs = np.concatenate([np.zeros(n), b])
    sol, residual, *_ = np.linalg.lstsq(kkt, rhs, rcond=None)
    alpha = sol[:n]
    if np.linalg.norm(a @ alpha - b, ord=np.inf) > 1e-8:
        return None
    lam = {i: -sol[n + 2 + k] for k, i in enumerate(active)}
    return alpha, lam


def solve_qp(problem: QPProblem) -> ParetoWeights:
    """Active-set minimizer of alpha^T P alpha under the equality rows and
    alpha >= 0. Iteratively pins the most-violated coordinate to zero and
    releases pinned coordinates whose multiplier says the bound is not binding.
    """
    p = np.asarray(problem.P, dtype=np.float64)
    a_eq, b_eq = problem.a_eq, problem.b_eq
    active: list[int] = []
    blocked: set = set()
    tol = 1e-10
    for _pivot in range(100):
        solved = _kkt_solve(p, a_eq, b_eq, tuple(active))
        if solved is None:
            # The last activation made the constraints inconsistent; undo it
            # and refuse to pick that coordinate again.
            if not active:
                raise NumericalError(_dump(problem, active, "inconsistent base problem"))
            bad = active.pop()
            blocked.add(bad)
            continue
        alpha, lam = solved
        neg = [i for i in range(4) if i not in active and alpha[i] < -tol and i not in blocked]
        if neg:
            active.append(min(neg, key=lambda i: alpha[i]))
            continue
        releasable = [i for i in active if lam[i] < -tol]
        if releasable:
            drop = min(releasable, key=lambda i: lam[i])
            active.remove(drop)
            blocked.clear()
            continue
        if alpha.min() < -1e-9:
            raise NumericalError(_dump(problem, active, f"negative weight {alpha}"))
        return ParetoWeights(
            alpha=alpha,
            objective=float(alpha @ p @ alpha),
            active_set=tuple(sorted(active)),
        )
    raise NumericalError(_dump(problem, active, "active-set cycling beyond 100 pivots"))


def _dump(problem: QPProblem, active, reason: str) -> str:
    return (
        f"QP solve failed ({reason}); P={problem.P.tolist()}, mu={problem.mu.tolist()}, "
        f"r={problem.r}, active={sorted(active)}"
    )


def pairwise_objective(alpha: np.ndarray, mu: np.ndarray, sigma: np.ndarray) -> float:
    """Direct evaluation of sum_{i,j} E[(alpha_i L_i - alpha_j L_j)^2] expanded
    through mu and Sigma; intentionally independent of the P assembly.
    """
    total = 0.0
    for i in range(4):
        for j in range(4):
            total += (
                alpha[i] ** 2 * (sigma[i, i] + mu[i] ** 2)
                + alpha[j] ** 2 * (sigma[j, j] + mu[j] ** 2)
                - 2.0 * alpha[i] * alpha[j] * (sigma[i, j] + mu[i] * mu[j])
            )
    return float(total)


@lru_cache(maxsize=8)
def _simplex_lattice(n: int) -> np.ndarray:
    blocks = []
    for k0 in range(n + 1):
        for k1 in range(n + 1 - k0):
            k2 = np.arange(n + 1 - k0 - k1)
            k3 = n - k0 - k1 - k2
            blocks.append(
                np.stack([np.full_like(k2, k0), np.full_like(k2, k1), k2, k3], axis=1)
            )
    lattice = np.concatenate(blocks, axis=0).astype(np.float64) / n
    lattice.flags.writeable = False
    return lattice


def simplex_oracle(problem: QPProblem, grid_step: float, sigma: np.ndarray | None = None) -> ParetoWeights:
    """Exhaustive scan of the simplex lattice intersected with the r-hyperplane.

    Feasibility tolerance is grid_step * max|mu|, widened once (doubled) if no
    lattice point qualifies. The objective is evaluated by the direct pairwise
    expansion, so this is an oracle independent of both P and the solver.
    """
    if not 0.0 < grid_step <= 0.5:
        raise InputError(f"grid step must be in (0, 0.5], got {grid_step}")
    mu = problem.mu
    if sigma is None:
        sigma = _sigma_from_p(problem.P, mu)
    lattice = _simplex_lattice(int(round(1.0 / grid_step)))
    tol = grid_step * max(float(np.max(np.abs(mu))), 1e-12)
    gap = np.abs(lattice[:, 1:] @ mu[1:] - problem.r)
    feasible = lattice[gap <= tol]
    if feasible.shape[0] == 0:
        feasible = lattice[gap <= 2.0 * tol]
    if feasible.shape[0] == 0:
        raise NumericalError(
            f"no lattice point within widened tolerance {2.0 * tol} of r={problem.r}"
        )
    sii = np.diag(sigma) + mu**2
    m = sigma + np.outer(mu, mu)
    # Literal pairwise expansion, vectorized over lattice rows.
    vals = np.zeros(feasible.shape[0])
    for i in range(4):
        for j in range(4):
            vals += (
                feasible[:, i] ** 2 * sii[i]
                + feasible[:, j] ** 2 * sii[j]
                - 2.0 * feasible[:, i] * feasible[:, j] * m[i, j]
            )
    best_idx = int(np.argmin(vals))
    return ParetoWeights(alpha=feasible[best_idx].copy(), objective=float(vals[best_idx]))


def _sigma_from_p(p: np.ndarray, mu: np.ndarray) -> np.ndarray:
    """Invert P = 8 diag(M) - 2 M with M = Sigma + mu mu^T."""
    m = np.zeros((4, 4))
    off = ~np.eye(4, dtype=bool)
    m[off] = -p[off] / 2.0
    np.fill_diagonal(m, np.diag(p) / 6.0)
    return m - np.outer(mu, mu)
