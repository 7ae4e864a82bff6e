"""Empirical checks of the convergence conditions on convex quadratic
federations, where smoothness and every local minimizer are exact.

Client ``k`` holds ``F_k(w) = 0.5 (w - c_k)^T A_k (w - c_k)`` and the global
objective is their unweighted mean.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, LayoutError, SingularityError
from .nn import ParamVector
from .objectives import RegularizerParams, gamma_inexactness

STATIONARY_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class QuadraticProblem:
    A: np.ndarray  # (n_clients, d, d)
    c: np.ndarray  # (n_clients, d)

    def __post_init__(self):
        A = np.asarray(self.A, dtype=np.float64)
        c = np.asarray(self.c, dtype=np.float64)
        if A.ndim != 3 or A.shape[1] != A.shape[2] or c.shape != A.shape[:2]:
            raise LayoutError(f"A {A.shape} and c {c.shape} are inconsistent")
        if not np.allclose(A, A.transpose(0, 2, 1), rtol=0, atol=1e-12):
            raise ValueError("every A_k must be symmetric")
        if np.linalg.eigvalsh(A).min() <= 0:
            raise ValueError("every A_k must be positive definite")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "c", c)

    @property
    def n_clients(self) -> int:
        return self.A.shape[0]

    @property
    def dim(self) -> int:
        return self.A.shape[1]

    @property
    def smoothness(self) -> float:
        """L = max_k lambda_max(A_k)."""
        return float(np.linalg.eigvalsh(self.A).max())

    def local_value(self, k: int, w) -> float:
        r = np.asarray(w) - self.c[k]
        return 0.5 * float(r @ self.A[k] @ r)

    def local_grad(self, k: int, w) -> np.ndarray:
        return self.A[k] @ (np.asarray(w) - self.c[k])

    def value(self, w) -> float:
        return float(np.mean([self.local_value(k, w) for k in range(self.n_clients)]))

    def grad(self, w) -> np.ndarray:
        return np.mean([self.local_grad(k, w) for k in range(self.n_clients)], axis=0)

    def minimizer(self) -> np.ndarray:
        return np.linalg.solve(self.A.sum(axis=0), np.einsum("kij,kj->i", self.A, self.c))


def random_problem(rng: np.random.Generator, max_dim: int = 5, clients=(2, 5), eig_range=(0.5, 2.0)) -> QuadraticProblem:
    """Random rotations of diagonal spectra in ``eig_range``; centers ~ N(0, I)."""
    d = int(rng.integers(1, max_dim + 1))
    n = int(rng.integers(clients[0], clients[1] + 1))
    A, c = [], []
    for _ in range(n):
        Q, _ = np.linalg.qr(rng.normal(size=(d, d)))
        A.append(Q @ np.diag(rng.uniform(*eig_range, size=d)) @ Q.T)
        c.append(rng.normal(size=d))
    A = np.array(A)
    return QuadraticProblem(0.5 * (A + A.transpose(0, 2, 1)), np.array(c))


def estimate_B(problem: QuadraticProblem, sample_points) -> float | None:
    """max over points and clients of ||grad F_k(x)|| / ||grad f(x)||.

    Points where the global gradient is (numerically) zero are skipped;
    ``None`` if no point is usable.
    """
    best = None
    for x in sample_points:
        gf = float(np.linalg.norm(problem.grad(x)))
        if gf <= STATIONARY_TOL:
            continue
        ratio = max(float(np.linalg.norm(problem.local_grad(k, x))) for k in range(problem.n_clients)) / gf
        best = ratio if best is None else max(best, ratio)
    return best


def descent_rho(L: float, B: float, mu: float, gamma: float = 0.0) -> float:
    return (
        (1 - gamma * B) / mu
        - L * (1 + gamma) * B / mu**2
        - L * (1 + gamma) ** 2 * B**2 / (2 * mu**2)
    )


def exact_local_solve(
    problem: QuadraticProblem, k: int, w_global, w_hist, mu: float, xi: float
) -> ParamVector:
    """Unique minimizer of ``F_k(w) + (mu/2)(||w - w_g||^2 - xi ||w - w_h||^2)``.

    Solves ``(A_k + mu(1 - xi) I) w = A_k c_k + mu w_g - mu xi w_h``.
    """
    wg = _as_array(w_global)
    wh = _as_array(w_hist)
    H = problem.A[k] + mu * (1.0 - xi) * np.eye(problem.dim)
    try:
        np.linalg.cholesky(H)
    except np.linalg.LinAlgError:
        raise SingularityError(
            f"regularized Hessian of client {k} is not positive definite (mu={mu}, xi={xi})"
        ) from None
    rhs = problem.A[k] @ problem.c[k] + mu * wg - mu * xi * wh
    return ParamVector.flat(np.linalg.solve(H, rhs))


def _as_array(w) -> np.ndarray:
    return w.values if isinstance(w, ParamVector) else np.asarray(w, dtype=np.float64)


def local_objective_grad(problem, k, w, w_global, w_hist, mu, xi) -> np.ndarray:
    w, wg, wh = _as_array(w), _as_array(w_global), _as_array(w_hist)
    return problem.local_grad(k, w) + mu * ((w - wg) + xi * (wh - w))


def ball_points(center: np.ndarray, radius: float, count: int, rng: np.random.Generator) -> list[np.ndarray]:
    """Uniform samples from the closed ball."""
    d = center.size
    pts = []
    for _ in range(count):
        u = rng.normal(size=d)
        u /= np.linalg.norm(u)
        pts.append(center + radius * rng.uniform() ** (1.0 / d) * u)
    return pts


@dataclass(frozen=True)
class DescentRow:
    round: int
    f: float
    f_next: float
    bound: float  # f - rho * ||grad f||^2
    margin: float  # bound - f_next, >= 0 when satisfied
    satisfied: bool | None
    max_gamma: float


@dataclass(frozen=True)
class DescentReport:
    L: float
    B: float
    mu: float
    xi: float
    rho: float
    rows: list[DescentRow]
    B_iterations: int

    @property
    def passed(self) -> bool:
        return bool(self.rows) and all(r.satisfied for r in self.rows)


def _run_exact(problem, w0, mu, xi, rho, rounds):
    n = problem.n_clients
    w = w0.copy()
    hist = [w0.copy() for _ in range(n)]
    traj = [w0.copy()]
    rows = []
    reg = RegularizerParams(mu, xi)
    for t in range(rounds):
        local = [exact_local_solve(problem, k, w, hist[k], mu, xi).values for k in range(n)]
        gammas = []
        for k in range(n):
            g = gamma_inexactness(
                ParamVector.flat(local[k]),
                ParamVector.flat(w),
                ParamVector.flat(hist[k]),
                reg,
                ParamVector.flat(problem.local_grad(k, local[k])),
                ParamVector.flat(problem.local_grad(k, w)),
            )
            gammas.append(0.0 if g is None else g)
        w_next = np.mean(local, axis=0)
        f, f_next = problem.value(w), problem.value(w_next)
        gf2 = float(problem.grad(w) @ problem.grad(w))
        bound = f - rho * gf2
        margin = bound - f_next
        # Slack for floating-point rounding of f itself.
        ok = None if rho <= 0 else margin >= -1e-13 * (1.0 + abs(f))
        rows.append(DescentRow(t + 1, f, f_next, bound, margin, ok, max(gammas)))
        hist = local
        w = w_next
        traj.append(w.copy())
    return rows, traj


def descent_check(
    problem: QuadraticProblem,
    w0,
    rounds: int = 50,
    mu: float | None = None,
    xi: float = 0.5,
    rng: np.random.Generator | None = None,
    n_ball_points: int = 100,
    max_B_iterations: int = 10,
) -> DescentReport:
    """Exact (gamma = 0) local solves with full participation; checks
    ``f(w_next) <= f(w) - rho ||grad f(w)||^2`` every round.

    When ``mu`` is None it is set to ``6 L B^2``. B is estimated on random
    points in a ball of radius ``2||w0 - w*||`` around ``w*`` plus the iterate
    trajectory; since the trajectory depends on mu, the estimate is refined
    until it stops growing. Historical models start at ``w0``.
    """
    rng = rng or np.random.default_rng(0)
    w0 = _as_array(w0).astype(np.float64)
    L = problem.smoothness
    w_star = problem.minimizer()
    radius = 2.0 * float(np.linalg.norm(w0 - w_star))
    probe = ball_points(w_star, radius, n_ball_points, rng) + [w0]
    B = estimate_B(problem, probe)
    if B is None:
        raise ConfigError("every probe point is stationary; B is undefined")

    fixed_mu = mu is not None
    for it in range(1, max_B_iterations + 1):
        mu_t = mu if fixed_mu else 6.0 * L * B**2
        rho = descent_rho(L, B, mu_t)
        if rho <= 0:
            warnings.warn(f"rho = {rho:.3g} <= 0 for mu = {mu_t:.3g}; descent check skipped")
        rows, traj = _run_exact(problem, w0, mu_t, xi, rho, rounds)
        B_new = estimate_B(problem, probe + traj)
        if B_new is None or B_new <= B * (1 + 1e-12):
            break
        B = B_new
    return DescentReport(L, B, mu_t, xi, rho, rows, it)


def xi_closed_form(p: float) -> float:
    """Limit of E[1/gap] under Bernoulli(p) participation: p ln p / (p - 1)."""
    if not 0 < p < 1:
        raise ConfigError("participation rate must lie in (0, 1)")
    return p * math.log(p) / (p - 1)


@dataclass(frozen=True)
class XiExpectation:
    p: float
    empirical: float
    closed_form: float
    samples: int

    @property
    def rel_error(self) -> float:
        return abs(self.empirical - self.closed_form) / self.closed_form


def xi_expectation_check(
    p: float, trials: int = 100_000, n_clients: int = 10, burn_in: int = 100, seed: int = 0
) -> XiExpectation:
    """Simulate ``trials`` rounds of independent Bernoulli(p) participation for
    ``n_clients`` clients and average 1/gap over participations after
    ``burn_in`` rounds that have an earlier participation."""
    closed = xi_closed_form(p)
    if trials < 1:
        raise ConfigError("trials must be positive")
    rng = np.random.default_rng(seed)
    total = 0.0
    count = 0
    for _ in range(n_clients):
        rounds = np.flatnonzero(rng.random(trials) < p)
        if rounds.size < 2:
            continue
        gaps = np.diff(rounds)
        keep = rounds[1:] >= burn_in
        total += float(np.sum(1.0 / gaps[keep]))
        count += int(keep.sum())
    if count == 0:
        raise ConfigError("no usable participations; increase trials")
    return XiExpectation(p, total / count, closed, count)
