"""Stochastic equality-constrained SQP with sketched KKT solves.

Each step observes a noisy objective gradient and Hessian (constraints are
exact), assembles the KKT system of the local quadratic model with the
running Lagrangian-Hessian average B_t,

    [ B_t  G^T ] [dx  ]     [ grad_x L ]
    [ G    0   ] [dlam] = - [ c(x)     ],

solves it exactly (LU; the KKT matrix is symmetric indefinite) or with tau
sketch-and-project steps on the full (d+m)-dimensional system, and moves
the primal-dual pair by a banded stepsize.  The covariance machinery
applies to the primal block unchanged: trace sinks receive (t, x_t, alpha).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Tuple, Union

import numpy as np

from .inference import ConfidenceInterval, directional_ci
from .optimizer import DivergenceError, RngStreams, StepsizeSchedule, TraceSink
from .problems import grad_noise_factor, symmetric_noise
from .sketch import SketchSolveConfig, solve_newton_sketched

__all__ = [
    "EqConstrainedProblem",
    "SqpState",
    "kkt_assemble",
    "kkt_residual",
    "newton_kkt_solve",
    "sqp_step",
    "run_sqp",
    "inactive_functional_ci",
    "equality_qp",
    "maratos",
    "hs7",
    "builtin_problem",
]


@dataclass
class EqConstrainedProblem:
    """min f(x) subject to c(x) = 0 (m equality constraints).

    ``inactive`` lists the coordinates whose optimal value is not pinned by
    the constraints to first order (the tangent space at x* has a nonzero
    component there); only those coordinates carry asymptotic randomness,
    so inference targets their average.
    """

    name: str
    dim: int
    n_cons: int
    objective: Callable[[np.ndarray], float]
    grad: Callable[[np.ndarray], np.ndarray]
    hess: Callable[[np.ndarray], np.ndarray]
    cons: Callable[[np.ndarray], np.ndarray]
    jac: Callable[[np.ndarray], np.ndarray]
    cons_hess: Callable[[np.ndarray], np.ndarray]
    x_star: np.ndarray
    lam_star: np.ndarray
    inactive: Tuple[int, ...]
    x0: np.ndarray

    def lagrangian_hess(self, x: np.ndarray, lam: np.ndarray) -> np.ndarray:
        return self.hess(x) + np.tensordot(lam, self.cons_hess(x), axes=1)


def kkt_assemble(B: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Symmetric KKT matrix [[B, G^T], [G, 0]]."""
    d = B.shape[0]
    m = G.shape[0]
    K = np.zeros((d + m, d + m))
    K[:d, :d] = B
    K[:d, d:] = G.T
    K[d:, :d] = G
    return K


def kkt_residual(
    problem: EqConstrainedProblem, x: np.ndarray, lam: np.ndarray
) -> np.ndarray:
    """Stacked first-order residual [grad f + G^T lam; c(x)]."""
    return np.concatenate([
        problem.grad(x) + problem.jac(x).T @ lam,
        problem.cons(x),
    ])


def newton_kkt_solve(
    problem: EqConstrainedProblem,
    x0: Optional[np.ndarray] = None,
    lam0: Optional[np.ndarray] = None,
    tol: float = 1e-12,
    max_iter: int = 100,
) -> Tuple[np.ndarray, np.ndarray]:
    """Deterministic full-Newton solve of the KKT conditions.

    Used to derive / verify the reference solutions of the built-in
    problems; raises RuntimeError if the residual does not reach tol.
    """
    x = problem.x_star.copy() if x0 is None else np.asarray(x0, dtype=float).copy()
    lam = (problem.lam_star.copy() if lam0 is None
           else np.asarray(lam0, dtype=float).copy())
    d = problem.dim
    for _ in range(max_iter):
        res = kkt_residual(problem, x, lam)
        if np.linalg.norm(res, ord=np.inf) <= tol:
            return x, lam
        K = kkt_assemble(problem.lagrangian_hess(x, lam), problem.jac(x))
        delta = np.linalg.solve(K, -res)
        x = x + delta[:d]
        lam = lam + delta[d:]
    res = np.linalg.norm(kkt_residual(problem, x, lam), ord=np.inf)
    raise RuntimeError(f"KKT Newton did not converge (residual {res:.2e})")


@dataclass
class SqpState:
    t: int
    x: np.ndarray
    lam: np.ndarray
    B: np.ndarray
    last_alpha: Optional[float] = None


def sqp_step(
    state: SqpState,
    problem: EqConstrainedProblem,
    sigma2: float,
    cfg: SketchSolveConfig,
    schedule: StepsizeSchedule,
    rngs: RngStreams,
    grad_chol: Optional[np.ndarray] = None,
) -> SqpState:
    """One stochastic SQP step.

    The data stream is consumed in a fixed order: d normals for the
    gradient noise, then d(d+1)/2 normals for the symmetric Hessian noise.
    The Lagrangian Hessian sample uses the exact constraint Hessians
    weighted by the current multipliers:

        H_t = (hess f(x_t) + noise) + sum_i lam_t[i] hess c_i(x_t),
        B_{t+1} = (t B_t + H_t) / (t + 1).

    As in the unconstrained step, the KKT system's upper-left block is
    damped for t >= 1 with the vanishing sample-scaled ridge
    B_t + beta_t * ||H_t||_F * I, which keeps the early solves from
    amplifying the residual without bound; the reported average B_t is
    untouched and the ridge fades at the beta_t rate.
    """
    d = problem.dim
    t = state.t
    if grad_chol is None:
        grad_chol = grad_noise_factor(d, sigma2)
    zg = rngs.data.standard_normal(d)
    gbar = problem.grad(state.x) + grad_chol @ zg
    h_noise = symmetric_noise(d, sigma2, rngs.data)
    G = problem.jac(state.x)
    rhs = np.concatenate([gbar + G.T @ state.lam, problem.cons(state.x)])
    H = problem.hess(state.x) + h_noise \
        + np.tensordot(state.lam, problem.cons_hess(state.x), axes=1)
    if t == 0:
        b_solve = state.B
    else:
        ridge = schedule.beta_t(t) * float(np.linalg.norm(H, "fro"))
        b_solve = state.B + ridge * np.eye(d)
    K = kkt_assemble(b_solve, G)
    if cfg.is_exact:
        # the KKT matrix is indefinite, so the exact path is a plain LU solve
        delta = np.linalg.solve(K, -rhs)
    else:
        delta = solve_newton_sketched(K, rhs, cfg, rngs.sketch)
    alpha = schedule.draw(t, rngs.step)
    x_new = state.x + alpha * delta[:d]
    lam_new = state.lam + alpha * delta[d:]
    B_new = state.B * t
    B_new += H
    B_new /= t + 1
    return SqpState(t=t + 1, x=x_new, lam=lam_new, B=B_new, last_alpha=alpha)


def run_sqp(
    problem: EqConstrainedProblem,
    sigma2: float,
    cfg: SketchSolveConfig,
    schedule: StepsizeSchedule,
    n_iters: int,
    seed: Union[int, np.random.SeedSequence, RngStreams],
    sinks: Iterable[TraceSink] = (),
    divergence_norm: float = 1e8,
) -> SqpState:
    """Run n_iters SQP steps; sinks receive (t, x_t, alpha_{t-1})."""
    rngs = seed if isinstance(seed, RngStreams) else RngStreams.from_seed(seed)
    grad_chol = grad_noise_factor(problem.dim, sigma2)
    state = SqpState(
        t=0,
        x=problem.x0.copy(),
        lam=np.zeros(problem.n_cons),
        B=np.eye(problem.dim),
    )
    sinks = tuple(sinks)
    for _ in range(n_iters):
        state = sqp_step(state, problem, sigma2, cfg, schedule, rngs,
                         grad_chol=grad_chol)
        norm = float(np.linalg.norm(state.x)) + float(np.linalg.norm(state.lam))
        if not np.isfinite(norm) or norm > divergence_norm:
            raise DivergenceError(state.t, norm)
        for sink in sinks:
            sink(state.t, state.x, state.last_alpha)
    return state


def inactive_functional_ci(
    x: np.ndarray,
    alpha: float,
    xi_hat: np.ndarray,
    inactive: Tuple[int, ...],
    level: float = 0.95,
) -> ConfidenceInterval:
    """CI for the average of the constraint-free coordinates."""
    if len(inactive) == 0:
        raise ValueError("no inactive coordinates to average")
    w = np.zeros(x.shape[0])
    w[list(inactive)] = 1.0 / len(inactive)
    return directional_ci(x, alpha, xi_hat, w, level=level)


# ---------------------------------------------------------------------------
# built-in problems


def equality_qp() -> EqConstrainedProblem:
    """Convex QP with the first coordinate pinned: min .5 x'Ax + b'x, x_0 = 1.

    The reduced problem over the free coordinates is an unconstrained
    quadratic, so x* has a closed form; lam* = -(A x* + b)_0.
    """
    A = np.array([
        [2.0, 0.4, 0.2],
        [0.4, 1.5, 0.3],
        [0.2, 0.3, 1.0],
    ])
    b = np.array([0.5, -0.3, 0.2])
    free = [1, 2]
    y = np.linalg.solve(A[np.ix_(free, free)], -(b[free] + A[free, 0] * 1.0))
    x_star = np.concatenate([[1.0], y])
    lam_star = np.array([-(A @ x_star + b)[0]])
    zeros_ch = np.zeros((1, 3, 3))
    return EqConstrainedProblem(
        name="eqqp",
        dim=3,
        n_cons=1,
        objective=lambda x: 0.5 * x @ A @ x + b @ x,
        grad=lambda x: A @ x + b,
        hess=lambda x: A.copy(),
        cons=lambda x: np.array([x[0] - 1.0]),
        jac=lambda x: np.array([[1.0, 0.0, 0.0]]),
        cons_hess=lambda x: zeros_ch,
        x_star=x_star,
        lam_star=lam_star,
        inactive=(1, 2),
        x0=np.zeros(3),
    )


def maratos() -> EqConstrainedProblem:
    """min 2(x_0^2 + x_1^2 - 1) - x_0  s.t.  x_0^2 + x_1^2 = 1.

    Solution (1, 0) with multiplier -3/2; the tangent direction at the
    solution is e_1, so only x_1 is asymptotically random.
    """
    ch = 2.0 * np.eye(2)[None, :, :]
    return EqConstrainedProblem(
        name="maratos",
        dim=2,
        n_cons=1,
        objective=lambda x: 2.0 * (x[0] ** 2 + x[1] ** 2 - 1.0) - x[0],
        grad=lambda x: np.array([4.0 * x[0] - 1.0, 4.0 * x[1]]),
        hess=lambda x: 4.0 * np.eye(2),
        cons=lambda x: np.array([x[0] ** 2 + x[1] ** 2 - 1.0]),
        jac=lambda x: np.array([[2.0 * x[0], 2.0 * x[1]]]),
        cons_hess=lambda x: ch,
        x_star=np.array([1.0, 0.0]),
        lam_star=np.array([-1.5]),
        inactive=(1,),
        x0=np.array([0.8, 0.3]),
    )


def hs7() -> EqConstrainedProblem:
    """min log(1 + x_0^2) - x_1  s.t.  (1 + x_0^2)^2 + x_1^2 = 4.

    Solution (0, sqrt(3)) with multiplier 1/(2 sqrt(3)); the tangent
    direction at the solution is e_0, so only x_0 is asymptotically random.
    """

    def hess(x: np.ndarray) -> np.ndarray:
        h = np.zeros((2, 2))
        h[0, 0] = 2.0 * (1.0 - x[0] ** 2) / (1.0 + x[0] ** 2) ** 2
        return h

    def cons_hess(x: np.ndarray) -> np.ndarray:
        ch = np.zeros((1, 2, 2))
        ch[0, 0, 0] = 4.0 + 12.0 * x[0] ** 2
        ch[0, 1, 1] = 2.0
        return ch

    return EqConstrainedProblem(
        name="hs7",
        dim=2,
        n_cons=1,
        objective=lambda x: np.log1p(x[0] ** 2) - x[1],
        grad=lambda x: np.array([2.0 * x[0] / (1.0 + x[0] ** 2), -1.0]),
        hess=hess,
        cons=lambda x: np.array([(1.0 + x[0] ** 2) ** 2 + x[1] ** 2 - 4.0]),
        jac=lambda x: np.array([[4.0 * x[0] * (1.0 + x[0] ** 2), 2.0 * x[1]]]),
        cons_hess=cons_hess,
        x_star=np.array([0.0, np.sqrt(3.0)]),
        lam_star=np.array([1.0 / (2.0 * np.sqrt(3.0))]),
        inactive=(0,),
        x0=np.array([0.5, 1.5]),
    )


_BUILTIN = {"eqqp": equality_qp, "maratos": maratos, "hs7": hs7}


def builtin_problem(name: str) -> EqConstrainedProblem:
    try:
        factory = _BUILTIN[name]
    except KeyError:
        raise ValueError(f"unknown constrained problem {name!r}") from None
    return factory()
