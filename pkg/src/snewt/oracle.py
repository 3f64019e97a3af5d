"""Ground-truth limiting covariance of the sketched Newton iterates.

For a population Hessian B* and gradient-noise sandwich
Omega* = (B*)^{-1} E[g g^T] (B*)^{-1}, the scaled iterates
(x_t - x*) / sqrt(alpha_t) converge to N(0, Xi*), where Xi* solves the
Lyapunov equation

    ((1 - delta/2) I - C*) Xi* + Xi* ((1 - delta/2) I - C*)^T = Lambda,

with delta = 1/c_beta when beta == 1 and 0 otherwise,
C* = E[I - Pi]^tau the expected residual operator of tau inner sketch
steps, and Lambda = E[(I - Ctilde) Omega* (I - Ctilde)^T] over the random
tau-step residual product Ctilde.  Because I - C* is symmetric positive
definite the solution is explicit: with I - C* = U diag(s) U^T,

    Xi* = U (Theta o (U^T Lambda U)) U^T,   Theta_kl = 1 / (s_k + s_l - delta).

Exact inner solves are the degenerate case C* = 0, Lambda = Omega*, giving
Xi* = Omega* / (2 - delta).

Uniform-coordinate sketching admits closed forms for every expectation; the
Gaussian sketch falls back to Monte Carlo with reported standard errors.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .problems import RegressionModel, _sigmoid
from .sketch import SketchDistribution, projection_matrix

__all__ = [
    "OracleCovariance",
    "population_hessian",
    "grad_second_moment",
    "omega_star",
    "single_step_projection_expectation",
    "spread_operator_uc",
    "c_star",
    "lambda_matrix",
    "xi_star",
    "oracle_covariance",
    "lyapunov_residual",
    "rel_cov_error",
    "rel_var_error",
]


def _delta(beta: float, c_beta: float) -> float:
    return 1.0 / c_beta if beta == 1.0 else 0.0


def _mc_hessian_moments(model: RegressionModel, n_mc: int,
                        rng: np.random.Generator, chunk: int = 100_000):
    """MC means and stderr of the Hessian and gradient outer products."""
    d = model.dim
    sum_h = np.zeros((d, d))
    sum_h2 = np.zeros((d, d))
    sum_m = np.zeros((d, d))
    sum_m2 = np.zeros((d, d))
    done = 0
    while done < n_mc:
        n = min(chunk, n_mc - done)
        z = rng.standard_normal((n, d))
        xi = z @ model.chol_a.T
        zz = xi @ model.x_star
        p = np.empty(n)
        pos = zz >= 0
        p[pos] = 1.0 / (1.0 + np.exp(-zz[pos]))
        e = np.exp(zz[~pos])
        p[~pos] = e / (1.0 + e)
        w_h = p * (1.0 - p)
        # Hessian samples are w_h xi xi^T regardless of the drawn label
        h = np.einsum("n,ni,nj->ij", w_h, xi, xi)
        h2 = np.einsum("n,ni,nj->ij", w_h**2, xi**2, xi**2)
        # gradient samples need the label: g = -y sigmoid(-y z) xi
        y = np.where(rng.random(n) < p, 1.0, -1.0)
        coef = np.empty(n)
        neg = -y * zz
        pos = neg >= 0
        coef[pos] = 1.0 / (1.0 + np.exp(-neg[pos]))
        e = np.exp(neg[~pos])
        coef[~pos] = e / (1.0 + e)
        w_m = coef**2
        m = np.einsum("n,ni,nj->ij", w_m, xi, xi)
        m2 = np.einsum("n,ni,nj->ij", w_m**2, xi**2, xi**2)
        sum_h += h
        sum_h2 += h2
        sum_m += m
        sum_m2 += m2
        done += n
    mean_h = sum_h / n_mc
    mean_m = sum_m / n_mc
    se_h = np.sqrt(np.maximum(sum_h2 / n_mc - mean_h**2, 0.0) / n_mc)
    se_m = np.sqrt(np.maximum(sum_m2 / n_mc - mean_m**2, 0.0) / n_mc)
    return mean_h, se_h, mean_m, se_m


def population_hessian(
    model: RegressionModel,
    n_mc: int = 1_000_000,
    rng: Optional[np.random.Generator] = None,
):
    """(B*, stderr) at x*.  Linear: exactly Sigma_a (stderr None)."""
    if model.family == "linear":
        return model.sigma_a.copy(), None
    rng = np.random.default_rng(0) if rng is None else rng
    mean_h, se_h, _, _ = _mc_hessian_moments(model, n_mc, rng)
    return 0.5 * (mean_h + mean_h.T), se_h


def grad_second_moment(
    model: RegressionModel,
    n_mc: int = 1_000_000,
    rng: Optional[np.random.Generator] = None,
):
    """(E[g g^T] at x*, stderr).  Linear: exactly sigma^2 Sigma_a."""
    if model.family == "linear":
        return model.sigma**2 * model.sigma_a, None
    rng = np.random.default_rng(0) if rng is None else rng
    _, _, mean_m, se_m = _mc_hessian_moments(model, n_mc, rng)
    return 0.5 * (mean_m + mean_m.T), se_m


def omega_star(
    model: RegressionModel,
    n_mc: int = 1_000_000,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """Sandwich covariance (B*)^{-1} E[g g^T] (B*)^{-1} at x*."""
    if model.family == "linear":
        return model.sigma**2 * np.linalg.inv(model.sigma_a)
    rng = np.random.default_rng(0) if rng is None else rng
    b, _, m, _ = _mc_hessian_moments(model, n_mc, rng)
    omega = np.linalg.solve(b, np.linalg.solve(b, m).T)
    return 0.5 * (omega + omega.T)


def single_step_projection_expectation(
    B: np.ndarray,
    dist: SketchDistribution,
    n_mc: int = 200_000,
    rng: Optional[np.random.Generator] = None,
):
    """(P, stderr) with P = E[Pi], Pi = B S (S^T B^2 S)^+ S^T B.

    Uniform-coordinate sketches give the closed form
    P = (1/d) sum_i B e_i e_i^T B / (B^2)_{ii}; the Gaussian sketch is
    averaged by Monte Carlo.
    """
    d = B.shape[0]
    if dist.kind == "uniform_coordinate":
        coldens = (B * B).sum(axis=0)
        if np.any(coldens <= 0.0):
            raise ValueError("B has a zero column; projection undefined")
        P = (B / coldens) @ B / d
        return 0.5 * (P + P.T), None
    if dist.kind != "gaussian":
        raise ValueError(f"no oracle for sketch kind {dist.kind!r}")
    rng = np.random.default_rng(0) if rng is None else rng
    chol = dist.cov_factor(d)
    total = np.zeros((d, d))
    total2 = np.zeros((d, d))
    for _ in range(n_mc):
        z = rng.standard_normal((d, dist.q))
        s = z if chol is None else chol @ z
        pi = projection_matrix(B, s)
        total += pi
        total2 += pi * pi
    mean = total / n_mc
    se = np.sqrt(np.maximum(total2 / n_mc - mean**2, 0.0) / n_mc)
    return 0.5 * (mean + mean.T), se


def _uc_projectors(B: np.ndarray) -> np.ndarray:
    d = B.shape[0]
    coldens = (B * B).sum(axis=0)
    if np.any(coldens <= 0.0):
        raise ValueError("B has a zero column; projection undefined")
    cols = B.T  # row i is B[:, i] for symmetric B
    return cols[:, :, None] * cols[:, None, :] / coldens[:, None, None]


def spread_operator_uc(B: np.ndarray, M: np.ndarray) -> np.ndarray:
    """T(M) = E[(I - Pi) M (I - Pi)^T] for uniform-coordinate sketches."""
    d = B.shape[0]
    projs = _uc_projectors(B)
    eye = np.eye(d)
    out = np.zeros((d, d))
    for i in range(d):
        r = eye - projs[i]
        out += r @ M @ r
    return out / d


def c_star(P: np.ndarray, tau: Optional[int]) -> np.ndarray:
    """Expected tau-step residual operator (I - P)^tau; exact solves give 0."""
    d = P.shape[0]
    if tau is None:
        return np.zeros((d, d))
    if tau < 1:
        raise ValueError("tau must be >= 1 or None")
    return np.linalg.matrix_power(np.eye(d) - P, tau)


def lambda_matrix(
    B: np.ndarray,
    omega: np.ndarray,
    dist: SketchDistribution,
    tau: Optional[int],
    n_mc: int = 100_000,
    rng: Optional[np.random.Generator] = None,
):
    """(Lambda, stderr) with Lambda = E[(I - Ctilde) Omega (I - Ctilde)^T].

    Expanding the product, Lambda = Omega - C* Omega - Omega C*^T + Q_tau
    with Q_tau the tau-fold spread operator applied to Omega; independence
    of the per-step sketches makes Q_tau = T^tau(Omega).  This is evaluated
    exactly for uniform-coordinate sketches and by sequence-level Monte
    Carlo for Gaussian sketches.
    """
    d = B.shape[0]
    if tau is None:
        return omega.copy(), None
    if dist.kind == "uniform_coordinate":
        P, _ = single_step_projection_expectation(B, dist)
        C = c_star(P, tau)
        q = omega.copy()
        for _ in range(tau):
            q = spread_operator_uc(B, q)
        lam = omega - C @ omega - omega @ C.T + q
        return 0.5 * (lam + lam.T), None
    if dist.kind != "gaussian":
        raise ValueError(f"no oracle for sketch kind {dist.kind!r}")
    rng = np.random.default_rng(0) if rng is None else rng
    chol = dist.cov_factor(d)
    eye = np.eye(d)
    total = np.zeros((d, d))
    total2 = np.zeros((d, d))
    for _ in range(n_mc):
        resid = eye.copy()
        for _ in range(tau):
            z = rng.standard_normal((d, dist.q))
            s = z if chol is None else chol @ z
            resid = (eye - projection_matrix(B, s)) @ resid
        half = (eye - resid) @ omega @ (eye - resid).T
        total += half
        total2 += half * half
    mean = total / n_mc
    se = np.sqrt(np.maximum(total2 / n_mc - mean**2, 0.0) / n_mc)
    return 0.5 * (mean + mean.T), se


def xi_star(
    C: np.ndarray, lam: np.ndarray, beta: float, c_beta: float
) -> np.ndarray:
    """Solve the limiting Lyapunov equation for Xi*.

    The exact-solve degenerate case (C identically zero) short-circuits to
    Lambda / (2 - delta) so those identities hold with no roundoff.
    """
    delta = _delta(beta, c_beta)
    if 2.0 - delta <= 0.0:
        raise ValueError("beta = 1 requires c_beta > 1/2")
    if not np.any(C):
        return lam / (2.0 - delta)
    sym = 0.5 * (C + C.T)
    svals, U = np.linalg.eigh(np.eye(C.shape[0]) - sym)
    if svals.min() <= 0.5 * delta:
        raise ValueError("I - C* must have eigenvalues above delta/2")
    theta = 1.0 / (svals[:, None] + svals[None, :] - delta)
    out = U @ (theta * (U.T @ lam @ U)) @ U.T
    return 0.5 * (out + out.T)


def lyapunov_residual(
    xi: np.ndarray, C: np.ndarray, lam: np.ndarray, beta: float, c_beta: float
) -> np.ndarray:
    """A Xi + Xi A^T - Lambda with A = (1 - delta/2) I - C (zero at solution)."""
    A = (1.0 - 0.5 * _delta(beta, c_beta)) * np.eye(C.shape[0]) - C
    return A @ xi + xi @ A.T - lam


@dataclass
class OracleCovariance:
    """Ground-truth matrices for one problem/method configuration."""

    b_star: np.ndarray
    omega: np.ndarray
    c_star: np.ndarray
    lam: np.ndarray
    xi: np.ndarray
    beta: float
    c_beta: float
    mc_stderr: Dict[str, np.ndarray] = field(default_factory=dict)


def oracle_covariance(
    model: RegressionModel,
    dist: SketchDistribution,
    tau: Optional[int],
    beta: float,
    c_beta: float,
    n_mc: int = 200_000,
    seed: int = 0,
) -> OracleCovariance:
    """Assemble B*, Omega*, C*, Lambda and Xi* for a regression model."""
    rng = np.random.default_rng(seed)
    stderr: Dict[str, np.ndarray] = {}
    if model.family == "linear":
        b = model.sigma_a.copy()
        omega = model.sigma**2 * np.linalg.inv(model.sigma_a)
    else:
        mean_h, se_h, mean_m, se_m = _mc_hessian_moments(
            model, max(n_mc, 200_000), rng)
        b = 0.5 * (mean_h + mean_h.T)
        stderr["b_star"] = se_h
        stderr["grad_second_moment"] = se_m
        omega = np.linalg.solve(b, np.linalg.solve(b, mean_m).T)
        omega = 0.5 * (omega + omega.T)
    if tau is None:
        C = np.zeros_like(b)
        lam, se_lam = omega.copy(), None
    else:
        P, se_p = single_step_projection_expectation(b, dist, n_mc=n_mc, rng=rng)
        if se_p is not None:
            stderr["projection"] = se_p
        C = c_star(P, tau)
        lam, se_lam = lambda_matrix(b, omega, dist, tau, n_mc=n_mc, rng=rng)
        if se_lam is not None:
            stderr["lambda"] = se_lam
    xi = xi_star(C, lam, beta, c_beta)
    return OracleCovariance(
        b_star=b, omega=omega, c_star=C, lam=lam, xi=xi,
        beta=beta, c_beta=c_beta, mc_stderr=stderr,
    )


def rel_cov_error(est: np.ndarray, truth: np.ndarray) -> float:
    """Spectral-norm relative error ||est - truth|| / ||truth||."""
    return float(np.linalg.norm(est - truth, 2) / np.linalg.norm(truth, 2))


def rel_var_error(
    est: np.ndarray, truth: np.ndarray, w: Optional[np.ndarray] = None
) -> float:
    """Signed relative error of the variance along w (default: all ones)."""
    if w is None:
        w = np.ones(truth.shape[0])
    denom = float(w @ truth @ w)
    if denom <= 0.0:
        raise ValueError("truth has no variance along w")
    return float(w @ (est - truth) @ w) / denom
