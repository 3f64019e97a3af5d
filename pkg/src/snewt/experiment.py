"""Replication-batched Monte-Carlo experiment harness.

run_experiment advances every replication of a configured study at once:
iterates are stacked (n_reps, d) arrays, Hessian averages (n_reps, d, d),
and each replication owns three seeded generator streams (data / sketch /
stepsize, seeded base_seed XOR replication index) consumed in fixed-size
blocks.  Per-replication randomness therefore never depends on how the
replications are sharded across workers, and a fixed seed reproduces every
output byte for byte.  A replication that trips the divergence guard is
frozen, excluded from every aggregate from that point on, and counted.

At every record_every-th iteration the harness compares the running
covariance estimators against the ground-truth limiting covariance and
records confidence-interval hits; aggregates go to a per-checkpoint CSV
plus a final summary CSV (schemas documented in the README).
"""

from __future__ import annotations

import csv
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Dict, List, NamedTuple, Optional, Tuple

import numpy as np

from .config import (ExperimentConfig, ExperimentSection, MethodConfig,
                     ProblemConfig, ScheduleConfig)
from .inference import normal_quantile
from .optimizer import RngStreams, StepsizeSchedule
from .oracle import omega_star, oracle_covariance
from .problems import RegressionModel, grad_noise_factor
from .sketch import SketchSolveConfig
from .sqp import EqConstrainedProblem

__all__ = [
    "AGGREGATE_COLUMNS",
    "SUMMARY_COLUMNS",
    "ExperimentResult",
    "run_experiment",
    "write_aggregate_csv",
    "write_summary_csv",
    "sqp_empirical_xi",
]

AGGREGATE_COLUMNS = (
    "t",
    "rel_cov_err_wsc",
    "rel_cov_err_plugin",
    "rel_cov_err_bm",
    "cov_wsc",
    "cov_plugin",
    "cov_bm",
    "cov_oracle",
    "rel_var_err_wsc",
    "rel_var_err_plugin",
)

SUMMARY_COLUMNS = (
    "estimator",
    "final_t",
    "rel_cov_err",
    "rel_var_err",
    "coverage",
    "coverage_oracle",
    "n_reps",
    "n_diverged",
)

# Iterations of randomness drawn per generator call.  Fixed so that seeded
# runs are reproducible; block draws consume the underlying bit streams in
# the same element order as per-iteration draws, so for every data layout
# except the logistic label stream the block size does not even change the
# sampled values.
_CHUNK = 1024
_DIVERGENCE_NORM = 1e8

_SUFFIX = {"wsc": "wsc", "plugin": "plugin", "batchmeans": "bm"}


def _sigmoid_vec(a: np.ndarray) -> np.ndarray:
    """Elementwise overflow-safe logistic function."""
    out = np.empty_like(a)
    pos = a >= 0.0
    out[pos] = 1.0 / (1.0 + np.exp(-a[pos]))
    ea = np.exp(a[~pos])
    out[~pos] = ea / (1.0 + ea)
    return out


# ---------------------------------------------------------------------------
# batched accumulators (stacked counterparts of the covariance module;
# equality with the sequential implementations is pinned by tests)


class _BatchedWsc:
    """Weighted sample covariance aggregates for a stack of replications."""

    def __init__(self, n: int, d: int):
        self.t = 0
        self.W = np.zeros((n, d, d))
        self.v = np.zeros((n, d))
        self.xbar = np.zeros((n, d))
        self.a = 0.0

    def update(self, X: np.ndarray, phi: float) -> None:
        t = self.t
        wgt = 1.0 / phi
        self.W *= t
        self.W += np.einsum("ri,rj->rij", X, X) * wgt
        self.W /= t + 1
        self.v *= t
        self.v += X * wgt
        self.v /= t + 1
        self.xbar *= t
        self.xbar += X
        self.xbar /= t + 1
        self.a = (t * self.a + wgt) / (t + 1)
        self.t = t + 1

    def estimate(self) -> np.ndarray:
        xb = self.xbar
        xi = (self.W
              - np.einsum("ri,rj->rij", self.v, xb)
              - np.einsum("ri,rj->rij", xb, self.v)
              + self.a * np.einsum("ri,rj->rij", xb, xb))
        return 0.5 * (xi + xi.transpose(0, 2, 1))


class _BatchedPlugin:
    """Average gradient outer product for a stack of replications."""

    def __init__(self, n: int, d: int):
        self.t = 0
        self.G = np.zeros((n, d, d))

    def update(self, g: np.ndarray) -> None:
        t = self.t
        self.G *= t
        self.G += np.einsum("ri,rj->rij", g, g)
        self.G /= t + 1
        self.t = t + 1


def _plugin_estimate_batched(G: np.ndarray, B: np.ndarray,
                             beta: float, c_beta: float) -> np.ndarray:
    denom = 2.0 - (1.0 / c_beta if beta == 1.0 else 0.0)
    if denom <= 0.0:
        raise ValueError("beta = 1 requires c_beta > 1/2")
    inner = np.linalg.solve(B, G)
    est = np.linalg.solve(B, inner.transpose(0, 2, 1)) / denom
    return 0.5 * (est + est.transpose(0, 2, 1))


class _BatchedBatchMeans:
    """Increasing-batch spread estimator for a stack of replications."""

    def __init__(self, n: int, d: int, beta: float):
        if not 0.5 < beta < 1.0:
            raise ValueError("batch means need beta in (1/2, 1)")
        self._exponent = 2.0 / (1.0 - beta)
        self.t = 0
        self.mean = np.zeros((n, d))
        self._m = 1
        self._next_boundary = self.boundary(1)
        self._batch_sum = np.zeros((n, d))
        self._batch_n = 0
        self._S2 = np.zeros((n, d, d))
        self._S1 = np.zeros((n, d))
        self._N = 0
        self.n_completed = 0

    def boundary(self, m: int) -> int:
        return int(np.floor(float(m) ** self._exponent))

    def update(self, X: np.ndarray) -> None:
        t = self.t
        self.mean = (t * self.mean + X) / (t + 1)
        self.t = t + 1
        self._batch_sum += X
        self._batch_n += 1
        if self.t == self._next_boundary:
            nb = self._batch_n
            bbar = self._batch_sum / nb
            self._S2 += nb * np.einsum("ri,rj->rij", bbar, bbar)
            self._S1 += nb * bbar
            self._N += nb
            self.n_completed += 1
            self._batch_sum = np.zeros_like(self._batch_sum)
            self._batch_n = 0
            self._m += 1
            self._next_boundary = self.boundary(self._m)

    def estimate(self) -> Optional[np.ndarray]:
        if self.n_completed < 2:
            return None
        xw = self._S1 / self._N
        est = (self._S2 - self._N * np.einsum("ri,rj->rij", xw, xw)) / self._N
        return 0.5 * (est + est.transpose(0, 2, 1))


# ---------------------------------------------------------------------------
# batched linear-system solves


def _pinv_solve_batched(B: np.ndarray, g: np.ndarray,
                        pinv_tol: float) -> np.ndarray:
    """Stacked minimum-norm least-squares directions -B^+ g."""
    evals, evecs = np.linalg.eigh(B)
    tol = pinv_tol * (B * B).sum(axis=(1, 2)) / B.shape[1]
    keep = evals > tol[:, None]
    proj = np.einsum("rdk,rd->rk", evecs, g)
    inv = np.where(keep, 1.0 / np.where(keep, evals, 1.0), 0.0)
    return -np.einsum("rdk,rk->rd", evecs, inv * proj)


def _exact_solve_batched(B: np.ndarray, g: np.ndarray,
                         pinv_tol: float) -> np.ndarray:
    """Stacked exact Newton directions: Cholesky-gated solve of B dx = -g.

    Callers pass the positive-definite solve blend, so the gate is pure
    paranoia; should it ever fail, the offending replication falls back to
    the minimum-norm least-squares direction.
    """
    try:
        np.linalg.cholesky(B)
        return np.linalg.solve(B, -g[..., None])[..., 0]
    except np.linalg.LinAlgError:
        out = np.empty_like(g)
        for r in range(g.shape[0]):
            try:
                np.linalg.cholesky(B[r])
                out[r] = np.linalg.solve(B[r], -g[r])
            except np.linalg.LinAlgError:
                out[r] = _pinv_solve_batched(B[r][None], g[r][None],
                                             pinv_tol)[0]
        return out


def _lu_solve_batched(K: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Stacked solve of K delta = -rhs for symmetric indefinite K (LU)."""
    try:
        return np.linalg.solve(K, -rhs[..., None])[..., 0]
    except np.linalg.LinAlgError:
        out = np.empty_like(rhs)
        for r in range(rhs.shape[0]):
            try:
                out[r] = np.linalg.solve(K[r], -rhs[r])
            except np.linalg.LinAlgError:
                out[r] = np.linalg.lstsq(K[r], -rhs[r], rcond=None)[0]
        return out


def _uc_solve_batched(B: np.ndarray, g: np.ndarray, idx: np.ndarray,
                      tol: np.ndarray) -> np.ndarray:
    """Stacked coordinate sketch-and-project sweep (tau steps each).

    B must be symmetric (its rows equal its columns), which lets the
    column-energy denominators come from rows.  Degenerate rows (energy
    below tol) leave the iterate unchanged, replication by replication.
    """
    n_rep = g.shape[0]
    dx = np.zeros_like(g)
    rows = np.arange(n_rep)
    for s in range(idx.shape[1]):
        i = idx[:, s]
        brow = B[rows, i, :]
        den = np.einsum("rn,rn->r", brow, brow)
        ok = den > tol
        res = np.einsum("rn,rn->r", brow, dx) + g[rows, i]
        coef = np.where(ok, res / np.where(ok, den, 1.0), 0.0)
        dx -= coef[:, None] * brow
    return dx


def _gaussian_solve_batched(B: np.ndarray, g: np.ndarray, zblk: np.ndarray,
                            chol: Optional[np.ndarray],
                            tol: np.ndarray) -> np.ndarray:
    """Stacked Gaussian sketch-and-project sweep; zblk is (R, tau, n, q)."""
    tau, q = zblk.shape[1], zblk.shape[3]
    dx = np.zeros_like(g)
    for s in range(tau):
        S = zblk[:, s]
        if chol is not None:
            S = np.einsum("ij,rjq->riq", chol, S)
        W = np.einsum("rij,rjq->riq", B, S)
        res = np.einsum("riq,ri->rq", W, dx) + np.einsum("riq,ri->rq", S, g)
        if q == 1:
            den = np.einsum("riq,riq->r", W, W)
            ok = den > tol
            coef = np.where(ok, res[:, 0] / np.where(ok, den, 1.0), 0.0)
            dx -= coef[:, None] * W[:, :, 0]
        else:
            M = np.einsum("riq,rip->rqp", W, W)
            evals, evecs = np.linalg.eigh(M)
            keep = evals > tol[:, None]
            proj = np.einsum("rqk,rq->rk", evecs, res)
            inv = np.where(keep, 1.0 / np.where(keep, evals, 1.0), 0.0)
            coef = np.einsum("rqk,rk->rq", evecs, inv * proj)
            dx -= np.einsum("riq,rq->ri", W, coef)
    return dx


# ---------------------------------------------------------------------------
# checkpoint metrics


@dataclass(frozen=True)
class _OracleRefs:
    """Ground-truth matrices plus their precomputed norms/quadratic forms."""

    xi: Optional[np.ndarray]
    omega: Optional[np.ndarray]
    xi_norm: float
    xi_quad: float
    omega_norm: float
    omega_quad: float


def _make_refs(oracle_xi: Optional[np.ndarray],
               oracle_omega: Optional[np.ndarray],
               w: np.ndarray) -> _OracleRefs:
    xi_norm = xi_quad = omega_norm = omega_quad = 0.0
    if oracle_xi is not None:
        xi_norm = float(np.linalg.norm(oracle_xi, ord=2))
        xi_quad = float(w @ oracle_xi @ w)
    if oracle_omega is not None:
        omega_norm = float(np.linalg.norm(oracle_omega, ord=2))
        omega_quad = float(w @ oracle_omega @ w)
    return _OracleRefs(oracle_xi, oracle_omega, xi_norm, xi_quad,
                       omega_norm, omega_quad)


def _checkpoint_metrics(
    t_now: int,
    schedule: StepsizeSchedule,
    w: np.ndarray,
    target: float,
    z_level: float,
    alive: np.ndarray,
    X: np.ndarray,
    mean: Optional[np.ndarray],
    ests: Dict[str, Optional[np.ndarray]],
    refs: _OracleRefs,
    sgd: bool,
) -> Dict[str, np.ndarray]:
    """Per-replication metric arrays at one checkpoint.

    Newton-style estimators pair the current iterate with the stepsize
    scale phi_{t-1} (the band center used by the estimator weights); the
    batch-means baseline pairs the running iterate average with scale 1/t.
    """
    raw: Dict[str, np.ndarray] = {"alive": alive.copy()}
    phi_prev = schedule.phi(t_now - 1)
    cx = X @ w
    cmean = mean @ w if mean is not None else None
    for name, est in ests.items():
        if est is None:
            continue
        suffix = _SUFFIX[name]
        bm = name == "batchmeans"
        truth = refs.omega if bm else refs.xi
        quad = np.einsum("rij,i,j->r", est, w, w)
        if truth is not None:
            tnorm = refs.omega_norm if bm else refs.xi_norm
            tquad = refs.omega_quad if bm else refs.xi_quad
            raw["rel_cov_err_" + suffix] = (
                np.linalg.norm(est - truth, ord=2, axis=(1, 2)) / tnorm)
            if not bm:
                raw["rel_var_err_" + suffix] = (quad - tquad) / tquad
        if bm:
            center: np.ndarray = cmean
            scale = 1.0 / t_now
        else:
            center = cx
            scale = phi_prev
        hw = z_level * np.sqrt(scale * np.maximum(quad, 0.0))
        raw["cov_" + suffix] = (np.abs(center - target) <= hw).astype(float)
    if sgd:
        if refs.omega is not None and cmean is not None:
            hw_o = z_level * math.sqrt(max(refs.omega_quad, 0.0) / t_now)
            raw["cov_oracle"] = (np.abs(cmean - target) <= hw_o).astype(float)
    elif refs.xi is not None:
        hw_o = z_level * math.sqrt(phi_prev * max(refs.xi_quad, 0.0))
        raw["cov_oracle"] = (np.abs(cx - target) <= hw_o).astype(float)
    return raw


@dataclass
class _ShardResult:
    ts: List[int]
    rows: List[Dict[str, np.ndarray]]
    final_raw: Dict[str, np.ndarray]
    final_estimates: Dict[str, Optional[np.ndarray]]
    final_x: np.ndarray
    final_lam: Optional[np.ndarray]
    n_diverged: int


# ---------------------------------------------------------------------------
# regression shard engine


def _run_shard_regression(
    cfg: ExperimentConfig,
    model: RegressionModel,
    schedule: StepsizeSchedule,
    solve_cfg: SketchSolveConfig,
    w: np.ndarray,
    refs: _OracleRefs,
    rep_ids: np.ndarray,
    chunk: int,
) -> _ShardResult:
    exp = cfg.experiment
    R = len(rep_ids)
    d = model.dim
    sgd = cfg.method.solver == "sgd"
    lin = model.family == "linear"
    feat_chol = model.chol_a
    x_star = model.x_star
    sigma = model.sigma
    n_iters, rec = exp.n_iters, exp.record_every
    z_level = normal_quantile(0.5 + 0.5 * exp.ci_level)
    target = float(w @ x_star)
    uniform = schedule.mode == "uniform_band"

    tau = solve_cfg.tau
    uc = solve_cfg.dist.kind == "uniform_coordinate"
    q = solve_cfg.dist.q
    sk_chol = (solve_cfg.dist.cov_factor(d)
               if solve_cfg.dist.kind == "gaussian" else None)

    streams = [RngStreams.from_seed(exp.base_seed ^ int(r)) for r in rep_ids]
    X = np.zeros((R, d))
    B = None if sgd else np.tile(np.eye(d), (R, 1, 1))
    wsc = _BatchedWsc(R, d) if "wsc" in exp.estimators else None
    plug = _BatchedPlugin(R, d) if "plugin" in exp.estimators else None
    bm = (_BatchedBatchMeans(R, d, schedule.beta)
          if "batchmeans" in exp.estimators else None)
    alive = np.ones(R, dtype=bool)
    eye = np.eye(d)

    def estimates(t_now: int) -> Dict[str, Optional[np.ndarray]]:
        out: Dict[str, Optional[np.ndarray]] = {}
        if wsc is not None:
            out["wsc"] = wsc.estimate()
        if plug is not None:
            est = None
            if t_now >= d:  # the Hessian average is singular before that
                try:
                    est = _plugin_estimate_batched(plug.G, B, schedule.beta,
                                                   schedule.c_beta)
                except np.linalg.LinAlgError:
                    est = None
            out["plugin"] = est
        if bm is not None:
            out["batchmeans"] = bm.estimate()
        return out

    def snapshot(t_now: int) -> Tuple[Dict[str, np.ndarray],
                                      Dict[str, Optional[np.ndarray]]]:
        ests = estimates(t_now)
        mean = bm.mean if bm is not None else None
        raw = _checkpoint_metrics(t_now, schedule, w, target, z_level, alive,
                                  X, mean, ests, refs, sgd)
        return raw, ests

    ts: List[int] = []
    rows: List[Dict[str, np.ndarray]] = []
    t_done = 0
    while t_done < n_iters:
        K = min(chunk, n_iters - t_done)
        if lin:
            data_blk = np.stack(
                [g.data.standard_normal((K, d + 1)) for g in streams])
        else:
            znorm_blk = np.stack(
                [g.data.standard_normal((K, d)) for g in streams])
            ulab_blk = np.stack([g.data.random(K) for g in streams])
        if tau is not None:
            if uc:
                idx_blk = np.stack(
                    [g.sketch.integers(0, d, size=(K, tau)) for g in streams])
            else:
                sk_blk = np.stack(
                    [g.sketch.standard_normal((K, tau, d, q))
                     for g in streams])
        if uniform:
            u_blk = np.stack([g.step.random(K) for g in streams])

        for k in range(K):
            t = t_done + k
            if lin:
                Z = data_blk[:, k, :d] @ feat_chol.T
                y = Z @ x_star + sigma * data_blk[:, k, d]
                coef = np.einsum("rd,rd->r", Z, X) - y
                hw_vec = None
            else:
                Z = znorm_blk[:, k] @ feat_chol.T
                p_star = _sigmoid_vec(Z @ x_star)
                ylab = np.where(ulab_blk[:, k] < p_star, 1.0, -1.0)
                zlin = np.einsum("rd,rd->r", Z, X)
                coef = -ylab * _sigmoid_vec(-ylab * zlin)
                pc = _sigmoid_vec(zlin)
                hw_vec = pc * (1.0 - pc)
            G = coef[:, None] * Z
            if plug is not None:
                plug.update(G)
            if sgd:
                DX = -G
            else:
                # solve against the sample-scaled ridged average
                # (see newton_step); for rank-1 samples ||H||_F = hw |Z|^2
                if t == 0:
                    Bs = B
                else:
                    fro = np.einsum("rd,rd->r", Z, Z)
                    if hw_vec is not None:
                        fro = fro * hw_vec
                    ridge = schedule.beta_t(t) * fro
                    Bs = B + ridge[:, None, None] * eye
                if tau is None:
                    DX = _exact_solve_batched(Bs, G, solve_cfg.pinv_tol)
                else:
                    tol = solve_cfg.pinv_tol * (Bs * Bs).sum(axis=(1, 2)) / d
                    if uc:
                        DX = _uc_solve_batched(Bs, G, idx_blk[:, k], tol)
                    else:
                        DX = _gaussian_solve_batched(Bs, G, sk_blk[:, k],
                                                     sk_chol, tol)
            if uniform:
                alpha = schedule.beta_t(t) + u_blk[:, k] * schedule.chi_t(t)
                X = X + alpha[:, None] * DX
            else:
                X = X + schedule.phi(t) * DX
            if not sgd:
                H = np.einsum("ri,rj->rij", Z, Z)
                if hw_vec is not None:
                    H *= hw_vec[:, None, None]
                B *= t
                B += H
                B /= t + 1
            t_now = t + 1
            if wsc is not None:
                wsc.update(X, schedule.phi(t))
            if bm is not None:
                bm.update(X)
            norms = np.einsum("rd,rd->r", X, X)
            bad = ~np.isfinite(norms) | (norms > _DIVERGENCE_NORM ** 2)
            if bad.any():
                newly = alive & bad
                if newly.any():
                    alive &= ~newly
                dead = ~alive
                X[dead] = 0.0
                if B is not None:
                    B[dead] = eye
            if t_now % rec == 0:
                raw, _ = snapshot(t_now)
                ts.append(t_now)
                rows.append(raw)
        t_done += K

    final_raw, final_ests = snapshot(n_iters)
    return _ShardResult(ts=ts, rows=rows, final_raw=final_raw,
                        final_estimates=final_ests, final_x=X.copy(),
                        final_lam=None, n_diverged=int(R - alive.sum()))


# ---------------------------------------------------------------------------
# constrained shard engine


class _VecSqp(NamedTuple):
    """Vectorized (stacked over replications) views of a constrained problem."""

    grads: Callable[[np.ndarray], np.ndarray]
    hesses: Callable[[np.ndarray], np.ndarray]
    cons: Callable[[np.ndarray], np.ndarray]
    jacs: Callable[[np.ndarray], np.ndarray]
    cons_hess_weighted: Callable[[np.ndarray, np.ndarray], object]


def _vectorize_sqp(problem: EqConstrainedProblem) -> _VecSqp:
    if problem.name == "eqqp":
        A = problem.hess(np.zeros(problem.dim))
        b = problem.grad(np.zeros(problem.dim))
        J0 = problem.jac(np.zeros(problem.dim))

        return _VecSqp(
            grads=lambda X: X @ A + b,
            hesses=lambda X: np.broadcast_to(A, (X.shape[0],) + A.shape),
            cons=lambda X: X[:, :1] - 1.0,
            jacs=lambda X: np.broadcast_to(J0, (X.shape[0],) + J0.shape),
            cons_hess_weighted=lambda X, Lam: 0.0,
        )
    if problem.name == "maratos":
        eye2 = np.eye(2)
        e0 = np.array([1.0, 0.0])
        return _VecSqp(
            grads=lambda X: 4.0 * X - e0,
            hesses=lambda X: np.broadcast_to(4.0 * eye2, (X.shape[0], 2, 2)),
            cons=lambda X: (X ** 2).sum(axis=1, keepdims=True) - 1.0,
            jacs=lambda X: 2.0 * X[:, None, :],
            cons_hess_weighted=lambda X, Lam:
                (2.0 * Lam[:, 0])[:, None, None] * eye2,
        )
    if problem.name == "hs7":
        def grads(X: np.ndarray) -> np.ndarray:
            g = np.empty_like(X)
            x0 = X[:, 0]
            g[:, 0] = 2.0 * x0 / (1.0 + x0 ** 2)
            g[:, 1] = -1.0
            return g

        def hesses(X: np.ndarray) -> np.ndarray:
            H = np.zeros((X.shape[0], 2, 2))
            x0 = X[:, 0]
            H[:, 0, 0] = 2.0 * (1.0 - x0 ** 2) / (1.0 + x0 ** 2) ** 2
            return H

        def jacs(X: np.ndarray) -> np.ndarray:
            J = np.empty((X.shape[0], 1, 2))
            J[:, 0, 0] = 4.0 * X[:, 0] * (1.0 + X[:, 0] ** 2)
            J[:, 0, 1] = 2.0 * X[:, 1]
            return J

        def cons_hess_weighted(X: np.ndarray, Lam: np.ndarray) -> np.ndarray:
            T = np.zeros((X.shape[0], 2, 2))
            T[:, 0, 0] = Lam[:, 0] * (4.0 + 12.0 * X[:, 0] ** 2)
            T[:, 1, 1] = 2.0 * Lam[:, 0]
            return T

        return _VecSqp(
            grads=grads,
            hesses=hesses,
            cons=lambda X:
                (1.0 + X[:, :1] ** 2) ** 2 + X[:, 1:] ** 2 - 4.0,
            jacs=jacs,
            cons_hess_weighted=cons_hess_weighted,
        )
    raise ValueError(f"no vectorized adapter for problem {problem.name!r}")


def _run_shard_sqp(
    cfg: ExperimentConfig,
    problem: EqConstrainedProblem,
    schedule: StepsizeSchedule,
    solve_cfg: SketchSolveConfig,
    w: np.ndarray,
    refs: _OracleRefs,
    rep_ids: np.ndarray,
    chunk: int,
) -> _ShardResult:
    exp = cfg.experiment
    R = len(rep_ids)
    d, m = problem.dim, problem.n_cons
    n = d + m
    sigma2 = cfg.problem.sigma2
    sig = math.sqrt(sigma2)
    L = grad_noise_factor(d, sigma2)
    vec = _vectorize_sqp(problem)
    iu = np.triu_indices(d)
    nt = d * (d + 1) // 2
    n_iters, rec = exp.n_iters, exp.record_every
    z_level = normal_quantile(0.5 + 0.5 * exp.ci_level)
    target = float(w @ problem.x_star)
    uniform = schedule.mode == "uniform_band"

    tau = solve_cfg.tau
    uc = solve_cfg.dist.kind == "uniform_coordinate"
    q = solve_cfg.dist.q
    sk_chol = (solve_cfg.dist.cov_factor(n)
               if solve_cfg.dist.kind == "gaussian" else None)

    streams = [RngStreams.from_seed(exp.base_seed ^ int(r)) for r in rep_ids]
    X = np.tile(problem.x0, (R, 1))
    Lam = np.zeros((R, m))
    B = np.tile(np.eye(d), (R, 1, 1))
    wsc = _BatchedWsc(R, d)
    alive = np.ones(R, dtype=bool)
    eye_d = np.eye(d)
    x0 = problem.x0.copy()

    def snapshot(t_now: int) -> Tuple[Dict[str, np.ndarray],
                                      Dict[str, Optional[np.ndarray]]]:
        ests: Dict[str, Optional[np.ndarray]] = {"wsc": wsc.estimate()}
        raw = _checkpoint_metrics(t_now, schedule, w, target, z_level, alive,
                                  X, None, ests, refs, sgd=False)
        return raw, ests

    ts: List[int] = []
    rows: List[Dict[str, np.ndarray]] = []
    t_done = 0
    while t_done < n_iters:
        K = min(chunk, n_iters - t_done)
        data_blk = np.stack(
            [g.data.standard_normal((K, d + nt)) for g in streams])
        if tau is not None:
            if uc:
                idx_blk = np.stack(
                    [g.sketch.integers(0, n, size=(K, tau)) for g in streams])
            else:
                sk_blk = np.stack(
                    [g.sketch.standard_normal((K, tau, n, q))
                     for g in streams])
        if uniform:
            u_blk = np.stack([g.step.random(K) for g in streams])

        for k in range(K):
            t = t_done + k
            gbar = vec.grads(X) + data_blk[:, k, :d] @ L.T
            T = np.zeros((R, d, d))
            T[:, iu[0], iu[1]] = sig * data_blk[:, k, d:]
            noise = T + np.triu(T, 1).transpose(0, 2, 1)
            J = vec.jacs(X)
            rhs = np.concatenate(
                [gbar + np.einsum("rmd,rm->rd", J, Lam), vec.cons(X)], axis=1)
            H = vec.hesses(X) + noise + vec.cons_hess_weighted(X, Lam)
            # assemble the KKT system from the sample-scaled ridged
            # average (see sqp_step)
            Kmat = np.zeros((R, n, n))
            if t == 0:
                Kmat[:, :d, :d] = B
            else:
                fro = np.sqrt(np.einsum("rij,rij->r", H, H))
                ridge = schedule.beta_t(t) * fro
                Kmat[:, :d, :d] = B + ridge[:, None, None] * eye_d
            Kmat[:, :d, d:] = J.transpose(0, 2, 1)
            Kmat[:, d:, :d] = J
            if tau is None:
                delta = _lu_solve_batched(Kmat, rhs)
            else:
                tol = solve_cfg.pinv_tol * (Kmat * Kmat).sum(axis=(1, 2)) / n
                if uc:
                    delta = _uc_solve_batched(Kmat, rhs, idx_blk[:, k], tol)
                else:
                    delta = _gaussian_solve_batched(Kmat, rhs, sk_blk[:, k],
                                                    sk_chol, tol)
            if uniform:
                alpha = schedule.beta_t(t) + u_blk[:, k] * schedule.chi_t(t)
                X = X + alpha[:, None] * delta[:, :d]
                Lam = Lam + alpha[:, None] * delta[:, d:]
            else:
                phi_t = schedule.phi(t)
                X = X + phi_t * delta[:, :d]
                Lam = Lam + phi_t * delta[:, d:]
            B *= t
            B += H
            B /= t + 1
            t_now = t + 1
            wsc.update(X, schedule.phi(t))
            norms = (np.sqrt(np.einsum("rd,rd->r", X, X))
                     + np.sqrt(np.einsum("rm,rm->r", Lam, Lam)))
            bad = ~np.isfinite(norms) | (norms > _DIVERGENCE_NORM)
            if bad.any():
                newly = alive & bad
                if newly.any():
                    alive &= ~newly
                dead = ~alive
                X[dead] = x0
                Lam[dead] = 0.0
                B[dead] = eye_d
            if t_now % rec == 0:
                raw, _ = snapshot(t_now)
                ts.append(t_now)
                rows.append(raw)
        t_done += K

    final_raw, final_ests = snapshot(n_iters)
    return _ShardResult(ts=ts, rows=rows, final_raw=final_raw,
                        final_estimates=final_ests, final_x=X.copy(),
                        final_lam=Lam.copy(), n_diverged=int(R - alive.sum()))


# ---------------------------------------------------------------------------
# top-level orchestration


@dataclass
class ExperimentResult:
    """Aggregated study output plus the raw per-replication final metrics."""

    config: ExperimentConfig
    columns: Tuple[str, ...]
    rows: List[Dict[str, object]]
    final: Dict[str, object]
    final_per_rep: Dict[str, np.ndarray]
    final_estimates: Dict[str, Optional[np.ndarray]]
    final_x: np.ndarray
    final_lam: Optional[np.ndarray]
    oracle_xi: Optional[np.ndarray]
    oracle_omega: Optional[np.ndarray]
    w: np.ndarray
    target: float
    n_reps: int
    n_diverged: int

    @property
    def diverged_majority(self) -> bool:
        """True when at least half of the replications diverged."""
        return 2 * self.n_diverged >= self.n_reps


def _worker_count(n_reps: int) -> int:
    raw = os.environ.get("SNEWT_THREADS", "")
    try:
        workers = int(raw)
    except ValueError:
        workers = 1
    return max(1, min(workers if workers >= 1 else 1, n_reps))


def _aggregate_raw(raw: Dict[str, np.ndarray]) -> Dict[str, object]:
    """Mean of each per-replication metric over live replications."""
    alive = raw["alive"]
    out: Dict[str, object] = {}
    for col in AGGREGATE_COLUMNS[1:]:
        arr = raw.get(col)
        if arr is None:
            out[col] = None
            continue
        vals = arr[alive]
        vals = vals[np.isfinite(vals)]
        out[col] = float(vals.mean()) if vals.size else None
    return out


def _merge_raw(parts: List[Dict[str, np.ndarray]]) -> Dict[str, np.ndarray]:
    keys = parts[0].keys()
    return {k: np.concatenate([p[k] for p in parts]) for k in keys}


def run_experiment(
    cfg: ExperimentConfig,
    oracle_xi: Optional[np.ndarray] = None,
    oracle_omega: Optional[np.ndarray] = None,
    chunk: int = _CHUNK,
) -> ExperimentResult:
    """Run every replication of the configured study and aggregate metrics.

    Ground truth: for regression problems the limiting covariance and the
    sandwich covariance are computed once up front (closed form where
    available, seeded Monte Carlo otherwise); for constrained problems no
    analytic ground truth exists, so relative-error and oracle-CI columns
    stay empty unless ``oracle_xi`` is supplied (see sqp_empirical_xi).
    Replication r draws its randomness from streams seeded with
    base_seed XOR r, so results do not depend on worker count; the
    SNEWT_THREADS environment variable caps the worker pool (default 1).
    """
    problem = cfg.build_problem()
    schedule = cfg.build_schedule()
    solve_cfg = cfg.build_solve_config()
    w = cfg.direction_vector(problem)
    constrained = isinstance(problem, EqConstrainedProblem)
    exp = cfg.experiment
    if not constrained:
        if cfg.method.solver == "newton" and oracle_xi is None:
            oc = oracle_covariance(problem, solve_cfg.dist, solve_cfg.tau,
                                   schedule.beta, schedule.c_beta)
            oracle_xi = oc.xi
            if oracle_omega is None:
                oracle_omega = oc.omega
        elif oracle_omega is None:
            oracle_omega = omega_star(problem)
    refs = _make_refs(oracle_xi, oracle_omega, w)
    target = float(w @ problem.x_star)

    runner = _run_shard_sqp if constrained else _run_shard_regression
    workers = _worker_count(exp.n_reps)
    shards = [s for s in np.array_split(np.arange(exp.n_reps), workers)
              if s.size]
    call = lambda ids: runner(cfg, problem, schedule, solve_cfg, w, refs,
                              ids, chunk)
    if len(shards) == 1 or workers == 1:
        outs = [call(ids) for ids in shards]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            outs = list(pool.map(call, shards))

    ts = outs[0].ts
    rows: List[Dict[str, object]] = []
    for i, t in enumerate(ts):
        merged = _merge_raw([o.rows[i] for o in outs])
        row: Dict[str, object] = {"t": t}
        row.update(_aggregate_raw(merged))
        rows.append(row)

    final_raw = _merge_raw([o.final_raw for o in outs])
    final: Dict[str, object] = {"t": exp.n_iters}
    final.update(_aggregate_raw(final_raw))

    alive = final_raw["alive"]
    final_estimates: Dict[str, Optional[np.ndarray]] = {}
    for name in outs[0].final_estimates:
        parts = [o.final_estimates[name] for o in outs]
        if any(p is None for p in parts):
            final_estimates[name] = None
        else:
            full = np.concatenate(parts)
            final_estimates[name] = (full[alive].mean(axis=0)
                                     if alive.any() else None)

    return ExperimentResult(
        config=cfg,
        columns=AGGREGATE_COLUMNS,
        rows=rows,
        final=final,
        final_per_rep=final_raw,
        final_estimates=final_estimates,
        final_x=np.concatenate([o.final_x for o in outs]),
        final_lam=(np.concatenate([o.final_lam for o in outs])
                   if constrained else None),
        oracle_xi=refs.xi,
        oracle_omega=refs.omega,
        w=w,
        target=target,
        n_reps=exp.n_reps,
        n_diverged=sum(o.n_diverged for o in outs),
    )


# ---------------------------------------------------------------------------
# CSV emission


def _fmt(value: object) -> str:
    if value is None:
        return ""
    return format(float(value), ".12g")


def write_aggregate_csv(result: ExperimentResult, path: str) -> None:
    """Per-checkpoint aggregates, one row per record_every iterations."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(AGGREGATE_COLUMNS)
        for row in result.rows:
            writer.writerow([str(row["t"])]
                            + [_fmt(row[c]) for c in AGGREGATE_COLUMNS[1:]])


def write_summary_csv(result: ExperimentResult, path: str) -> None:
    """One final-iteration row per configured estimator."""
    final = result.final
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SUMMARY_COLUMNS)
        for name in result.config.experiment.estimators:
            suffix = _SUFFIX[name]
            writer.writerow([
                name,
                str(final["t"]),
                _fmt(final.get("rel_cov_err_" + suffix)),
                _fmt(final.get("rel_var_err_" + suffix)),
                _fmt(final.get("cov_" + suffix)),
                _fmt(final.get("cov_oracle")),
                str(result.n_reps),
                str(result.n_diverged),
            ])


# ---------------------------------------------------------------------------
# empirical ground truth for constrained problems


def sqp_empirical_xi(
    family: str,
    sigma2: float,
    n_iters: int = 1_000_000,
    n_reps: int = 4,
    base_seed: int = 20_000,
    schedule: Optional[ScheduleConfig] = None,
    chunk: int = _CHUNK,
) -> np.ndarray:
    """Empirical limiting covariance for a constrained problem.

    No closed form is available, so the reference is measured: long
    exact-KKT runs (default 10^6 iterations) with the weighted sample
    covariance estimator, averaged over a few replications.  Intended for
    offline study generation, not for routine test runs.
    """
    cfg = ExperimentConfig(
        problem=ProblemConfig(family=family, sigma2=sigma2),
        method=MethodConfig(solver="newton", tau=None),
        schedule=schedule if schedule is not None else ScheduleConfig(),
        experiment=ExperimentSection(
            n_iters=n_iters,
            n_reps=n_reps,
            base_seed=base_seed,
            record_every=n_iters,
            ci_direction="inactive",
            estimators=("wsc",),
        ),
    )
    result = run_experiment(cfg, chunk=chunk)
    est = result.final_estimates.get("wsc")
    if est is None:
        raise RuntimeError("empirical reference failed (no live replications)")
    return est
