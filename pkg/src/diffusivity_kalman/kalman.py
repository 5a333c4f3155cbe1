"""Discrete Kalman filter, RTS fixed-interval smoother and a block-tridiagonal
least-squares solver for the same posterior.

Conventions: a trajectory has states u_0..u_Nf.  ``stages[i]`` carries the
transition u_i -> u_{i+1} (F, B, Q, s) and the measurement operator (H, R)
applied to the measurement taken at step i+1.  ``measurements[i]`` is the
observation at step i+1, or ``None`` when that step is not measured.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import linalg


class NotPositiveDefiniteError(np.linalg.LinAlgError):
    pass


@dataclass(frozen=True)
class LinearStageModel:
    F: np.ndarray
    B: np.ndarray
    Q: np.ndarray
    H: np.ndarray
    R: np.ndarray
    s: np.ndarray

    def __post_init__(self):
        n = self.F.shape[0]
        if self.F.shape != (n, n):
            raise ValueError("F must be square")
        if self.B.shape[0] != n or self.Q.shape != (self.B.shape[1],) * 2:
            raise ValueError("B, Q dimensions inconsistent with F")
        if self.H.shape[1] != n or self.R.shape != (self.H.shape[0],) * 2:
            raise ValueError("H, R dimensions inconsistent with F")
        if self.s.shape != (n,):
            raise ValueError("s must be an N-vector")

    @property
    def dim(self) -> int:
        return self.F.shape[0]

    @property
    def QB(self) -> np.ndarray:
        return _sym(self.B @ self.Q @ self.B.T)


@dataclass(frozen=True)
class GaussianBelief:
    mean: np.ndarray
    cov: np.ndarray
    kind: str = "filtered"
    time_index: int = 0

    def __post_init__(self):
        if self.kind not in ("predicted", "filtered", "smoothed"):
            raise ValueError(f"unknown belief kind {self.kind!r}")
        n = self.mean.shape[0]
        if self.cov.shape != (n, n):
            raise ValueError("cov shape does not match mean")


@dataclass
class FilterResult:
    stages: list[LinearStageModel]
    predicted: list[GaussianBelief]  # steps 1..Nf
    filtered: list[GaussianBelief]  # steps 0..Nf, filtered[0] is the prior
    nll_terms: np.ndarray = field(default_factory=lambda: np.zeros(0))


@dataclass
class SmootherResult:
    beliefs: list[GaussianBelief]
    filtered: list[GaussianBelief]
    loglike_terms: np.ndarray

    @property
    def means(self) -> np.ndarray:
        return np.array([b.mean for b in self.beliefs])

    @property
    def covs(self) -> np.ndarray:
        return np.array([b.cov for b in self.beliefs])


def _sym(C: np.ndarray) -> np.ndarray:
    return 0.5 * (C + C.T)


def _chol(A: np.ndarray, what: str):
    try:
        return linalg.cho_factor(A, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise NotPositiveDefiniteError(f"{what} is not positive definite") from exc


def predict(belief: GaussianBelief, stage: LinearStageModel) -> GaussianBelief:
    if belief.mean.shape[0] != stage.dim:
        raise ValueError(
            f"belief dimension {belief.mean.shape[0]} != stage dimension {stage.dim}"
        )
    mean = stage.F @ belief.mean + stage.s
    cov = _sym(stage.F @ belief.cov @ stage.F.T + stage.QB)
    return GaussianBelief(mean, cov, "predicted", belief.time_index + 1)


def kalman_gain(P: np.ndarray, H: np.ndarray, R: np.ndarray, form: str = "innovation"):
    """Gain and posterior covariance; ``form`` selects the algebraic route.

    ``"information"``: P+^-1 = P^-1 + H'R^-1 H, K = P+ H' R^-1.
    ``"innovation"``: K = P H' (H P H' + R)^-1, Joseph-form covariance.
    """
    if form == "information":
        cP = _chol(P, "prior covariance")
        cR = _chol(R, "measurement covariance R")
        Pinv = linalg.cho_solve(cP, np.eye(P.shape[0]))
        J = H.T @ linalg.cho_solve(cR, H)
        Ppost = linalg.cho_solve(_chol(_sym(Pinv + J), "posterior information"), np.eye(P.shape[0]))
        Ppost = _sym(Ppost)
        K = Ppost @ H.T @ linalg.cho_solve(cR, np.eye(R.shape[0]))
        return K, Ppost
    if form == "innovation":
        S = _sym(H @ P @ H.T + R)
        cS = _chol(S, "innovation covariance")
        K = linalg.cho_solve(cS, H @ P).T
        IKH = np.eye(P.shape[0]) - K @ H
        Ppost = _sym(IKH @ P @ IKH.T + K @ R @ K.T)
        return K, Ppost
    raise ValueError(f"unknown gain form {form!r}")


def update(
    belief: GaussianBelief,
    stage: LinearStageModel,
    y: np.ndarray,
    form: str = "innovation",
) -> GaussianBelief:
    y = np.asarray(y, dtype=float)
    if y.shape != (stage.H.shape[0],):
        raise ValueError(f"measurement has shape {y.shape}, expected ({stage.H.shape[0]},)")
    if np.linalg.eigvalsh(stage.R)[0] <= 0:
        raise NotPositiveDefiniteError("measurement covariance R is singular")
    K, P = kalman_gain(belief.cov, stage.H, stage.R, form)
    mean = belief.mean + K @ (y - stage.H @ belief.mean)
    return GaussianBelief(mean, P, "filtered", belief.time_index)


def _innovation_nll(belief: GaussianBelief, stage: LinearStageModel, y: np.ndarray) -> float:
    S = _sym(stage.H @ belief.cov @ stage.H.T + stage.R)
    c = _chol(S, "innovation covariance")
    r = y - stage.H @ belief.mean
    logdet = 2.0 * np.sum(np.log(np.diag(c[0])))
    return 0.5 * float(r @ linalg.cho_solve(c, r) + logdet + r.size * np.log(2 * np.pi))


def filter_pass(
    stages: Sequence[LinearStageModel],
    measurements: Sequence[np.ndarray | None],
    prior: GaussianBelief,
    form: str = "innovation",
) -> FilterResult:
    if len(stages) != len(measurements):
        raise ValueError(f"{len(stages)} stages but {len(measurements)} measurement slots")
    filtered = [GaussianBelief(prior.mean, _sym(prior.cov), "filtered", 0)]
    predicted = []
    nll = np.zeros(len(stages))
    for i, (stage, y) in enumerate(zip(stages, measurements)):
        pred = predict(filtered[-1], stage)
        predicted.append(pred)
        if y is None:
            filtered.append(GaussianBelief(pred.mean, pred.cov, "filtered", pred.time_index))
        else:
            nll[i] = _innovation_nll(pred, stage, np.asarray(y, dtype=float))
            filtered.append(update(pred, stage, y, form))
    return FilterResult(list(stages), predicted, filtered, nll)


def rts_smooth(result: FilterResult) -> SmootherResult:
    filt = result.filtered
    n = len(filt) - 1
    last = filt[-1]
    smoothed = [None] * (n + 1)
    smoothed[n] = GaussianBelief(last.mean, last.cov, "smoothed", n)
    for i in range(n - 1, -1, -1):
        pred = result.predicted[i]
        F = result.stages[i].F
        try:
            c = _chol(pred.cov, f"predicted covariance at step {i + 1}")
        except NotPositiveDefiniteError as exc:
            raise NotPositiveDefiniteError(f"singular predicted covariance at step {i + 1}") from exc
        # smoother gain P(i|i) F' P(i+1|i)^-1
        A = linalg.cho_solve(c, F @ filt[i].cov).T
        nxt = smoothed[i + 1]
        mean = filt[i].mean + A @ (nxt.mean - pred.mean)
        cov = _sym(filt[i].cov + A @ (nxt.cov - pred.cov) @ A.T)
        smoothed[i] = GaussianBelief(mean, cov, "smoothed", i)
    return SmootherResult(smoothed, filt, result.nll_terms)


def regularized_qb(stage: LinearStageModel) -> np.ndarray:
    """B Q B' + eps I with eps = 1e-12 trace / N (oracle and objective only)."""
    QB = stage.QB
    eps = 1e-12 * np.trace(QB) / QB.shape[0]
    return QB + eps * np.eye(QB.shape[0])


def _normal_equations(stages, measurements, prior):
    """Diagonal blocks, super-diagonal blocks and right-hand side of the
    normal equations of the least-squares functional (prior in block 0)."""
    n = len(stages)
    N = prior.mean.shape[0]
    D = np.zeros((n + 1, N, N))
    U = np.zeros((n, N, N))  # U[i] = block (i, i+1)
    rhs = np.zeros((n + 1, N))
    cP = _chol(prior.cov, "prior covariance")
    D[0] += linalg.cho_solve(cP, np.eye(N))
    rhs[0] += linalg.cho_solve(cP, prior.mean)
    for i, (st, y) in enumerate(zip(stages, measurements)):
        cQ = _chol(regularized_qb(st), f"Q_B at stage {i}")
        QiF = linalg.cho_solve(cQ, st.F)
        Qis = linalg.cho_solve(cQ, st.s)
        D[i] += st.F.T @ QiF
        D[i + 1] += linalg.cho_solve(cQ, np.eye(N))
        U[i] = -QiF.T
        rhs[i] -= st.F.T @ Qis
        rhs[i + 1] += Qis
        if y is not None:
            cR = _chol(st.R, f"R at step {i + 1}")
            D[i + 1] += st.H.T @ linalg.cho_solve(cR, st.H)
            rhs[i + 1] += st.H.T @ linalg.cho_solve(cR, np.asarray(y, dtype=float))
    for i in range(n + 1):
        D[i] = _sym(D[i])
    return D, U, rhs


def solve_block_tridiagonal(
    stages: Sequence[LinearStageModel],
    measurements: Sequence[np.ndarray | None],
    prior: GaussianBelief,
) -> tuple[np.ndarray, np.ndarray]:
    """Smoothed means and marginal covariances by block Cholesky sweeps.

    Forward sweep: S_0 = D_0, S_i = D_i - U_{i-1}' S_{i-1}^-1 U_{i-1}.
    Backward sweep recovers the means and the diagonal blocks of the inverse.
    """
    if len(stages) != len(measurements):
        raise ValueError("stages and measurements differ in length")
    D, U, rhs = _normal_equations(stages, measurements, prior)
    n = len(stages)
    N = D.shape[1]
    factors = []
    z = np.zeros_like(rhs)
    for i in range(n + 1):
        S = D[i].copy()
        r = rhs[i].copy()
        if i > 0:
            cprev = factors[i - 1]
            S -= U[i - 1].T @ linalg.cho_solve(cprev, U[i - 1])
            r -= U[i - 1].T @ z[i - 1]
        try:
            c = linalg.cho_factor(_sym(S), lower=True, check_finite=False)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefiniteError(
                f"assembled system is indefinite at block {i}; check Q and R"
            ) from exc
        factors.append(c)
        z[i] = linalg.cho_solve(c, r)  # S_i^-1 (rhs - ...)
    x = np.zeros_like(rhs)
    cov = np.zeros((n + 1, N, N))
    x[n] = z[n]
    cov[n] = _sym(linalg.cho_solve(factors[n], np.eye(N)))
    for i in range(n - 1, -1, -1):
        W = linalg.cho_solve(factors[i], U[i])  # S_i^-1 U_i
        x[i] = z[i] - W @ x[i + 1]
        Sinv = linalg.cho_solve(factors[i], np.eye(N))
        cov[i] = _sym(Sinv + W @ cov[i + 1] @ W.T)
    return x, cov


def least_squares_objective(
    stages: Sequence[LinearStageModel],
    measurements: Sequence[np.ndarray | None],
    trajectory: np.ndarray,
    prior: GaussianBelief | None = None,
) -> float:
    trajectory = np.asarray(trajectory, dtype=float)
    if trajectory.shape[0] != len(stages) + 1:
        raise ValueError(
            f"trajectory has {trajectory.shape[0]} states, expected {len(stages) + 1}"
        )
    total = 0.0
    for i, (st, y) in enumerate(zip(stages, measurements)):
        innov = trajectory[i + 1] - st.F @ trajectory[i] - st.s
        cQ = _chol(regularized_qb(st), f"Q_B at stage {i}")
        total += innov @ linalg.cho_solve(cQ, innov)
        if y is not None:
            res = np.asarray(y, dtype=float) - st.H @ trajectory[i + 1]
            total += res @ linalg.cho_solve(_chol(st.R, "R"), res)
    if prior is not None:
        d0 = trajectory[0] - prior.mean
        total += d0 @ linalg.cho_solve(_chol(prior.cov, "prior covariance"), d0)
    return float(total)


def objective_gradient(stages, measurements, trajectory, prior=None) -> np.ndarray:
    """Analytic gradient of :func:`least_squares_objective`."""
    trajectory = np.asarray(trajectory, dtype=float)
    g = np.zeros_like(trajectory)
    for i, (st, y) in enumerate(zip(stages, measurements)):
        innov = trajectory[i + 1] - st.F @ trajectory[i] - st.s
        v = linalg.cho_solve(_chol(regularized_qb(st), "Q_B"), innov)
        g[i + 1] += 2 * v
        g[i] -= 2 * st.F.T @ v
        if y is not None:
            res = np.asarray(y, dtype=float) - st.H @ trajectory[i + 1]
            g[i + 1] -= 2 * st.H.T @ linalg.cho_solve(_chol(st.R, "R"), res)
    if prior is not None:
        g[0] += 2 * linalg.cho_solve(_chol(prior.cov, "prior"), trajectory[0] - prior.mean)
    return g


def smooth(stages, measurements, prior, form: str = "innovation") -> SmootherResult:
    return rts_smooth(filter_pass(stages, measurements, prior, form))
