"""Stationary covariance analysis and selection of the stochastic model
parameters (noise spectra, hyperdiffusivity, initial prior)."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np
from scipy import linalg

from .spectral import (
    ModelConfig,
    SpectralField,
    _convolution_matrix,
    mode_variances_to_real,
    noise_spectrum,
    real_operator,
    stacking_matrices,
    to_physical,
)


class NotHurwitzError(ValueError):
    pass


class CalibrationError(ValueError):
    pass


@dataclass(frozen=True)
class StationaryCovariance:
    c0: np.ndarray
    generator: np.ndarray
    residual: float

    def at_lag(self, tau: float) -> np.ndarray:
        return lagged_covariance(self, self.generator, tau)


def lyapunov_stationary(F_cont: np.ndarray, Q: np.ndarray) -> StationaryCovariance:
    """Solve F C + C F' + Q = 0 for a Hurwitz generator F."""
    F_cont = np.atleast_2d(np.asarray(F_cont, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    eig = np.linalg.eigvals(F_cont)
    bad = eig[eig.real >= 0]
    if bad.size:
        raise NotHurwitzError(f"generator is not Hurwitz; eigenvalues with Re >= 0: {bad}")
    C = linalg.solve_continuous_lyapunov(F_cont, -Q)
    C = 0.5 * (C + C.T)
    res = np.linalg.norm(F_cont @ C + C @ F_cont.T + Q)
    qn = np.linalg.norm(Q)
    if res > 1e-10 * max(qn, np.finfo(float).tiny):
        raise np.linalg.LinAlgError(f"Lyapunov residual {res:.3e} exceeds 1e-10 |Q| = {qn:.3e}")
    return StationaryCovariance(C, F_cont, float(res))


def lagged_covariance(stat: StationaryCovariance, F_cont: np.ndarray, tau: float) -> np.ndarray:
    """C(tau) = C(0) exp(tau F')."""
    if tau < 0:
        raise ValueError("tau must be nonnegative")
    F_cont = np.atleast_2d(F_cont)
    return stat.c0 @ linalg.expm(tau * F_cont.T)


def continuous_generator(
    config: ModelConfig,
    mean_kappa: SpectralField | None = None,
    mean_flux: SpectralField | None = None,
    drop_mean: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Frozen-time generator and noise intensity of the augmented fluctuation model.

    Returns (F, Q) on the stacked real state.  With ``drop_mean`` the k = 0
    components (neutral directions) are removed so the generator is Hurwitz.
    """
    n = config.n_modes
    if mean_kappa is None:
        mean_kappa = SpectralField.constant(n, config.kappa0)
    if mean_flux is None:
        mean_flux = SpectralField.zeros(n)
    k = np.arange(-n, n + 1, dtype=float)
    diffusion = -np.outer(k, k) * _convolution_matrix(mean_kappa)
    diffusion -= np.diag(config.mu1 * k**4)
    coupling = 1j * k[:, None] * _convolution_matrix(mean_flux)
    b = 2 * n + 1
    F = np.zeros((2 * b, 2 * b))
    F[:b, :b] = real_operator(diffusion, n, n)
    F[:b, b:] = real_operator(coupling, n, n)
    F[b:, b:] = real_operator(np.diag(-config.mu2 * k**2), n, n)
    q1 = mode_variances_to_real(noise_spectrum(config.alpha1, config.beta1, n))
    q2 = mode_variances_to_real(noise_spectrum(config.alpha2, config.beta2, n))
    Q = np.diag(np.concatenate([q1, q2]))
    if drop_mean:
        keep = np.ones(2 * b, dtype=bool)
        keep[[0, b]] = False
        F = F[np.ix_(keep, keep)]
        Q = Q[np.ix_(keep, keep)]
    return F, Q


def mode_covariance(C_real: np.ndarray, n_modes: int, dropped_mean: bool = True) -> np.ndarray:
    """Complex covariance E[c c^H] over (T_{-N..N}, theta_{-N..N}) from a real one."""
    b = 2 * n_modes + 1
    if dropped_mean:
        full = np.zeros((2 * b, 2 * b))
        keep = np.ones(2 * b, dtype=bool)
        keep[[0, b]] = False
        full[np.ix_(keep, keep)] = C_real
        C_real = full
    P, _ = stacking_matrices(n_modes)
    PP = linalg.block_diag(P, P)
    return PP @ C_real @ PP.conj().T


def cross_term_ratio(C_modes: np.ndarray, n_modes: int, k: int) -> float:
    """max_k' |C(T_k, theta_k')| / sqrt(C(T_k,T_k) C(theta_k',theta_k'))."""
    b = 2 * n_modes + 1
    i = n_modes + k
    cT = C_modes[i, i].real
    d_theta = np.real(np.diag(C_modes)[b:])
    cross = np.abs(C_modes[i, b:])
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(d_theta > 0, cross / np.sqrt(cT * d_theta), 0.0)
    return float(np.max(r))


def quasistationary_variances(config: ModelConfig, kappa_bar: float | None = None):
    """Per-mode (k = 1..N) variance balance: Q/(2 mu2 k^2) and Q/(2(kappa k^2 + mu1 k^4))."""
    kappa = config.kappa0 if kappa_bar is None else kappa_bar
    n = config.n_modes
    k = np.arange(1, n + 1, dtype=float)
    qT = noise_spectrum(config.alpha1, config.beta1, n)[1:]
    qth = noise_spectrum(config.alpha2, config.beta2, n)[1:]
    return qT / (2 * (kappa * k**2 + config.mu1 * k**4)), qth / (2 * config.mu2 * k**2)


class NoiseFit(NamedTuple):
    alpha1: float
    beta1: float
    alpha2: float
    beta2: float


def _fit_power_law(k: np.ndarray, q: np.ndarray) -> tuple[float, float]:
    slope, intercept = np.polyfit(np.log(k), np.log(q), 1)
    return float(np.exp(intercept)), float(-slope)


def calibrate_noise(
    target_var_T: Sequence[float],
    target_var_theta: Sequence[float],
    config: ModelConfig,
    modes: Sequence[int] | None = None,
    kappa_bar: float | None = None,
) -> NoiseFit:
    """Invert the quasistationary balance for (alpha1, beta1, alpha2, beta2).

    ``modes`` are the |k| of the targets (default 1, 2, ...); k = 0 entries are
    ignored.
    """
    cT = np.asarray(target_var_T, dtype=float)
    cth = np.asarray(target_var_theta, dtype=float)
    if cT.shape != cth.shape:
        raise CalibrationError("target arrays differ in length")
    k = np.arange(1, cT.size + 1) if modes is None else np.abs(np.asarray(modes, dtype=float))
    if k.shape != cT.shape:
        raise CalibrationError("modes and targets differ in length")
    use = k > 0
    k, cT, cth = k[use], cT[use], cth[use]
    if np.unique(k).size < 2:
        raise CalibrationError("need targets at two or more distinct |k| >= 1")
    if np.any(cT <= 0) or np.any(cth <= 0):
        raise CalibrationError("targets must be positive")
    kappa = config.kappa0 if kappa_bar is None else kappa_bar
    q_theta = 2 * config.mu2 * k**2 * cth
    q_T = 2 * (kappa * k**2 + config.mu1 * k**4) * cT
    a1, b1 = _fit_power_law(k, q_T)
    a2, b2 = _fit_power_law(k, q_theta)
    return NoiseFit(a1, b1, a2, b2)


def expected_error_curve(
    config: ModelConfig,
    source: SpectralField,
    candidate_mu1: Sequence[float],
    q_T: np.ndarray | None = None,
) -> np.ndarray:
    """Bias plus variance of the quasi-steady estimate for each candidate mu1.

    Sum over k != 0 of (Q_T,k + |(mu1/kappa0) k^2 S_k|^2) / (kappa0 k^2 + mu1 k^4)^2.
    """
    n = config.n_modes
    k = np.arange(-n, n + 1, dtype=float)
    nz = k != 0
    if q_T is None:
        q_T = noise_spectrum(config.alpha1, config.beta1, n)
        q_T = np.concatenate([q_T[:0:-1], q_T])
    kap = config.kappa0
    S = np.abs(source.coeffs)
    out = []
    for mu1 in np.asarray(candidate_mu1, dtype=float):
        den = (kap * k[nz] ** 2 + mu1 * k[nz] ** 4) ** 2
        bias = (mu1 / kap * k[nz] ** 2 * S[nz]) ** 2
        out.append(np.sum((q_T[nz] + bias) / den))
    return np.array(out)


def choose_hyperdiffusion(
    config: ModelConfig,
    source: SpectralField,
    candidate_mu1: Sequence[float],
    q_T: np.ndarray | None = None,
) -> tuple[float, np.ndarray]:
    cand = np.asarray(candidate_mu1, dtype=float)
    if cand.size == 0:
        raise CalibrationError("no mu1 candidates given")
    curve = expected_error_curve(config, source, cand, q_T)
    return float(cand[int(np.argmin(curve))]), np.column_stack([cand, curve])


def default_initialization(
    config: ModelConfig,
    source: SpectralField,
    theta_var: float | np.ndarray | None = None,
) -> tuple[SpectralField, np.ndarray, SpectralField]:
    """Initial mean temperature, prior covariance of the fluctuation state and
    initial diffusivity field.

    T_k(0) = S_k / (kappa0 k^2), T_0(0) = S_rms / kappa0.  The temperature prior
    variance is (S0_k / (kappa0 k^2))^2 with S0_k = max(|S_k|, S_rms); at k = 0
    the k^2 factor is dropped.  ``theta_var`` gives the log-diffusivity prior
    variance (scalar, or per mode k = 0..N); default is the quasistationary
    value alpha2 k^-beta2 / (2 mu2 k^2), with the k = 1 value reused at k = 0.
    """
    if config.kappa0 <= 0:
        raise ValueError("kappa0 must be positive")
    n = config.n_modes
    kap = config.kappa0
    k = np.arange(-n, n + 1, dtype=float)
    S = source.coeffs
    s_rms = float(np.sqrt(np.mean(to_physical(source) ** 2)))
    T0 = np.zeros(2 * n + 1, dtype=complex)
    nz = k != 0
    T0[nz] = S[nz] / (kap * k[nz] ** 2)
    T0[n] = s_rms / kap
    kpos = np.arange(n + 1, dtype=float)
    S0 = np.maximum(np.abs(S[n:]), s_rms)
    scale = np.where(kpos > 0, kap * np.maximum(kpos, 1.0) ** 2, kap)
    varT = (S0 / scale) ** 2
    if np.any(varT <= 0):
        # zero source everywhere: fall back to a unit prior
        varT = np.where(varT > 0, varT, 1.0)
    if theta_var is None:
        theta_var = config.theta_prior_var
    if theta_var is None:
        q = noise_spectrum(config.alpha2, config.beta2, n)
        vth = np.empty(n + 1)
        vth[1:] = q[1:] / (2 * config.mu2 * kpos[1:] ** 2)
        vth[0] = vth[1]
    else:
        vth = np.broadcast_to(np.asarray(theta_var, dtype=float), (n + 1,)).copy()
    if np.any(vth <= 0):
        raise CalibrationError("log-diffusivity prior variance must be positive")
    P0 = np.diag(np.concatenate([mode_variances_to_real(varT), mode_variances_to_real(vth)]))
    return SpectralField(T0), P0, SpectralField.constant(n, kap)
