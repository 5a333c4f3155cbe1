"""Quasilinear outer iteration: smooth the fluctuations about the current mean
fields, average the estimated heat flux in time, evolve the mean temperature
with it and recover the mean diffusivity."""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .calibration import default_initialization
from .kalman import (
    GaussianBelief,
    LinearStageModel,
    SmootherResult,
    least_squares_objective,
    smooth,
)
from .simulator import MeasurementSet
from .spectral import (
    _convolution_matrix,
    ModelConfig,
    SpectralField,
    build_measurement,
    build_transition,
    collocation_points,
    evaluate,
    measurement_rows,
    noise_spectrum,
    real_operator,
    stack,
    to_physical,
    to_spectral,
    unstack,
    mode_variances_to_real,
)

log = logging.getLogger(__name__)

KAPPA_FLOOR_FRACTION = 1e-6


class UnidentifiableWarning(UserWarning):
    pass


@dataclass
class MeanTrajectory:
    """Mean fields at steps 0..Nf, complex coefficients of shape (Nf+1, 2N+1)."""

    t_bar: np.ndarray
    theta_bar: np.ndarray
    flux_bar: np.ndarray
    iteration: int = 0

    @property
    def n_modes(self) -> int:
        return (self.t_bar.shape[1] - 1) // 2

    def kappa_values(self) -> np.ndarray:
        return np.exp(grid_values(self.theta_bar))

    def temperature_values(self) -> np.ndarray:
        return grid_values(self.t_bar)


@dataclass(frozen=True)
class SmoothingKernel:
    """Per-mode box windows (index k = 0..N); mode -k shares the window of k."""

    half_width_steps: np.ndarray
    weights: tuple

    def __post_init__(self):
        for w in self.weights:
            if np.any(w < 0) or not np.isclose(w.sum(), 1.0, atol=1e-14):
                raise ValueError("kernel weights must be nonnegative and sum to 1")
            if not np.allclose(w, w[::-1]):
                raise ValueError("kernel weights must be symmetric")


def make_kernel(
    config: ModelConfig, kappa_bar0: float | None = None, window_factor: float = 4.0
) -> SmoothingKernel:
    """Window of duration window_factor / (kappa k^2), clamped to [3 dt, Nf dt / 3]."""
    kap = config.kappa0 if kappa_bar0 is None else kappa_bar0
    dt = config.dt
    lo, hi = 3 * dt, max(config.n_steps * dt / 3.0, 3 * dt)
    k = np.arange(config.n_modes + 1, dtype=float)
    with np.errstate(divide="ignore"):
        dur = np.where(k > 0, window_factor / (kap * k**2), np.inf)
    dur = np.clip(dur, lo, hi)
    half = np.maximum(np.rint(dur / (2 * dt)).astype(int), 1)
    weights = tuple(np.full(2 * h + 1, 1.0 / (2 * h + 1)) for h in half)
    return SmoothingKernel(half, weights)


def grid_values(coeff_series: np.ndarray) -> np.ndarray:
    """Collocation values for a (n_t, 2N+1) array of coefficients."""
    c = np.asarray(coeff_series)
    c = 0.5 * (c + np.conj(c[:, ::-1]))
    v = np.fft.fftshift(np.fft.ifft(np.fft.ifftshift(c, axes=1), axis=1), axes=1) * c.shape[1]
    return v.real


def grid_to_coeffs(values: np.ndarray) -> np.ndarray:
    v = np.asarray(values, dtype=float)
    c = np.fft.fftshift(np.fft.fft(np.fft.ifftshift(v, axes=1), axis=1), axes=1) / v.shape[1]
    return 0.5 * (c + np.conj(c[:, ::-1]))


def _time_average(series: np.ndarray, half: int) -> np.ndarray:
    """Centred box average along axis 0 with truncated, renormalized edges."""
    n = series.shape[0]
    cs = np.concatenate([np.zeros((1,) + series.shape[1:], series.dtype), np.cumsum(series, axis=0)])
    idx = np.arange(n)
    lo = np.clip(idx - half, 0, n)
    hi = np.clip(idx + half + 1, 0, n)
    counts = (hi - lo).reshape((-1,) + (1,) * (series.ndim - 1))
    return (cs[hi] - cs[lo]) / counts


def kernel_average(series: np.ndarray, kernel: SmoothingKernel) -> np.ndarray:
    """Apply the per-mode time kernel to a (n_t, 2N+1) coefficient series."""
    series = np.asarray(series)
    n = (series.shape[1] - 1) // 2
    out = np.empty_like(series)
    for k in range(n + 1):
        cols = [n + k] if k == 0 else [n - k, n + k]
        out[:, cols] = _time_average(series[:, cols], int(kernel.half_width_steps[k]))
    return out


def estimate_flux(smoothed: SmootherResult, means: MeanTrajectory) -> np.ndarray:
    """Total heat flux exp(theta_bar + theta_hat) d/dx (T_bar + T_hat) per step."""
    n = means.n_modes
    b = 2 * n + 1
    u = smoothed.means
    T_hat = means.t_bar + np.array([unstack(r, n).coeffs for r in u[:, :b]])
    th_hat = means.theta_bar + np.array([unstack(r, n).coeffs for r in u[:, b:]])
    return flux_from_fields(T_hat, th_hat)


def flux_from_fields(T_coeffs: np.ndarray, theta_coeffs: np.ndarray) -> np.ndarray:
    n = (T_coeffs.shape[1] - 1) // 2
    k = np.arange(-n, n + 1)
    kappa = np.exp(grid_values(theta_coeffs))
    dT = grid_values(1j * k * T_coeffs)
    return grid_to_coeffs(kappa * dT)


def average_flux(flux_hats: np.ndarray, kernel: SmoothingKernel) -> np.ndarray:
    return kernel_average(flux_hats, kernel)


def average_flux_divergence(flux_hats: np.ndarray, kernel: SmoothingKernel) -> np.ndarray:
    n = (np.asarray(flux_hats).shape[1] - 1) // 2
    k = np.arange(-n, n + 1)
    return 1j * k * kernel_average(flux_hats, kernel)


def _source_series(source, config: ModelConfig, times: np.ndarray) -> np.ndarray:
    n = config.n_modes
    if source is None:
        return np.zeros((times.size, 2 * n + 1), dtype=complex)
    if isinstance(source, SpectralField):
        return np.tile(source.coeffs, (times.size, 1))
    x = collocation_points(n)
    vals = np.array([np.broadcast_to(np.asarray(source(x, t), dtype=float), x.shape) for t in times])
    return grid_to_coeffs(vals)


class MeanEvolutionError(RuntimeError):
    pass


def _diffusion_matrix(kappa_coeffs: np.ndarray) -> np.ndarray:
    """Mode-space matrix of d/dx(kappa d/dx .)."""
    n = (kappa_coeffs.size - 1) // 2
    k = np.arange(-n, n + 1)
    return -np.outer(k, k) * _convolution_matrix(SpectralField(kappa_coeffs))


def evolve_mean_temperature(
    div_flux_bar: np.ndarray,
    config: ModelConfig,
    source,
    T_bar_initial: SpectralField,
    kappa_bar: np.ndarray | None = None,
    T_ref: np.ndarray | None = None,
) -> np.ndarray:
    """Step dT/dt = div(flux) - mu1 d^4 T + S.

    The k^4 term is Crank-Nicolson; the flux divergence (averaged over the
    step) and S(t + dt/2) are explicit.  When ``kappa_bar`` and ``T_ref`` are
    given, the flux is taken as flux + kappa_bar d/dx(T - T_ref): identical when
    T tracks T_ref, but deviations are diffused (Crank-Nicolson) instead of
    accumulating.
    """
    div = np.asarray(div_flux_bar)
    n = config.n_modes
    dt = config.dt
    k = np.arange(-n, n + 1, dtype=float)
    a = 0.5 * dt * config.mu1 * k**4
    S = _source_series(source, config, config.times[:-1] + 0.5 * dt)
    out = np.empty((config.n_steps + 1, 2 * n + 1), dtype=complex)
    out[0] = T_bar_initial.coeffs
    relax = kappa_bar is not None and T_ref is not None
    eye = np.eye(2 * n + 1)
    L_next = _diffusion_matrix(kappa_bar[0]) if relax else None
    for i in range(config.n_steps):
        forcing = 0.5 * (div[i] + div[i + 1]) + S[i]
        if relax:
            L_now, L_next = L_next, _diffusion_matrix(kappa_bar[i + 1])
            rhs = (1 - a) * out[i] + dt * forcing
            rhs += 0.5 * dt * (L_now @ (out[i] - T_ref[i]) - L_next @ T_ref[i + 1])
            M = np.diag(1 + a) - 0.5 * dt * L_next
            out[i + 1] = np.linalg.solve(M, rhs)
            out[i + 1] = 0.5 * (out[i + 1] + np.conj(out[i + 1][::-1]))
        else:
            out[i + 1] = ((1 - a) * out[i] + dt * forcing) / (1 + a)
        if not np.all(np.isfinite(out[i + 1])) or np.max(np.abs(out[i + 1])) > 1e12:
            raise MeanEvolutionError(f"mean temperature diverged at step {i + 1}")
    return out


def effective_divergence(
    div_flux_bar: np.ndarray, T_bar: np.ndarray, kappa_bar: np.ndarray, T_ref: np.ndarray
) -> np.ndarray:
    """Divergence of flux + kappa_bar d/dx(T_bar - T_ref) at every step."""
    return np.array(
        [d + _diffusion_matrix(kb) @ (t - r) for d, t, kb, r in zip(div_flux_bar, T_bar, kappa_bar, T_ref)]
    )


def mean_temperature_residual(
    T_bar: np.ndarray, div_flux_bar: np.ndarray, config: ModelConfig, source
) -> np.ndarray:
    """Per-step residual of the discrete mean-temperature equation."""
    dt = config.dt
    n = config.n_modes
    k = np.arange(-n, n + 1, dtype=float)
    a = 0.5 * dt * config.mu1 * k**4
    S = _source_series(source, config, config.times[:-1] + 0.5 * dt)
    forcing = 0.5 * (div_flux_bar[:-1] + div_flux_bar[1:]) + S
    res = (1 + a) * T_bar[1:] - (1 - a) * T_bar[:-1] - dt * forcing
    return np.max(np.abs(res), axis=1)


def recover_kappa(
    T_bar: np.ndarray,
    flux_bar: np.ndarray,
    previous_kappa: np.ndarray,
    kappa_floor: float,
) -> np.ndarray:
    """Regularized pointwise solution of kappa dT/dx = flux, per step.

    kappa = (flux dT + eta kappa_prev) / (dT^2 + eta), eta = 1e-3 max dT^2.
    All arguments are coefficient series; the result is a coefficient series
    whose collocation values are floored at ``kappa_floor``.
    """
    n = (T_bar.shape[1] - 1) // 2
    k = np.arange(-n, n + 1)
    dT = grid_values(1j * k * T_bar)
    G = grid_values(flux_bar)
    kprev = grid_values(previous_kappa)
    out = np.empty_like(dT)
    flagged = []
    for i in range(dT.shape[0]):
        peak = np.max(dT[i] ** 2)
        if peak == 0:
            out[i] = kprev[i]
            flagged.append(i)
            continue
        eta = 1e-3 * peak
        out[i] = (G[i] * dT[i] + eta * kprev[i]) / (dT[i] ** 2 + eta)
    if flagged:
        warnings.warn(
            f"mean temperature gradient vanishes at {len(flagged)} steps; kept previous kappa",
            UnidentifiableWarning,
            stacklevel=2,
        )
    return grid_to_coeffs(np.maximum(out, kappa_floor))


def update_theta_mean(
    theta_bar: np.ndarray, smoothed_theta: np.ndarray, kernel: SmoothingKernel
) -> np.ndarray:
    return theta_bar + kernel_average(smoothed_theta, kernel)


# ---------------------------------------------------------------------------
# outer loop


@dataclass
class IterationRecord:
    iteration: int
    objective: float
    change: float
    theta_diag_change: float
    kappa_error: float | None = None
    min_kappa: float = float("nan")
    max_imag_residue: float = 0.0


@dataclass
class ConvergenceReport:
    records: list[IterationRecord] = field(default_factory=list)
    converged: bool = False
    diverged: bool = False
    best_iteration: int = 0

    def kappa_errors(self) -> list[float]:
        return [r.kappa_error for r in self.records if r.kappa_error is not None]

    def as_rows(self) -> list[dict]:
        return [r.__dict__.copy() for r in self.records]


def initial_means(config: ModelConfig, source, T0: SpectralField) -> MeanTrajectory:
    """Deterministic solution with constant kappa0 started from T0."""
    n = config.n_modes
    dt = config.dt
    k = np.arange(-n, n + 1, dtype=float)
    lam = config.kappa0 * k**2 + config.mu1 * k**4
    d = 1 + 0.5 * dt * lam
    f = (1 - 0.5 * dt * lam) / d
    S = _source_series(source, config, config.times[:-1] + 0.5 * dt)
    T = np.empty((config.n_steps + 1, 2 * n + 1), dtype=complex)
    T[0] = T0.coeffs
    for i in range(config.n_steps):
        T[i + 1] = f * T[i] + S[i] * dt / d
    theta = np.zeros_like(T)
    theta[:, n] = np.log(config.kappa0)
    flux = config.kappa0 * 1j * k * T
    return MeanTrajectory(T, theta, flux, 0)


def build_stages(
    config: ModelConfig, means: MeanTrajectory, source
) -> list[LinearStageModel]:
    """Linearized stages for the fluctuation state about the given means.

    The stage offset s_i = A_i T_bar_i + S dt / d - T_bar_{i+1} carries whatever
    part of the mean trajectory the linearized model does not reproduce.
    """
    n = config.n_modes
    b = 2 * n + 1
    dt = config.dt
    S = _source_series(source, config, config.times[:-1] + 0.5 * dt)
    H, R = build_measurement(config)
    kappa_vals = means.kappa_values()
    k = np.arange(-n, n + 1)
    lin_flux = grid_to_coeffs(kappa_vals * grid_values(1j * k * means.t_bar))
    q1 = mode_variances_to_real(noise_spectrum(config.alpha1, config.beta1, n) * dt)
    q2 = mode_variances_to_real(noise_spectrum(config.alpha2, config.beta2, n) * dt)
    Q = np.diag(np.concatenate([q1, q2]))
    theta_block = None
    stages = []
    for i in range(config.n_steps):
        kmid = SpectralField(grid_to_coeffs(0.5 * (kappa_vals[i : i + 1] + kappa_vals[i + 1 : i + 2]))[0])
        gmid = SpectralField(0.5 * (lin_flux[i] + lin_flux[i + 1]))
        ops = build_transition(config, kmid, gmid)
        A = np.diag(ops.f) - ops.g
        F = np.zeros((2 * b, 2 * b))
        F[:b, :b] = real_operator(A, n, n)
        F[:b, b:] = real_operator(ops.h, n, n)
        if theta_block is None:
            theta_block = real_operator(np.diag(ops.theta_decay), n, n)
            Bd_T = real_operator(np.diag(1.0 / ops.d), n, n)
            Bd_th = real_operator(np.diag(1.0 / ops.theta_denom), n, n)
        F[b:, b:] = theta_block
        B = np.zeros((2 * b, 2 * b))
        B[:b, :b] = Bd_T
        B[:b, b:] = real_operator(ops.c, n, n)
        B[b:, b:] = Bd_th
        resid = A @ means.t_bar[i] + S[i] * dt / ops.d - means.t_bar[i + 1]
        s = np.zeros(2 * b)
        s[:b] = stack(SpectralField(0.5 * (resid + np.conj(resid[::-1]))))
        stages.append(LinearStageModel(F=F, B=B, Q=Q, H=H, R=R, s=s))
    return stages


def fluctuation_measurements(
    config: ModelConfig, measurements: MeasurementSet, means: MeanTrajectory
) -> list[np.ndarray | None]:
    """Data minus the mean temperature at the sensors, in step slots 1..Nf."""
    rows = measurement_rows(config.n_modes, config.sensor_locations)
    out: list[np.ndarray | None] = [None] * config.n_steps
    for j, i in enumerate(measurements.steps):
        i = int(i)
        out[i - 1] = measurements.values[:, j] - rows @ stack(SpectralField(means.t_bar[i]))
    return out


def _relative_change(new: MeanTrajectory, old: MeanTrajectory) -> float:
    num = np.sum(np.abs(new.t_bar - old.t_bar) ** 2) + np.sum(np.abs(new.theta_bar - old.theta_bar) ** 2)
    den = np.sum(np.abs(old.t_bar) ** 2) + np.sum(np.abs(old.theta_bar) ** 2)
    return float(np.sqrt(num / max(den, np.finfo(float).tiny)))


def kappa_relative_error(kappa_est: np.ndarray, kappa_true: np.ndarray) -> float:
    """Relative discrete L2 error over space and time (collocation values)."""
    return float(np.linalg.norm(kappa_est - kappa_true) / np.linalg.norm(kappa_true))


@dataclass
class OuterIterationResult:
    means: MeanTrajectory
    smoothed: SmootherResult
    report: ConvergenceReport
    history: list[MeanTrajectory]

    def __iter__(self):
        return iter((self.means, self.smoothed, self.report))


def run_outer_iteration(
    config: ModelConfig,
    measurements: MeasurementSet,
    source=None,
    max_iters: int = 10,
    tol: float = 1e-4,
    kappa_true: np.ndarray | None = None,
    window_factor: float = 4.0,
    init: tuple | None = None,
    use_theta_update: bool = False,
    damping: float = 0.5,
) -> OuterIterationResult:
    """Iterate {linearize, smooth, flux average, mean evolution, kappa recovery}.

    ``kappa_true`` (collocation values, shape (Nf+1, 2N+1)) enables the per
    iteration error record used by twin experiments.  With
    ``use_theta_update`` the additive log-diffusivity update replaces the
    flux-based recovery as the new mean (diagnostic alternative).  The log
    diffusivity moves by ``damping`` times the proposed update each iteration.
    """
    if not 0 < damping <= 1:
        raise ValueError("damping must lie in (0, 1]")
    n = config.n_modes
    b = 2 * n + 1
    src0 = _source_series(source, config, np.array([0.0]))[0]
    if init is None:
        init = default_initialization(config, SpectralField(src0))
    T0, P0, kappa_init = init
    theta_init = grid_to_coeffs(np.log(np.atleast_2d(to_physical(kappa_init))))[0]
    kernel = make_kernel(config, window_factor=window_factor)
    floor = KAPPA_FLOOR_FRACTION * config.kappa0
    kvec = np.arange(-n, n + 1)

    means = initial_means(config, source, T0)
    report = ConvergenceReport()
    history = [means]
    best = (np.inf, means, None)
    increases = 0

    def smooth_about(m: MeanTrajectory):
        # the prior is on the total initial state; centre it on the current mean
        mu = np.concatenate([stack(SpectralField(T0.coeffs - m.t_bar[0])),
                             stack(SpectralField(theta_init - m.theta_bar[0]))])
        prior = GaussianBelief(mu, P0, "filtered", 0)
        stages = build_stages(config, m, source)
        ys = fluctuation_measurements(config, measurements, m)
        sm = smooth(stages, ys, prior)
        obj = least_squares_objective(stages, ys, sm.means, prior)
        return sm, obj

    smoothed, objective = smooth_about(means)

    def record(it, m, obj, change, diag_change):
        kv = m.kappa_values()
        imag = float(np.max(np.abs(_imag_residue(m.t_bar))))
        imag = max(imag, float(np.max(np.abs(_imag_residue(m.theta_bar)))))
        err = None if kappa_true is None else kappa_relative_error(kv, kappa_true)
        report.records.append(
            IterationRecord(it, obj, change, diag_change, err, float(kv.min()), imag)
        )

    record(0, means, objective, float("nan"), float("nan"))
    best = (objective, means, smoothed)
    prev_obj = objective
    for it in range(1, max_iters + 1):
        u = smoothed.means
        T_fl = np.array([unstack(r, n).coeffs for r in u[:, :b]])
        th_fl = np.array([unstack(r, n).coeffs for r in u[:, b:]])
        flux_hat = flux_from_fields(means.t_bar + T_fl, means.theta_bar + th_fl)
        flux_avg = average_flux(flux_hat, kernel)
        div = 1j * kvec * flux_avg
        T_hat = means.t_bar + T_fl
        T_ref = kernel_average(T_hat, kernel)
        kappa_avg = kernel_average(
            grid_to_coeffs(np.exp(grid_values(means.theta_bar + th_fl))), kernel
        )
        T_start = SpectralField(T_ref[0])
        t_new = evolve_mean_temperature(div, config, source, T_start, kappa_avg, T_ref)
        theta_diag = update_theta_mean(means.theta_bar, th_fl, kernel)
        if use_theta_update:
            theta_new = theta_diag
        else:
            # the averaged flux is paired with the averaged temperature it came from
            kappa_prev = grid_to_coeffs(means.kappa_values())
            kappa_new = recover_kappa(T_ref, flux_avg, kappa_prev, floor)
            theta_new = grid_to_coeffs(np.log(np.maximum(grid_values(kappa_new), floor)))
        theta_new = means.theta_bar + damping * (theta_new - means.theta_bar)
        flux_lin = grid_to_coeffs(np.exp(grid_values(theta_new)) * grid_values(1j * kvec * t_new))
        new = MeanTrajectory(t_new, theta_new, flux_lin, it)
        change = _relative_change(new, means)
        diag_change = float(
            np.sqrt(np.sum(np.abs(theta_diag - theta_new) ** 2) / max(np.sum(np.abs(theta_new) ** 2), 1e-300))
        )
        means = new
        history.append(means)
        smoothed, objective = smooth_about(means)
        record(it, means, objective, change, diag_change)
        log.info("iteration %d: objective %.6g change %.3e", it, objective, change)
        if objective < best[0]:
            best = (objective, means, smoothed)
        increases = increases + 1 if objective > prev_obj else 0
        prev_obj = objective
        if change < tol:
            report.converged = True
            break
        if increases >= 3:
            report.diverged = True
            means, smoothed = best[1], best[2]
            break
    report.best_iteration = best[1].iteration
    return OuterIterationResult(means, smoothed, report, history)


def _imag_residue(coeff_series: np.ndarray) -> np.ndarray:
    """Imaginary part of the collocation values, relative to the field scale."""
    c = np.asarray(coeff_series)
    v = np.fft.fftshift(np.fft.ifft(np.fft.ifftshift(c, axes=1), axis=1), axes=1) * c.shape[1]
    scale = np.maximum(np.max(np.abs(v), axis=1), np.finfo(float).tiny)
    return np.max(np.abs(v.imag), axis=1) / scale
