"""Synthetic truth trajectories and noisy sensor data for twin experiments."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from .spectral import (
    ModelConfig,
    SpectralField,
    build_transition,
    collocation_points,
    evaluate,
    noise_spectrum,
    to_physical,
    to_spectral,
)

FieldFn = Callable[[np.ndarray, float], np.ndarray]


class SimulationDivergedError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"temperature amplitude exceeded 1e12 at step {step}")
        self.step = step


@dataclass(frozen=True)
class TruthTrajectory:
    times: np.ndarray
    temperature: np.ndarray  # (n_steps+1, 2N+1) complex coefficients
    theta: np.ndarray  # total log-diffusivity, same layout
    seed: int | None

    @property
    def n_modes(self) -> int:
        return (self.temperature.shape[1] - 1) // 2

    def temperature_field(self, i: int) -> SpectralField:
        return SpectralField(self.temperature[i])

    def kappa_values(self) -> np.ndarray:
        """Diffusivity on the collocation grid, shape (n_steps+1, 2N+1)."""
        return np.exp(np.array([to_physical(SpectralField(c)) for c in self.theta]))


@dataclass(frozen=True)
class MeasurementSet:
    steps: np.ndarray  # step indices of each measurement column
    times: np.ndarray
    values: np.ndarray  # (m, n_meas)
    sensor_locations: np.ndarray
    sensor_sigmas: np.ndarray

    def as_sequence(self, n_steps: int) -> list[np.ndarray | None]:
        """Measurement slots for steps 1..n_steps (None where unmeasured)."""
        out: list[np.ndarray | None] = [None] * n_steps
        for j, i in enumerate(self.steps):
            out[int(i) - 1] = self.values[:, j]
        return out


def _complex_noise(rng: np.random.Generator, var: np.ndarray, n: int) -> np.ndarray:
    """Hermitian Gaussian increments with E|w_k|^2 = var_k (var indexed k = 0..N)."""
    w = np.zeros(2 * n + 1, dtype=complex)
    w[n] = np.sqrt(var[0]) * rng.standard_normal()
    z = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) * np.sqrt(var[1:] / 2.0)
    w[n + 1 :] = z
    w[:n] = np.conj(z[::-1])
    return w


def _as_field_fn(fn, n: int) -> Callable[[float], SpectralField]:
    x = collocation_points(n)
    if fn is None:
        return lambda t: SpectralField.zeros(n)
    if isinstance(fn, SpectralField):
        return lambda t: fn

    def at(t: float) -> SpectralField:
        vals = np.broadcast_to(np.asarray(fn(x, t), dtype=float), x.shape)
        return to_spectral(vals.copy())

    return at


def simulate_truth(
    config: ModelConfig,
    true_kappa: FieldFn | SpectralField,
    source: FieldFn | SpectralField | None,
    seed: int | None,
    T_init: SpectralField | None = None,
    theta_init: SpectralField | None = None,
    refine: int = 1,
) -> TruthTrajectory:
    """Advance temperature and log-diffusivity jointly with the semi-implicit scheme.

    The total log-diffusivity is ln(true_kappa) plus an Ornstein-Uhlenbeck
    fluctuation driven by the alpha2 noise.  ``refine`` > 1 runs the truth at
    dt/refine and subsamples, so the truth is not generated by exactly the
    estimator's discretization.
    """
    n = config.n_modes
    if refine < 1:
        raise ValueError("refine must be >= 1")
    fine = config.replace(dt=config.dt / refine, n_steps=config.n_steps * refine)
    dt = fine.dt
    rng = np.random.default_rng(seed)
    kappa_at = _as_field_fn(true_kappa, n)
    source_at = _as_field_fn(source, n)
    zero = SpectralField.zeros(n)
    ops_theta = build_transition(fine, SpectralField.constant(n, config.kappa0), zero)

    T = np.zeros(2 * n + 1, dtype=complex) if T_init is None else T_init.coeffs.copy()
    th = np.zeros(2 * n + 1, dtype=complex) if theta_init is None else theta_init.coeffs.copy()
    q1 = noise_spectrum(config.alpha1, config.beta1, n) * dt
    q2 = noise_spectrum(config.alpha2, config.beta2, n) * dt

    def total_theta(t, fluct):
        kv = to_physical(kappa_at(t))
        if np.any(kv <= 0):
            raise ValueError(f"true diffusivity is nonpositive at t={t}")
        return np.log(kv) + to_physical(SpectralField(fluct))

    Ts = [T.copy()]
    thetas = [to_spectral(total_theta(0.0, th)).coeffs]
    for step in range(fine.n_steps):
        t = step * dt
        w = _complex_noise(rng, q1, n)
        w2 = _complex_noise(rng, q2, n)
        th_new = ops_theta.theta_decay * th + w2 / ops_theta.theta_denom
        # diffusivity at the half step, with the fluctuation averaged over the step
        theta_mid = total_theta(t + 0.5 * dt, 0.5 * (th + th_new))
        kappa_mid = to_spectral(np.exp(theta_mid))
        ops = build_transition(fine, kappa_mid, zero)
        S = source_at(t + 0.5 * dt).coeffs
        T = ops.f * T - ops.g @ T + (S * dt + w) / ops.d
        T = 0.5 * (T + np.conj(T[::-1]))
        th = 0.5 * (th_new + np.conj(th_new[::-1]))
        if not np.all(np.isfinite(T)) or np.max(np.abs(T)) > 1e12:
            raise SimulationDivergedError((step + 1 + refine - 1) // refine)
        if (step + 1) % refine == 0:
            Ts.append(T.copy())
            thetas.append(to_spectral(total_theta((step + 1) * dt, th)).coeffs)
    return TruthTrajectory(config.times.copy(), np.array(Ts), np.array(thetas), seed)


def synthesize_measurements(
    truth: TruthTrajectory,
    config: ModelConfig,
    measure_every: int = 1,
    seed: int | None = None,
) -> MeasurementSet:
    if measure_every < 1:
        raise ValueError("measure_every must be >= 1")
    rng = np.random.default_rng(seed)
    steps = np.arange(measure_every, config.n_steps + 1, measure_every)
    x = config.sensor_locations
    clean = np.column_stack([evaluate(truth.temperature_field(i), x) for i in steps])
    noise = rng.standard_normal(clean.shape) * config.sensor_sigmas[:, None]
    return MeasurementSet(
        steps=steps,
        times=truth.times[steps],
        values=clean + noise,
        sensor_locations=x.copy(),
        sensor_sigmas=config.sensor_sigmas.copy(),
    )
