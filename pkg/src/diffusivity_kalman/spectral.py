"""Spectral representation of periodic fields and the discrete operators of the
augmented temperature / log-diffusivity model.

Fields on [-pi, pi) are truncated Fourier series with modes k = -N..N.  The
Kalman state is a *real* vector: for each of the two fields (temperature
fluctuation, log-diffusivity fluctuation) we stack

    [Re c_0, Re c_1, ..., Re c_N, Im c_1, ..., Im c_N]

so every block has 2N+1 entries and the full state has 2(2N+1).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

import numpy as np

HERMITIAN_RTOL = 1e-12


class SymmetryError(ValueError):
    """Coefficients do not describe a real field."""


@dataclass(frozen=True)
class SpectralField:
    """Complex Fourier coefficients ordered k = -N..N."""

    coeffs: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=complex)
        if c.ndim != 1 or c.size % 2 != 1:
            raise ValueError("coeffs must be a 1-d array of odd length 2N+1")
        object.__setattr__(self, "coeffs", c)

    @property
    def n_modes(self) -> int:
        return (self.coeffs.size - 1) // 2

    @property
    def wavenumbers(self) -> np.ndarray:
        return np.arange(-self.n_modes, self.n_modes + 1)

    def mode(self, k: int) -> complex:
        return self.coeffs[k + self.n_modes]

    def hermitian_defect(self) -> float:
        c = self.coeffs
        return float(np.max(np.abs(c - np.conj(c[::-1])), initial=0.0))

    def derivative(self) -> "SpectralField":
        return SpectralField(1j * self.wavenumbers * self.coeffs)

    def __add__(self, other: "SpectralField") -> "SpectralField":
        return SpectralField(self.coeffs + other.coeffs)

    def __sub__(self, other: "SpectralField") -> "SpectralField":
        return SpectralField(self.coeffs - other.coeffs)

    def scale(self, a: float) -> "SpectralField":
        return SpectralField(a * self.coeffs)

    @classmethod
    def zeros(cls, n_modes: int) -> "SpectralField":
        return cls(np.zeros(2 * n_modes + 1, dtype=complex))

    @classmethod
    def constant(cls, n_modes: int, value: float) -> "SpectralField":
        c = np.zeros(2 * n_modes + 1, dtype=complex)
        c[n_modes] = value
        return cls(c)


def collocation_points(n_modes: int) -> np.ndarray:
    """The 2N+1 equispaced points x_j = 2 pi j / (2N+1), j = -N..N."""
    m = 2 * n_modes + 1
    return 2.0 * np.pi * np.arange(-n_modes, n_modes + 1) / m


def to_physical(field: SpectralField, check: bool = True) -> np.ndarray:
    """Evaluate the field at the collocation points.

    Raises SymmetryError when the coefficients are not Hermitian or when the
    reconstructed values carry an imaginary residue above 1e-12 of the field
    scale.
    """
    c = field.coeffs
    scale = max(float(np.max(np.abs(c))), np.finfo(float).tiny)
    if check and field.hermitian_defect() > HERMITIAN_RTOL * scale:
        raise SymmetryError(
            f"coefficients violate c(-k) = conj(c(k)) by {field.hermitian_defect():.3e}"
        )
    c = 0.5 * (c + np.conj(c[::-1]))
    # ifftshift puts k=0 first; fftshift restores j = -N..N ordering
    vals = np.fft.fftshift(np.fft.ifft(np.fft.ifftshift(c))) * c.size
    vmax = max(float(np.max(np.abs(vals))), np.finfo(float).tiny)
    if check and np.max(np.abs(vals.imag)) > HERMITIAN_RTOL * vmax:
        raise SymmetryError("imaginary residue in reconstructed field")
    return vals.real.copy()


def to_spectral(values: np.ndarray, n_modes: int | None = None) -> SpectralField:
    """Inverse of :func:`to_physical` on the collocation grid."""
    v = np.asarray(values, dtype=float)
    if v.ndim != 1 or v.size % 2 != 1:
        raise ValueError(f"expected 2N+1 collocation values, got shape {v.shape}")
    if n_modes is not None and v.size != 2 * n_modes + 1:
        raise ValueError(f"expected {2 * n_modes + 1} values for N={n_modes}, got {v.size}")
    c = np.fft.fftshift(np.fft.fft(np.fft.ifftshift(v))) / v.size
    c = 0.5 * (c + np.conj(c[::-1]))
    return SpectralField(c)


def evaluate(field: SpectralField, x: np.ndarray) -> np.ndarray:
    """Evaluate the truncated series at arbitrary points."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    basis = np.exp(1j * np.outer(x, field.wavenumbers))
    return (basis @ field.coeffs).real


def sample(fn: Callable[[np.ndarray], np.ndarray], n_modes: int) -> SpectralField:
    """Band-limit a function of x by collocation."""
    x = collocation_points(n_modes)
    return to_spectral(np.broadcast_to(np.asarray(fn(x), dtype=float), x.shape).copy())


class DiffusivityDomainError(ValueError):
    pass


def log_diffusivity(kappa_field: SpectralField) -> SpectralField:
    vals = to_physical(kappa_field)
    bad = np.flatnonzero(vals <= 0)
    if bad.size:
        j = int(bad[0])
        raise DiffusivityDomainError(
            f"kappa is nonpositive ({vals[j]:.3e}) at collocation index {j}"
        )
    return to_spectral(np.log(vals))


def exp_diffusivity(theta_field: SpectralField) -> SpectralField:
    return to_spectral(np.exp(to_physical(theta_field)))


def multiply(a: SpectralField, b: SpectralField) -> SpectralField:
    """Pointwise product by collocation (aliased back to N modes)."""
    return to_spectral(to_physical(a) * to_physical(b))


# ---------------------------------------------------------------------------
# real <-> complex stacking


@lru_cache(maxsize=32)
def stacking_matrices(n_modes: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (P, P_inv): complex c = P @ r and r = (P_inv @ c).real.

    r is [Re c_0..Re c_N, Im c_1..Im c_N]; c is ordered k = -N..N.
    """
    n = n_modes
    m = 2 * n + 1
    P = np.zeros((m, m), dtype=complex)
    P[n, 0] = 1.0
    for k in range(1, n + 1):
        re, im = k, n + k
        P[n + k, re] = 1.0
        P[n + k, im] = 1j
        P[n - k, re] = 1.0
        P[n - k, im] = -1j
    P_inv = np.linalg.inv(P)
    P.flags.writeable = False
    P_inv.flags.writeable = False
    return P, P_inv


def stack(field: SpectralField) -> np.ndarray:
    n = field.n_modes
    c = field.coeffs
    return np.concatenate([c[n:].real, c[n + 1 :].imag])


def unstack(r: np.ndarray, n_modes: int) -> SpectralField:
    r = np.asarray(r, dtype=float)
    n = n_modes
    pos = r[: n + 1] + 0j
    pos[1:] += 1j * r[n + 1 :]
    return SpectralField(np.concatenate([np.conj(pos[:0:-1]), pos]))


def real_operator(A: np.ndarray, n_rows: int, n_cols: int) -> np.ndarray:
    """Real matrix of a complex mode-space operator acting on stacked vectors.

    A maps coefficient vectors of N=n_cols to coefficient vectors of N=n_rows;
    it must preserve Hermitian symmetry for the result to be exact.
    """
    P_c, _ = stacking_matrices(n_cols)
    _, Pinv_r = stacking_matrices(n_rows)
    M = Pinv_r @ A @ P_c
    return M.real


def mode_variances_to_real(var: np.ndarray) -> np.ndarray:
    """Diagonal real variances from complex per-mode variances E|c_k|^2, k = 0..N.

    For k >= 1 the real and imaginary parts each carry half the variance.
    """
    var = np.asarray(var, dtype=float)
    return np.concatenate([var[:1], var[1:] / 2.0, var[1:] / 2.0])


# ---------------------------------------------------------------------------
# model configuration and operators


@dataclass(frozen=True)
class ModelConfig:
    n_modes: int
    kappa0: float
    mu1: float
    mu2: float
    alpha1: float
    beta1: float
    alpha2: float
    beta2: float
    dt: float
    n_steps: int
    sensor_locations: np.ndarray
    sensor_sigmas: np.ndarray
    theta_prior_var: float | np.ndarray | None = None

    def __post_init__(self):
        loc = np.atleast_1d(np.asarray(self.sensor_locations, dtype=float))
        sig = np.asarray(self.sensor_sigmas, dtype=float)
        if sig.ndim == 0:
            sig = np.full(loc.shape, float(sig))
        object.__setattr__(self, "sensor_locations", loc)
        object.__setattr__(self, "sensor_sigmas", sig)
        if self.n_modes < 1:
            raise ValueError("n_modes must be >= 1")
        if self.kappa0 <= 0:
            raise ValueError("kappa0 must be positive")
        if self.mu1 < 0 or self.mu2 <= 0:
            raise ValueError("mu1 must be >= 0 and mu2 > 0")
        if min(self.alpha1, self.alpha2) < 0:
            raise ValueError("noise amplitudes must be nonnegative")
        if self.dt <= 0 or self.n_steps < 1:
            raise ValueError("dt must be positive and n_steps >= 1")
        if loc.size == 0:
            raise ValueError("sensor_locations must not be empty")
        if sig.shape != loc.shape:
            raise ValueError("sensor_sigmas and sensor_locations differ in length")
        if np.any(np.diff(loc) <= 0):
            raise ValueError("sensor_locations must be strictly increasing")
        if np.any(loc < -np.pi) or np.any(loc >= np.pi):
            raise ValueError("sensor_locations must lie in [-pi, pi)")
        if np.any(sig < 0):
            raise ValueError("sensor_sigmas must be nonnegative")

    @property
    def n_sensors(self) -> int:
        return self.sensor_locations.size

    @property
    def block_size(self) -> int:
        return 2 * self.n_modes + 1

    @property
    def state_dim(self) -> int:
        return 2 * self.block_size

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)

    def stability_number(self) -> float:
        """dt * (kappa0 N^2 + mu1 N^4); large values mean strong damping of f_k."""
        n = self.n_modes
        return self.dt * (self.kappa0 * n**2 + self.mu1 * n**4)

    def replace(self, **changes) -> "ModelConfig":
        from dataclasses import replace

        return replace(self, **changes)


def uniform_sensors(m: int) -> np.ndarray:
    """x_l = pi (2l - m - 1) / m, l = 1..m."""
    ell = np.arange(1, m + 1)
    return np.pi * (2 * ell - m - 1) / m


def noise_spectrum(alpha: float, beta: float, n_modes: int) -> np.ndarray:
    """alpha |k|^-beta for k = 0..N, with |k|^-beta taken as 1 at k = 0."""
    k = np.arange(n_modes + 1, dtype=float)
    out = np.ones_like(k)
    out[1:] = k[1:] ** (-beta)
    return alpha * out


@dataclass(frozen=True)
class TransitionOperators:
    """Coefficients of one semi-implicit step, in complex mode space (k = -N..N).

    T(t+dt) = f T - g T + h theta + c w2 + (S dt + w) / d
    theta(t+dt) = theta_decay theta + w2 / theta_denom
    """

    d: np.ndarray
    f: np.ndarray
    g: np.ndarray
    h: np.ndarray
    c: np.ndarray
    theta_decay: np.ndarray
    theta_denom: np.ndarray = field(repr=False)


def _convolution_matrix(field: SpectralField) -> np.ndarray:
    """C[k, k'] = field_{k - k'} (zero outside the resolved band)."""
    n = field.n_modes
    k = np.arange(-n, n + 1)
    diff = k[:, None] - k[None, :]
    out = np.zeros(diff.shape, dtype=complex)
    inside = np.abs(diff) <= n
    out[inside] = field.coeffs[diff[inside] + n]
    return out


def build_transition(
    config: ModelConfig, mean_kappa: SpectralField, mean_flux: SpectralField
) -> TransitionOperators:
    n = config.n_modes
    dt = config.dt
    if mean_kappa.n_modes != n or mean_flux.n_modes != n:
        raise ValueError("mean fields must have the configured number of modes")
    if np.any(to_physical(mean_kappa) <= 0):
        raise DiffusivityDomainError("mean diffusivity must be positive on the grid")
    k = np.arange(-n, n + 1, dtype=float)
    lam = config.kappa0 * k**2 + config.mu1 * k**4
    d = 1.0 + 0.5 * dt * lam
    f = (1.0 - 0.5 * dt * lam) / d
    e = 1.0 + 0.5 * dt * config.mu2 * k**2
    theta_decay = (1.0 - 0.5 * dt * config.mu2 * k**2) / e

    # departure of the mean diffusivity from kappa0; its diagonal is zero when
    # the mean of kappa equals kappa0
    dk = mean_kappa.coeffs.copy()
    dk[n] -= config.kappa0
    G = np.outer(k, k) * _convolution_matrix(SpectralField(dk))
    g = dt * G / np.outer(d, d)

    A = 1j * k[:, None] * _convolution_matrix(mean_flux)
    h = 0.5 * dt * A / d[:, None] * (1.0 + theta_decay)[None, :]
    c = 0.5 * dt * A / d[:, None] / e[None, :]
    return TransitionOperators(d=d, f=f, g=g, h=h, c=c, theta_decay=theta_decay, theta_denom=e)


def complex_step(
    ops: TransitionOperators,
    T: np.ndarray,
    theta: np.ndarray,
    w: np.ndarray,
    w2: np.ndarray,
    source_dt: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """One step in complex coefficients; the reference form of the update."""
    T_new = ops.f * T - ops.g @ T + ops.h @ theta + ops.c @ w2 + (source_dt + w) / ops.d
    theta_new = ops.theta_decay * theta + w2 / ops.theta_denom
    return T_new, theta_new


def assemble_stage(ops: TransitionOperators, config: ModelConfig, source: SpectralField):
    """Real stage matrices (F, B, Q, s) for the stacked augmented state.

    Returns a :class:`diffusivity_kalman.kalman.LinearStageModel` with the
    physical-space measurement operator attached.
    """
    from .kalman import LinearStageModel

    n = config.n_modes
    b = config.block_size
    dt = config.dt
    Tblock = np.diag(ops.f) - ops.g
    F = np.zeros((2 * b, 2 * b))
    F[:b, :b] = real_operator(Tblock, n, n)
    F[:b, b:] = real_operator(ops.h, n, n)
    F[b:, b:] = real_operator(np.diag(ops.theta_decay), n, n)

    B = np.zeros((2 * b, 2 * b))
    B[:b, :b] = real_operator(np.diag(1.0 / ops.d), n, n)
    B[:b, b:] = real_operator(ops.c, n, n)
    B[b:, b:] = real_operator(np.diag(1.0 / ops.theta_denom), n, n)

    q1 = mode_variances_to_real(noise_spectrum(config.alpha1, config.beta1, n) * dt)
    q2 = mode_variances_to_real(noise_spectrum(config.alpha2, config.beta2, n) * dt)
    Q = np.diag(np.concatenate([q1, q2]))

    s = np.zeros(2 * b)
    s[:b] = stack(SpectralField(source.coeffs * dt / ops.d))
    H, R = build_measurement(config)
    return LinearStageModel(F=F, B=B, Q=Q, H=H, R=R, s=s)


def measurement_rows(n_modes: int, x: np.ndarray) -> np.ndarray:
    """Rows evaluating a stacked single-field vector at points x."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    k = np.arange(1, n_modes + 1)
    rows = np.empty((x.size, 2 * n_modes + 1))
    rows[:, 0] = 1.0
    rows[:, 1 : n_modes + 1] = 2.0 * np.cos(np.outer(x, k))
    rows[:, n_modes + 1 :] = -2.0 * np.sin(np.outer(x, k))
    return rows


def build_measurement(config: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    b = config.block_size
    H = np.zeros((config.n_sensors, 2 * b))
    H[:, :b] = measurement_rows(config.n_modes, config.sensor_locations)
    R = np.diag(config.sensor_sigmas**2)
    return H, R


def mode_space_measurement(config: ModelConfig) -> tuple[np.ndarray, np.ndarray]:
    """Complex evaluation and error matrices after transforming data to modes.

    H_mode[k, k'] = sum_l exp(i (k - k') x_l),  0 <= k <= m/2, |k'| <= N
    R_mode[k, k'] = sum_l sigma_l^2 exp(i (k' - k) x_l),  0 <= k, k' <= m/2
    """
    x = config.sensor_locations
    sig2 = config.sensor_sigmas**2
    rows = np.arange(config.n_sensors // 2 + 1)
    cols = np.arange(-config.n_modes, config.n_modes + 1)
    diff = rows[:, None] - cols[None, :]
    H = np.exp(1j * diff[..., None] * x).sum(axis=-1)
    rdiff = rows[None, :] - rows[:, None]
    R = (sig2 * np.exp(1j * rdiff[..., None] * x)).sum(axis=-1)
    return H, R


def split_state(u: np.ndarray, n_modes: int) -> tuple[SpectralField, SpectralField]:
    b = 2 * n_modes + 1
    return unstack(u[:b], n_modes), unstack(u[b:], n_modes)


def join_state(T: SpectralField, theta: SpectralField) -> np.ndarray:
    return np.concatenate([stack(T), stack(theta)])


def as_fields(arrays: Sequence[np.ndarray]) -> list[SpectralField]:
    return [SpectralField(a) for a in arrays]
