"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the terminal summary lists
all criteria together.
"""
import time

import numpy as np
import pytest

from diffusivity_kalman.calibration import (
    continuous_generator,
    cross_term_ratio,
    lyapunov_stationary,
    mode_covariance,
    quasistationary_variances,
)
from diffusivity_kalman.kalman import (
    GaussianBelief,
    filter_pass,
    least_squares_objective,
    rts_smooth,
    smooth,
    solve_block_tridiagonal,
)
from diffusivity_kalman.mean_iteration import (
    KAPPA_FLOOR_FRACTION,
    kappa_relative_error,
    run_outer_iteration,
)
from diffusivity_kalman.scenarios import (
    TWIN_KAPPA,
    TWIN_SOURCE,
    twin_config,
    twin_measurements,
)
from diffusivity_kalman.spectral import (
    ModelConfig,
    SpectralField,
    assemble_stage,
    build_transition,
    collocation_points,
    mode_space_measurement,
    noise_spectrum,
    sample,
    to_spectral,
    uniform_sensors,
)
from oracles import dense_normal_matrix, random_hermitian, random_problem, van_loan


def spectral_stages(rng, n_modes=4, n_stages=30, n_sensors=6):
    """Stages of the augmented model about random mean fields."""
    cfg = ModelConfig(
        n_modes=n_modes, kappa0=1.0, mu1=1e-3, mu2=0.5, alpha1=1e-2, beta1=1.0,
        alpha2=1e-2, beta2=1.0, dt=0.02, n_steps=n_stages,
        sensor_locations=uniform_sensors(n_sensors), sensor_sigmas=0.05,
    )
    x = collocation_points(n_modes)
    stages = []
    for _ in range(n_stages):
        a, b = rng.uniform(-0.3, 0.3, 2)
        kappa = to_spectral(1 + a * np.sin(x) + b * np.cos(2 * x))
        flux = SpectralField(random_hermitian(rng, n_modes, 0.3))
        src = SpectralField(random_hermitian(rng, n_modes))
        stages.append(assemble_stage(build_transition(cfg, kappa, flux), cfg, src))
    ys = [rng.standard_normal(n_sensors) if rng.random() > 0.2 else None for _ in stages]
    prior = GaussianBelief(rng.standard_normal(cfg.state_dim), 0.5 * np.eye(cfg.state_dim))
    return stages, ys, prior


# 1 -------------------------------------------------------------------------


def test_criterion_1_smoother_oracle_equivalence(criterion):
    rng = np.random.default_rng(1)
    stages, ys, prior = spectral_stages(rng, n_modes=4, n_stages=30)
    assert prior.mean.size == 18
    t0 = time.perf_counter()
    sm = smooth(stages, ys, prior)
    x, cov = solve_block_tridiagonal(stages, ys, prior)
    elapsed = time.perf_counter() - t0
    mean_err = np.max(np.abs(sm.means - x)) / np.max(np.abs(x))
    diag_s = np.array([np.diag(c) for c in sm.covs])
    diag_o = np.array([np.diag(c) for c in cov])
    cov_err = np.max(np.abs(diag_s - diag_o) / np.abs(diag_o))
    ok = mean_err <= 1e-8 and cov_err <= 1e-8 and elapsed < 1.0
    criterion(1, ok, f"means rel {mean_err:.1e}, cov diag rel {cov_err:.1e} (<= 1e-8), {elapsed:.3f} s (< 1 s)")
    assert ok


# 2 -------------------------------------------------------------------------


def test_criterion_2_filter_contraction(criterion):
    rng = np.random.default_rng(2)
    worst_meas, worst_smooth = np.inf, -np.inf
    for inst in range(50):
        if inst % 5 == 0:
            stages, ys, prior = spectral_stages(rng, n_modes=2, n_stages=20, n_sensors=3)
        else:
            dim = int(rng.integers(1, 9))
            stages, ys, prior = random_problem(rng, dim=dim, n_stages=25, n_obs=int(rng.integers(1, 4)))
        res = filter_pass(stages, ys, prior)
        sm = rts_smooth(res)
        for pred, filt in zip(res.predicted, res.filtered[1:]):
            worst_meas = min(worst_meas, np.linalg.eigvalsh(pred.cov - filt.cov)[0])
        for s, f in zip(sm.beliefs, sm.filtered):
            worst_smooth = max(worst_smooth, np.trace(s.cov) - np.trace(f.cov))
    ok = worst_meas >= -1e-10 and worst_smooth <= 1e-10
    criterion(2, ok, f"50 instances: min eig(P(i|i-1)-P(i|i)) {worst_meas:.1e}, "
                     f"max tr P(i|Nf)-tr P(i|i) {worst_smooth:.1e} (tol 1e-10)")
    assert ok


# 3 -------------------------------------------------------------------------


def test_criterion_3_stationary_covariance(criterion):
    rng = np.random.default_rng(3)
    dim = 6
    M = rng.standard_normal((dim, dim))
    S = rng.standard_normal((dim, dim))
    F = -(M @ M.T / dim + 0.5 * np.eye(dim)) + 0.5 * (S - S.T)
    G = rng.standard_normal((dim, dim))
    Q = G @ G.T / dim + 0.1 * np.eye(dim)
    C = lyapunov_stationary(F, Q).c0

    relax = 1.0 / np.min(-np.linalg.eigvals(F).real)
    n_sub = 200
    Phi, Qd = van_loan(F, Q, 10 * relax / n_sub)
    L = np.linalg.cholesky(Qd)
    paths = 10_000
    x = np.zeros((paths, dim))
    for _ in range(n_sub):
        x = x @ Phi.T + rng.standard_normal((paths, dim)) @ L.T
    sample_cov = np.cov(x, rowvar=False)
    mc_err = np.linalg.norm(sample_cov - C) / np.linalg.norm(C)

    cfg = twin_config()
    n = cfg.n_modes
    flux = sample(lambda x: 0.1 * cfg.kappa0 * np.cos(x), n)
    Fc, Qc = continuous_generator(cfg, None, flux)
    Cm = mode_covariance(lyapunov_stationary(Fc, Qc).c0, n)
    diag = np.real(np.diag(Cm))
    b = cfg.block_size
    varT, varth = quasistationary_variances(cfg)
    ks = np.arange(8, n + 1)
    dev_T = np.abs(diag[n + ks] / varT[ks - 1] - 1)
    dev_th = np.abs(diag[b + n + ks] / varth[ks - 1] - 1)
    qs_err = max(dev_T.max(), dev_th.max())

    ok = mc_err <= 0.05 and qs_err <= 0.10
    criterion(3, ok, f"Monte Carlo Frobenius rel {mc_err:.3f} (<= 0.05); "
                     f"k >= 8 quasistationary rel {qs_err:.1e} (<= 0.10)")
    assert ok


# 4 -------------------------------------------------------------------------


def test_criterion_4_weak_order(criterion):
    rng = np.random.default_rng(4)
    mu2, k, horizon, alpha = 1.0, 2, 1.0, 1e-5
    dts = [0.1, 0.05, 0.025]
    paths = 10_000
    n_fine = int(round(horizon / dts[-1]))
    q = noise_spectrum(alpha, 2.0, k)[k]
    # nested increments: coarse steps are sums of fine ones, E|dW|^2 = q dt
    dW = (rng.standard_normal((paths, n_fine)) + 1j * rng.standard_normal((paths, n_fine))) * np.sqrt(q * dts[-1] / 2)
    errors = []
    for level, dt in enumerate(dts):
        group = 2 ** (len(dts) - 1 - level)
        inc = dW.reshape(paths, n_fine // group, group).sum(axis=2)
        cfg = ModelConfig(n_modes=k, kappa0=1.0, mu1=0.0, mu2=mu2, alpha1=0.0, beta1=2.0,
                          alpha2=alpha, beta2=2.0, dt=dt, n_steps=inc.shape[1],
                          sensor_locations=[0.0], sensor_sigmas=0.0)
        ops = build_transition(cfg, SpectralField.constant(k, 1.0), SpectralField.zeros(k))
        decay, denom = ops.theta_decay[2 * k], ops.theta_denom[2 * k]
        theta = np.ones(paths, dtype=complex)
        for j in range(inc.shape[1]):
            theta = decay * theta + inc[:, j] / denom
        errors.append(abs(theta.mean().real - np.exp(-mu2 * k**2 * horizon)))
    slope = np.polyfit(np.log(dts), np.log(errors), 1)[0]
    ok = abs(slope - 2.0) <= 0.2
    criterion(4, ok, f"weak error {', '.join(f'{e:.2e}' for e in errors)}; slope {slope:.3f} (2.0 +- 0.2)")
    assert ok


# 5 -------------------------------------------------------------------------


def test_criterion_5_cross_term_decay(criterion):
    cfg = twin_config()
    n = cfg.n_modes
    kappa = TWIN_KAPPA.field(n)
    flux = sample(lambda x: 0.5 * np.cos(x), n)
    F, Q = continuous_generator(cfg, kappa, flux)
    C = mode_covariance(lyapunov_stationary(F, Q).c0, n)
    r8, r16 = cross_term_ratio(C, n, 8), cross_term_ratio(C, n, 16)
    ok = r16 <= 0.6 * r8
    criterion(5, ok, f"normalized cross term k=8 {r8:.4f}, k=16 {r16:.4f}, ratio {r16 / r8:.3f} (<= 0.6)")
    assert ok


# 6 -------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_6_twin_experiment(criterion, twin_run):
    report = twin_run["result"].report
    errs = report.kappa_errors()
    iters = len(errs) - 1
    final = errs[-1]
    first = errs[:4]
    monotone = all(b <= a for a, b in zip(first, first[1:]))
    runtime = twin_run["elapsed"]
    ok = final <= 0.15 and iters <= 10 and monotone and runtime < 300
    criterion(6, ok, f"kappa rel L2 error {' -> '.join(f'{e:.4f}' for e in errs)}; final {final:.4f} "
                     f"(<= 0.15) after {iters} iterations; monotone over first 3: {monotone}; {runtime:.1f} s")
    assert ok


# 7 -------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_7_noise_monotonicity(criterion, twin_run):
    truth = twin_run["truth"]
    kappa_true = truth.kappa_values()

    def final_error(cfg):
        data = twin_measurements(truth, cfg, seed=0)
        res = run_outer_iteration(cfg, data, TWIN_SOURCE, max_iters=10, tol=1e-4)
        return kappa_relative_error(res.means.kappa_values(), kappa_true)

    reference = kappa_relative_error(twin_run["result"].means.kappa_values(), kappa_true)
    sigma_errs = [final_error(twin_config(sigma=s)) for s in (1e-1, 1e-2)] + [reference]
    sensor_errs = [final_error(twin_config(n_sensors=m)) for m in (4, 8)] + [reference]
    ok_sigma = all(b <= a for a, b in zip(sigma_errs, sigma_errs[1:]))
    ok_m = all(b <= a for a, b in zip(sensor_errs, sensor_errs[1:]))
    ok = ok_sigma and ok_m
    criterion(7, ok, "sigma 1e-1/1e-2/1e-3: " + "/".join(f"{e:.4f}" for e in sigma_errs)
                     + "; m 4/8/16: " + "/".join(f"{e:.4f}" for e in sensor_errs))
    assert ok


# 8 -------------------------------------------------------------------------


def test_criterion_8_objective_stationarity(criterion):
    rng = np.random.default_rng(8)
    stages, ys, prior = random_problem(rng, dim=6, n_stages=30)
    traj = smooth(stages, ys, prior).means
    A, _ = dense_normal_matrix(stages, ys, prior)
    curvature = 2 * np.linalg.norm(A, 2)
    h = 1e-5
    grad = np.zeros(traj.size)
    flat = traj.ravel()
    for j in range(flat.size):
        e = np.zeros_like(flat)
        e[j] = h
        fp = least_squares_objective(stages, ys, (flat + e).reshape(traj.shape), prior)
        fm = least_squares_objective(stages, ys, (flat - e).reshape(traj.shape), prior)
        grad[j] = (fp - fm) / (2 * h)
    gnorm = np.linalg.norm(grad)
    ok = gnorm <= 1e-6 * curvature
    criterion(8, ok, f"|finite-difference gradient| {gnorm:.2e} <= 1e-6 x curvature {curvature:.2e}")
    assert ok


# 9 -------------------------------------------------------------------------


def mode_space_case():
    m, sigma = 8, 0.1
    cfg = twin_config(n_sensors=m, sigma=sigma)
    H, R = mode_space_measurement(cfg)
    rows = np.arange(m // 2 + 1)
    cols = np.arange(-cfg.n_modes, cfg.n_modes + 1)
    diff = rows[:, None] - cols[None, :]
    return m, sigma, H, R, diff


def test_criterion_9_mode_space_reduction(criterion):
    m, sigma, H, R, diff = mode_space_case()
    r_err = np.max(np.abs(R - m * sigma**2 * np.eye(m // 2 + 1)))
    aliased = diff % m == 0
    zero_err = np.max(np.abs(H[~aliased]))
    mag_err = np.max(np.abs(np.abs(H[aliased]) - m))
    # with x_l = pi (2l - m - 1) / m, sum_l exp(i q m x_l) = m (-1)^(q (m + 1))
    q = diff[aliased] // m
    sign_err = np.max(np.abs(H[aliased] - m * (-1.0) ** (q * (m + 1))))
    n_odd = int(np.sum(q % 2 != 0))
    ok = max(r_err, zero_err, mag_err, sign_err) <= 1e-12
    criterion(9, ok, f"R_mode = m sigma^2 I to {r_err:.1e}; H zero off k-k' = 0 mod m to {zero_err:.1e}; "
                     f"|H| = m on aliased entries to {mag_err:.1e}; {n_odd} entries at odd multiples of m "
                     f"equal -m (sign (-1)^q, exact to {sign_err:.1e})")
    assert ok


@pytest.mark.xfail(strict=True, reason="with the stated sensor layout, entries with k - k' an odd multiple "
                                       "of an even m are -m, not +m")
def test_criterion_9_literal_plus_m_everywhere():
    m, _, H, _, diff = mode_space_case()
    aliased = diff % m == 0
    assert np.max(np.abs(H[aliased] - m)) <= 1e-12


# 10 ------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_10_reality_and_positivity(criterion, twin_run):
    result = twin_run["result"]
    cfg = twin_run["config"]
    floor = KAPPA_FLOOR_FRACTION * cfg.kappa0
    n = cfg.n_modes
    b = cfg.block_size

    def imag_residue(coeffs):
        vals = np.fft.ifft(np.fft.ifftshift(coeffs, axes=-1), axis=-1) * coeffs.shape[-1]
        return np.max(np.abs(vals.imag))

    worst_imag, worst_kappa = 0.0, np.inf
    for means in result.history:
        for field in (means.t_bar, means.theta_bar, means.flux_bar):
            worst_imag = max(worst_imag, imag_residue(field))
        worst_kappa = min(worst_kappa, means.kappa_values().min())
    for record in result.report.records:
        worst_imag = max(worst_imag, record.max_imag_residue)
        worst_kappa = min(worst_kappa, record.min_kappa)
    from diffusivity_kalman.spectral import unstack

    u = result.smoothed.means
    fluct = np.array([[unstack(r[:b], n).coeffs, unstack(r[b:], n).coeffs] for r in u])
    worst_imag = max(worst_imag, imag_residue(fluct))
    ok = worst_imag <= 1e-10 and worst_kappa >= floor
    criterion(10, ok, f"max imaginary residue {worst_imag:.1e} (<= 1e-10); "
                      f"min kappa {worst_kappa:.4f} >= floor {floor:.0e} over {len(result.history)} iterates")
    assert ok


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v"]))
