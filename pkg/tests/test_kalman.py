import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffusivity_kalman.kalman import (
    GaussianBelief,
    LinearStageModel,
    NotPositiveDefiniteError,
    filter_pass,
    kalman_gain,
    least_squares_objective,
    objective_gradient,
    predict,
    rts_smooth,
    smooth,
    solve_block_tridiagonal,
    update,
)
from diffusivity_kalman.spectral import (
    ModelConfig,
    SpectralField,
    assemble_stage,
    build_transition,
    collocation_points,
    to_spectral,
    uniform_sensors,
)
from oracles import dense_filter, dense_posterior, random_hermitian, random_problem, random_spd


def scalar_stage(F=1.0, QB=0.0, H=1.0, R=1.0, s=0.0):
    return LinearStageModel(
        F=np.array([[F]]), B=np.array([[1.0]]), Q=np.array([[QB]]),
        H=np.array([[H]]), R=np.array([[R]]), s=np.array([s]),
    )


def belief(m, P):
    return GaussianBelief(np.atleast_1d(np.asarray(m, float)), np.atleast_2d(np.asarray(P, float)))


# -- predict / update -------------------------------------------------------


def test_identity_predict_is_noop(rng):
    P = random_spd(rng, 4)
    b = GaussianBelief(rng.standard_normal(4), P)
    st_ = LinearStageModel(np.eye(4), np.eye(4), np.zeros((4, 4)), np.zeros((1, 4)), np.eye(1), np.zeros(4))
    out = predict(b, st_)
    assert np.array_equal(out.mean, b.mean)
    np.testing.assert_allclose(out.cov, P, atol=1e-15)
    assert out.kind == "predicted" and out.time_index == 1


def test_scalar_predict_covariance():
    out = predict(belief(0.0, 1.0), scalar_stage(F=0.5, QB=0.1))
    assert out.cov[0, 0] == pytest.approx(0.35, abs=1e-15)


def test_offset_shifts_mean():
    st_ = LinearStageModel(np.eye(2), np.eye(2), np.zeros((2, 2)), np.zeros((1, 2)), np.eye(1), np.array([1.0, 0.0]))
    out = predict(GaussianBelief(np.array([2.0, 3.0]), np.eye(2)), st_)
    np.testing.assert_array_equal(out.mean, [3.0, 3.0])
    np.testing.assert_array_equal(out.cov, np.eye(2))


def test_scalar_update():
    K, P = kalman_gain(np.eye(1), np.eye(1), np.eye(1))
    assert K[0, 0] == pytest.approx(0.5) and P[0, 0] == pytest.approx(0.5)
    out = update(belief(2.0, 1.0), scalar_stage(), np.array([2.0]))
    assert out.mean[0] == 2.0 and out.cov[0, 0] == pytest.approx(0.5, abs=1e-15)


def test_uninformative_measurement(rng):
    P = random_spd(rng, 3)
    b = GaussianBelief(rng.standard_normal(3), P)
    st_ = LinearStageModel(np.eye(3), np.eye(3), np.eye(3), rng.standard_normal((2, 3)), 1e12 * np.eye(2), np.zeros(3))
    out = update(b, st_, np.array([5.0, -5.0]))
    np.testing.assert_allclose(out.mean, b.mean, rtol=1e-6, atol=1e-6 * np.abs(b.mean).max())
    np.testing.assert_allclose(out.cov, P, rtol=1e-6, atol=1e-6 * np.abs(P).max())


def test_unobservable_measurement(rng):
    P = random_spd(rng, 3)
    b = GaussianBelief(rng.standard_normal(3), P)
    st_ = LinearStageModel(np.eye(3), np.eye(3), np.eye(3), np.zeros((2, 3)), np.eye(2), np.zeros(3))
    out = update(b, st_, np.array([1.0, 2.0]))
    assert np.array_equal(out.mean, b.mean)
    np.testing.assert_allclose(out.cov, P, atol=0)


def test_update_rejects_bad_shape():
    with pytest.raises(ValueError):
        update(belief(0.0, 1.0), scalar_stage(), np.array([1.0, 2.0]))


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), n=st.integers(1, 8), m=st.integers(1, 5))
def test_gain_forms_agree(seed, n, m):
    rng = np.random.default_rng(seed)
    P = random_spd(rng, n)
    H = rng.standard_normal((m, n))
    R = random_spd(rng, m)
    K1, P1 = kalman_gain(P, H, R, "innovation")
    K2, P2 = kalman_gain(P, H, R, "information")
    np.testing.assert_allclose(K1, K2, atol=1e-10 * max(1, np.abs(K1).max()))
    np.testing.assert_allclose(P1, P2, atol=1e-10 * max(1, np.abs(P1).max()))


def test_unknown_gain_form():
    with pytest.raises(ValueError):
        kalman_gain(np.eye(1), np.eye(1), np.eye(1), "square-root")


# -- filter pass ------------------------------------------------------------


def test_zero_stages_returns_prior(rng):
    prior = GaussianBelief(rng.standard_normal(3), np.eye(3))
    res = filter_pass([], [], prior)
    assert len(res.filtered) == 1 and not res.predicted
    assert np.array_equal(res.filtered[0].mean, prior.mean)


def test_skipped_measurements_leave_prediction(rng):
    stages, _, prior = random_problem(rng, n_stages=8)
    res = filter_pass(stages, [None] * 8, prior)
    for pred, filt in zip(res.predicted, res.filtered[1:]):
        assert np.array_equal(pred.mean, filt.mean) and np.array_equal(pred.cov, filt.cov)


def test_mismatched_lengths(rng):
    stages, ys, prior = random_problem(rng, n_stages=3)
    with pytest.raises(ValueError):
        filter_pass(stages, ys[:2], prior)


def spectral_toy(rng, n=2, steps=12):
    cfg = ModelConfig(
        n_modes=n, kappa0=1.0, mu1=1e-3, mu2=0.5, alpha1=1e-2, beta1=1.0, alpha2=1e-2, beta2=1.0,
        dt=0.05, n_steps=steps, sensor_locations=uniform_sensors(3), sensor_sigmas=0.05,
    )
    x = collocation_points(n)
    stages = []
    for i in range(steps):
        kappa = to_spectral(1 + 0.3 * np.sin(x + 0.1 * i))
        flux = SpectralField(random_hermitian(rng, n, 0.3))
        stages.append(assemble_stage(build_transition(cfg, kappa, flux), cfg, SpectralField(random_hermitian(rng, n))))
    ys = [rng.standard_normal(3) if i % 3 else None for i in range(steps)]
    prior = GaussianBelief(rng.standard_normal(cfg.state_dim), np.eye(cfg.state_dim))
    return stages, ys, prior


def test_filter_matches_dense_reference(rng):
    stages, ys, prior = spectral_toy(rng)
    res = filter_pass(stages, ys, prior)
    means, covs, _ = dense_filter(stages, ys, prior)
    for b, m, P in zip(res.filtered, means, covs):
        np.testing.assert_allclose(b.mean, m, atol=1e-10 * max(1, np.abs(m).max()))
        np.testing.assert_allclose(b.cov, P, atol=1e-10 * max(1, np.abs(P).max()))


def test_beliefs_are_valid_covariances(rng):
    stages, ys, prior = random_problem(rng, dim=5, n_stages=20)
    sm = smooth(stages, ys, prior)
    for b in sm.beliefs + sm.filtered:
        assert np.array_equal(b.cov, b.cov.T)
        assert np.linalg.eigvalsh(b.cov)[0] >= -1e-10 * np.trace(b.cov)


# -- smoother ---------------------------------------------------------------


def test_single_stage_last_state_is_filtered(rng):
    stages, ys, prior = random_problem(rng, n_stages=1, skip_prob=0.0)
    res = filter_pass(stages, ys, prior)
    sm = rts_smooth(res)
    assert np.array_equal(sm.beliefs[-1].mean, res.filtered[-1].mean)
    assert len(sm.beliefs) == 2


def test_no_measurements_follow_forward_model(rng):
    stages, _, prior = random_problem(rng, n_stages=10)
    sm = smooth(stages, [None] * 10, prior)
    m = prior.mean
    for st_, b in zip(stages, sm.beliefs[1:]):
        m = st_.F @ m + st_.s
        np.testing.assert_allclose(b.mean, m, atol=1e-10)


def test_rts_matches_block_solver_and_dense_oracle(rng):
    stages, ys, prior = random_problem(rng, dim=6, n_stages=30)
    sm = smooth(stages, ys, prior)
    x, cov = solve_block_tridiagonal(stages, ys, prior)
    xd, covd = dense_posterior(stages, ys, prior)
    scale = np.abs(xd).max()
    np.testing.assert_allclose(sm.means, x, atol=1e-8 * scale)
    np.testing.assert_allclose(x, xd, atol=1e-8 * scale)
    diag = np.array([np.diag(c) for c in sm.covs])
    np.testing.assert_allclose(diag, np.array([np.diag(c) for c in cov]), rtol=1e-8)
    np.testing.assert_allclose(diag, np.array([np.diag(c) for c in covd]), rtol=1e-8)


def test_singular_prediction_names_step(rng):
    stages, ys, prior = random_problem(rng, dim=3, n_stages=4)
    bad = LinearStageModel(np.zeros((3, 3)), np.zeros((3, 3)), np.eye(3), stages[2].H, stages[2].R, np.zeros(3))
    stages[2] = bad
    res = filter_pass(stages, [None] * 4, prior)
    with pytest.raises(NotPositiveDefiniteError, match="step 3"):
        rts_smooth(res)


def test_single_block_least_squares_is_update(rng):
    dim = 4
    st_ = LinearStageModel(
        np.zeros((dim, dim)), np.eye(dim), np.diag(rng.uniform(0.5, 1, dim)),
        rng.standard_normal((2, dim)), np.diag([0.3, 0.4]), rng.standard_normal(dim),
    )
    y = rng.standard_normal(2)
    prior = GaussianBelief(rng.standard_normal(dim), np.eye(dim))
    x, cov = solve_block_tridiagonal([st_], [y], prior)
    post = update(GaussianBelief(st_.s, st_.QB, "predicted", 1), st_, y)
    np.testing.assert_allclose(x[1], post.mean, atol=1e-10)
    np.testing.assert_allclose(cov[1], post.cov, atol=1e-10)
    np.testing.assert_allclose(x[0], prior.mean, atol=1e-12)


def test_indefinite_system_rejected(rng):
    stages, ys, prior = random_problem(rng, dim=3, n_stages=2)
    s0 = stages[0]
    stages[0] = LinearStageModel(s0.F, s0.B, -s0.Q, s0.H, s0.R, s0.s)
    with pytest.raises(NotPositiveDefiniteError):
        solve_block_tridiagonal(stages, ys, prior)


def test_constant_offset_response(rng):
    """Adding c to one sensor shifts the smoothed means by the model's linear response."""
    stages, ys, prior = random_problem(rng, dim=4, n_stages=15, skip_prob=0.0)
    j, c = 1, 0.7
    shifted = [y + c * np.eye(len(y))[j] for y in ys]
    base = smooth(stages, ys, prior).means
    moved = smooth(stages, shifted, prior).means
    zero_stages = [LinearStageModel(s.F, s.B, s.Q, s.H, s.R, np.zeros_like(s.s)) for s in stages]
    zero_prior = GaussianBelief(np.zeros_like(prior.mean), prior.cov)
    response, _ = dense_posterior(zero_stages, [c * np.eye(len(y))[j] for y in ys], zero_prior)
    np.testing.assert_allclose(moved - base, response, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), dim=st.integers(1, 6), n_obs=st.integers(1, 4))
def test_contraction_properties(seed, dim, n_obs):
    rng = np.random.default_rng(seed)
    stages, ys, prior = random_problem(rng, dim=dim, n_stages=10, n_obs=n_obs)
    res = filter_pass(stages, ys, prior)
    sm = rts_smooth(res)
    for pred, filt in zip(res.predicted, res.filtered[1:]):
        assert np.linalg.eigvalsh(pred.cov - filt.cov)[0] >= -1e-10
    for s, f in zip(sm.beliefs, sm.filtered):
        assert np.trace(s.cov) <= np.trace(f.cov) + 1e-10


# -- objective --------------------------------------------------------------


def test_smoothed_means_minimize_objective(rng):
    stages, ys, prior = random_problem(rng, dim=4, n_stages=20)
    traj = smooth(stages, ys, prior).means
    best = least_squares_objective(stages, ys, traj, prior)
    for _ in range(100):
        pert = traj + 1e-3 * rng.standard_normal(traj.shape)
        assert best <= least_squares_objective(stages, ys, pert, prior)


def test_objective_prior_term_only(rng):
    stages, _, prior = random_problem(rng, dim=3, n_stages=5)
    traj = [prior.mean + 1.0]
    for st_ in stages:
        traj.append(st_.F @ traj[-1] + st_.s)
    ys = [st_.H @ u for st_, u in zip(stages, traj[1:])]
    d = np.ones(3)
    expected = d @ np.linalg.solve(prior.cov, d)
    assert least_squares_objective(stages, ys, np.array(traj), prior) == pytest.approx(expected, rel=1e-10)


def test_gradient_matches_finite_differences(rng):
    stages, ys, prior = random_problem(rng, dim=3, n_stages=6)
    traj = rng.standard_normal((7, 3))
    g = objective_gradient(stages, ys, traj, prior)
    h = 1e-6
    for idx in [(0, 0), (3, 1), (6, 2)]:
        e = np.zeros_like(traj)
        e[idx] = h
        fd = (least_squares_objective(stages, ys, traj + e, prior) - least_squares_objective(stages, ys, traj - e, prior)) / (2 * h)
        assert fd == pytest.approx(g[idx], rel=1e-6, abs=1e-6)


def test_objective_checks_length(rng):
    stages, ys, prior = random_problem(rng, dim=3, n_stages=4)
    with pytest.raises(ValueError):
        least_squares_objective(stages, ys, np.zeros((4, 3)))
