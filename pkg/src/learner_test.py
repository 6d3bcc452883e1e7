from dataclasses import replace

import numpy as np
import pytest
from scipy import stats

from errors import (
    ConvergenceError,
    DimensionError,
    DomainError,
    InitializationError,
    InstabilityError,
    StallError,
)
from filtering import GainMatrix, fixed_gain_predict, steady_state_gain
from learner import (
    GradientWorkspace,
    InitStrategy,
    LandscapeConstants,
    RunRecord,
    Safeguard,
    SgdConfig,
    batch_grad,
    detect_plateau,
    dimension_free_nu,
    gd_run,
    initial_gain,
    innovation_grad,
    sample_requirements,
    sgd_run,
    stability_margin,
    stochastic_grad,
)
from linalg_core import spectral_radius
from objective import finite_difference_gradient, grad_J_T
from system_model import NoiseConfig, SystemModel, make_batch, mass_spring_model, simulate

PHI = (1.0 + np.sqrt(5.0)) / 2.0


def _scalar(a=0.5, q=1.0, r=1.0, p0=1.0):
    return SystemModel(A=[[a]], H=[[1.0]], Q=[[q]], R=[[r]], P0=[[p0]])


def _random_instance(rng, n=3, m=2, T=15):
    A = rng.standard_normal((n, n))
    A *= 0.9 / spectral_radius(A)
    H = rng.standard_normal((m, n))
    L = 0.1 * rng.standard_normal((n, m))
    outputs = rng.standard_normal((T + 1, m))
    return A, H, L, outputs


# ==========================================
# 📉 STOCHASTIC GRADIENT
# ==========================================

def test_single_step_gradient():
    H = np.array([[1.0, -1.0]])
    L = np.array([[0.2], [0.4]])
    outputs = np.array([[0.5], [1.5]])
    _, e = fixed_gain_predict(np.eye(2), H, L, outputs)
    expected = -2.0 * H.T @ np.outer(e, outputs[0])
    np.testing.assert_allclose(stochastic_grad(np.eye(2), H, L, outputs), expected, rtol=1e-12)


def test_zero_data_gives_zero_gradient():
    g = stochastic_grad(mass_spring_model().A, [[1.0, 0.0]], [[0.1], [0.0]], np.zeros((11, 1)))
    assert g.shape == (2, 1)
    assert not np.any(g)


def test_double_sum_matches_innovation_form():
    rng = np.random.default_rng(0)
    for T in (1, 2, 5, 15, 40):
        A, H, L, outputs = _random_instance(rng, T=T)
        np.testing.assert_allclose(
            stochastic_grad(A, H, L, outputs), innovation_grad(A, H, L, outputs),
            rtol=1e-8, atol=1e-10,
        )


def test_stochastic_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    A, H, L, outputs = _random_instance(rng, T=8)

    def eps(M):
        _, err = fixed_gain_predict(A, H, M, outputs)
        return float(err @ err)

    fd = finite_difference_gradient(eps, L, step=1e-4)
    np.testing.assert_allclose(stochastic_grad(A, H, L, outputs), fd, rtol=1e-6, atol=1e-8)


def test_workspace_horizon_mismatch():
    A, H = np.eye(1) * 0.5, np.eye(1)
    ws = GradientWorkspace.build(GainMatrix.build(A, H, [[0.1]]), H, 5)
    with pytest.raises(DimensionError):
        stochastic_grad(A, H, [[0.1]], np.zeros((4, 1)), workspace=ws)
    with pytest.raises(DomainError):
        stochastic_grad(A, H, [[0.1]], np.zeros((1, 1)))


# ==========================================
# 📦 BATCH GRADIENT
# ==========================================

def test_batch_properties():
    model = mass_spring_model()
    noise = NoiseConfig.for_model(model)
    L = initial_gain(model.A, model.H)
    batch = make_batch(model, noise, T=12, M=9, seed=3)

    single = stochastic_grad(model.A, model.H, L, batch[0])
    np.testing.assert_array_equal(batch_grad(model.A, model.H, L, batch[:1]), single)
    copies = batch_grad(model.A, model.H, L, [batch[0]] * 6)
    np.testing.assert_allclose(copies, single, rtol=1e-14, atol=1e-16)

    serial = batch_grad(model.A, model.H, L, batch)
    threaded = batch_grad(model.A, model.H, L, batch, workers=4)
    np.testing.assert_array_equal(serial, threaded)
    mean = np.mean([stochastic_grad(model.A, model.H, L, t) for t in batch], axis=0)
    np.testing.assert_allclose(serial, mean, rtol=1e-12, atol=1e-15)


def test_batch_rejects_empty_and_mixed():
    model = mass_spring_model()
    noise = NoiseConfig.for_model(model)
    L = initial_gain(model.A, model.H)
    with pytest.raises(DomainError):
        batch_grad(model.A, model.H, L, [])
    mixed = [simulate(model, noise, 5, 0), simulate(model, noise, 6, 1)]
    with pytest.raises(DimensionError):
        batch_grad(model.A, model.H, L, mixed)


def test_stochastic_gradient_is_unbiased_for_truncated_objective():
    model = _scalar()
    noise = NoiseConfig.for_model(model)
    L, T, N = [[0.25]], 6, 20000
    gain = GainMatrix.build(model.A, model.H, L)
    ws = GradientWorkspace.build(gain, model.H, T)
    grads = np.array([stochastic_grad(model.A, model.H, gain, traj, workspace=ws)
                      for traj in make_batch(model, noise, T, N, seed=21)])
    mean = grads.mean(axis=0)
    stderr = grads.std(axis=0, ddof=1) / np.sqrt(N)
    exact = grad_J_T(model, L, T)
    assert np.all(np.abs(mean - exact) <= 4.0 * stderr)


@pytest.mark.slow
def test_stochastic_gradient_unbiased_full_sample():
    model = mass_spring_model(initial_variance=0.05)
    noise = NoiseConfig.for_model(model)
    gain = initial_gain(model.A, model.H, surrogate_r=25.0)
    T, N = 20, 100000
    ws = GradientWorkspace.build(gain, model.H, T)
    grads = np.array([stochastic_grad(model.A, model.H, gain, traj, workspace=ws)
                      for traj in make_batch(model, noise, T, N, seed=22)])
    stderr = grads.std(axis=0, ddof=1) / np.sqrt(N)
    assert np.all(np.abs(grads.mean(axis=0) - grad_J_T(model, gain, T)) <= 3.0 * stderr)


def test_batch_gradient_variance_scales_inverse_in_batch_size():
    model = _scalar()
    noise = NoiseConfig.for_model(model)
    gain = GainMatrix.build(model.A, model.H, [[0.25]])
    spread = {}
    for M in (4, 64):
        draws = [batch_grad(model.A, model.H, gain, make_batch(model, noise, 5, M, seed=1000 * M + r))
                 for r in range(400)]
        spread[M] = float(np.var(np.asarray(draws)[:, 0, 0], ddof=1))
    assert 8.0 <= spread[4] / spread[64] <= 32.0


# ==========================================
# 🛡️ STABILITY MARGIN
# ==========================================

def test_stability_margin_scalar():
    margin = stability_margin([[1.0]], [[1.0]], [[0.5]])
    assert margin == pytest.approx(0.375, rel=1e-10)
    for delta in (margin, -margin):
        assert GainMatrix.build([[1.0]], [[1.0]], [[0.5 + delta]]).is_stabilizing


def test_stability_margin_nilpotent_loop():
    H = np.array([[2.0, 0.0], [0.0, 1.0]])
    assert stability_margin(np.zeros((2, 2)), H, np.zeros((2, 2))) == pytest.approx(0.25)


def test_stability_margin_random_perturbations():
    rng = np.random.default_rng(4)
    for _ in range(50):
        S = rng.standard_normal((3, 3))
        S = (S + S.T) / 2.0
        A = S * (rng.uniform(0.3, 0.85) / spectral_radius(S))
        L = 0.02 * np.diag(rng.standard_normal(3))
        margin = stability_margin(A, np.eye(3), L)
        delta = rng.standard_normal((3, 3))
        delta *= 0.999 * margin / np.linalg.norm(delta)
        assert GainMatrix.build(A, np.eye(3), L + delta).is_stabilizing


def test_stability_margin_rejects_unstable():
    with pytest.raises(InstabilityError):
        stability_margin([[1.0]], [[1.0]], [[-0.5]])


# ==========================================
# 🏃 SGD
# ==========================================

def test_sgd_zero_noise_is_fixed_point():
    model = SystemModel(A=[[0.5]], H=[[1.0]], Q=[[0.0]], R=[[0.0]], P0=[[0.0]])
    cfg = SgdConfig(step_size=0.5, batch_size=4, horizon=6, max_iters=10)
    record = sgd_run(model, NoiseConfig.for_model(model), [[0.2]], cfg)
    assert len(record) == 11
    assert all(g.L[0, 0] == 0.2 for g in record.iterates)
    assert record.j_star is None
    assert not record.safeguard_events


def test_sgd_converges_on_scalar_system():
    model = _scalar()
    cfg = SgdConfig(step_size=0.1, batch_size=50, horizon=20, max_iters=200, seed=1)
    record = sgd_run(model, NoiseConfig.for_model(model), [[0.0]], cfg, oracle=model,
                     record_timing=False)
    gaps = record.normalized_gaps
    assert gaps[0] == pytest.approx(1.0)
    assert np.mean(gaps[-50:]) < 0.2
    assert all(rho < cfg.target_rho for rho in record.rhos)
    assert not any(record.wall_times)


def test_sgd_is_reproducible_across_workers():
    model = mass_spring_model()
    noise = NoiseConfig.for_model(model)
    L0 = initial_gain(model.A, model.H)
    base = SgdConfig(step_size=0.2, batch_size=6, horizon=15, max_iters=8, seed=7)
    a = sgd_run(model, noise, L0, base, record_timing=False)
    b = sgd_run(model, noise, L0, replace(base, workers=3),
                record_timing=False)
    for ga, gb in zip(a.iterates, b.iterates):
        np.testing.assert_array_equal(ga.L, gb.L)


def test_sgd_safeguard_keeps_iterates_stable():
    model = _scalar()
    cfg = SgdConfig(step_size=10.0, batch_size=50, horizon=10, max_iters=20, seed=2)
    record = sgd_run(model, NoiseConfig.for_model(model), [[0.0]], cfg, oracle=model)
    assert record.safeguard_events
    assert record.safeguard_events[0] == (0, Safeguard.REJECT_AND_SHRINK.value)
    assert all(rho < cfg.target_rho for rho in record.rhos)
    assert record.step_sizes[0] < cfg.step_size


def test_sgd_stalls_on_absurd_step():
    model = _scalar()
    cfg = SgdConfig(step_size=1e12, batch_size=20, horizon=10, max_iters=5, max_rejections=5)
    with pytest.raises(StallError) as info:
        sgd_run(model, NoiseConfig.for_model(model), [[0.0]], cfg)
    assert isinstance(info.value.record, RunRecord)
    assert len(info.value.record.safeguard_events) == 6


def test_sgd_assert_only_raises():
    model = _scalar()
    cfg = SgdConfig(step_size=1e3, batch_size=20, horizon=10, max_iters=5,
                    safeguard="assert_only")
    with pytest.raises(InstabilityError):
        sgd_run(model, NoiseConfig.for_model(model), [[0.0]], cfg)


def test_sgd_rejects_bad_start():
    model = _scalar()
    noise = NoiseConfig.for_model(model)
    with pytest.raises(DomainError):
        sgd_run(model, noise, [[2.0]], SgdConfig(max_iters=1))
    # rho(A_L) = 0.996 is stable but above the safeguard threshold
    with pytest.raises(DomainError):
        sgd_run(model, noise, [[-0.496]], SgdConfig(max_iters=1))


def test_sgd_config_validation():
    with pytest.raises(DomainError):
        SgdConfig(step_size=0.0)
    with pytest.raises(DomainError):
        SgdConfig(batch_size=0)
    with pytest.raises(DomainError):
        SgdConfig(target_rho=1.0)
    with pytest.raises(ValueError):
        SgdConfig(safeguard="clip")


@pytest.mark.slow
def test_sgd_mass_spring_reaches_small_gap_and_horizon_orders_plateaus():
    model = mass_spring_model()
    noise = NoiseConfig.for_model(model)
    L0 = initial_gain(model.A, model.H, surrogate_r=25.0)
    curves = {}
    for T in (10, 50):
        runs = []
        for seed in range(20):
            cfg = SgdConfig(step_size=0.2, batch_size=100, horizon=T, max_iters=500, seed=seed)
            record = sgd_run(model, noise, L0, cfg, oracle=model, record_timing=False)
            assert max(record.rhos) < 1.0
            runs.append(record.normalized_gaps)
        curves[T] = np.mean(runs, axis=0)
    assert curves[50].min() < 0.05
    assert np.mean(curves[10][-100:]) > np.mean(curves[50][-100:])


# ==========================================
# 📉 GD
# ==========================================

def test_gd_golden_ratio():
    model = SystemModel(A=[[1.0]], H=[[1.0]], Q=[[1.0]], R=[[1.0]], P0=[[1.0]])
    record = gd_run(model, [[0.9]], tol=1e-11)
    assert record.final.L[0, 0] == pytest.approx(PHI - 1.0, abs=1e-9)
    assert record.method == "gd"
    costs = np.asarray(record.costs)
    assert np.all(np.diff(costs) <= 1e-12)


def test_gd_starting_at_optimum_stops_immediately():
    model = _scalar()
    gain, _ = steady_state_gain(model)
    record = gd_run(model, gain, tol=1e-8)
    assert len(record) == 1
    assert record.normalized_gaps[0] == 0.0


@pytest.mark.slow
def test_gd_mass_spring_reaches_kalman_gain():
    model = mass_spring_model()
    L0 = initial_gain(model.A, model.H)
    record = gd_run(model, L0, tol=1e-10, max_iters=50000, record_timing=False)
    gain, _ = steady_state_gain(model)
    assert np.linalg.norm(record.final.L - gain.L) <= 1e-6 * (1.0 + np.linalg.norm(gain.L))
    assert np.all(np.diff(record.costs) <= 1e-12)


def test_gd_rejects_unstable_start():
    with pytest.raises(DomainError):
        gd_run(_scalar(), [[2.0]])


def test_gd_stops_on_roundoff_floor():
    model = SystemModel(A=[[1.0]], H=[[1.0]], Q=[[1.0]], R=[[1.0]], P0=[[1.0]])
    record = gd_run(model, [[0.9]], tol=0.0, max_iters=5000, record_timing=False)
    assert record.stop_reason in ("stagnation", "tol")
    assert len(record) < 5000
    assert record.final.L[0, 0] == pytest.approx(PHI - 1.0, abs=1e-8)


def test_gd_out_of_iterations_keeps_record():
    model = mass_spring_model()
    with pytest.raises(ConvergenceError) as info:
        gd_run(model, initial_gain(model.A, model.H, surrogate_r=25.0), tol=1e-12, max_iters=3)
    record = info.value.record
    assert isinstance(record, RunRecord)
    assert len(record) == 4
    assert record.stop_reason == "max_iters"


@pytest.mark.slow
def test_gd_random_systems_converge_linearly():
    rng = np.random.default_rng(0)
    for _ in range(10):
        n, m = int(rng.integers(1, 5)), int(rng.integers(1, 3))
        A = rng.standard_normal((n, n))
        A *= 0.9 / spectral_radius(A)
        H = rng.standard_normal((m, n))
        B, C = rng.standard_normal((n, n)), rng.standard_normal((m, m))
        model = SystemModel(A=A, H=H, Q=B @ B.T + 0.1 * np.eye(n), R=C @ C.T + 0.1 * np.eye(m),
                            P0=np.eye(n))
        L0 = initial_gain(A, H, surrogate_r=25.0)
        record = gd_run(model, L0, tol=1e-10, max_iters=20000, record_timing=False)
        gain, _ = steady_state_gain(model)
        assert np.linalg.norm(record.final.L - gain.L) <= 1e-6 * (1.0 + np.linalg.norm(gain.L))
        gaps = np.asarray(record.normalized_gaps)
        iters = np.flatnonzero(gaps > 1e-9)
        if len(iters) >= 3:
            assert stats.linregress(iters, np.log(gaps[iters])).slope < 0.0


# ==========================================
# 📒 RUN RECORD
# ==========================================

def test_run_record_refuses_unstable_iterate():
    record = RunRecord()
    with pytest.raises(InstabilityError):
        record.append(GainMatrix.build([[1.0]], [[1.0]], [[-1.0]]), 1.0, 0.0, 0.1, 0, 0.0)


def test_run_record_gaps_need_oracle():
    record = RunRecord()
    record.append(GainMatrix.build([[0.5]], [[1.0]], [[0.0]]), 1.0, 0.0, 0.1, 0, 0.0)
    with pytest.raises(DomainError):
        record.gaps


def test_detect_plateau():
    values = np.concatenate([0.5 ** np.arange(30), np.full(60, 1e-9)])
    start = detect_plateau(values, window=10)
    assert start == 40
    assert detect_plateau(0.5 ** np.arange(100), window=10) is None


# ==========================================
# 📏 SAMPLE SIZES
# ==========================================

def test_sample_requirements_boundary_and_delta():
    consts = LandscapeConstants(C=3.0, rho=0.6, D=0.5)
    H = np.array([[1.0, 0.0]])
    kappas = (1.0, 0.5)
    base = sample_requirements(consts, H, kappas, s=0.5, s0=1.0, tau=0.5, delta=0.1, n=2, m=1)
    at_edge = sample_requirements(consts, H, kappas, s=0.5, s0=base.gamma_bar, tau=0.5,
                                  delta=0.1, n=2, m=1)
    assert at_edge.T_raw == 0.0
    assert at_edge.T_min == 0

    halved = sample_requirements(consts, H, kappas, s=0.5, s0=1.0, tau=0.5, delta=0.05, n=2, m=1)
    assert halved.M_raw / base.M_raw == pytest.approx(np.log(80.0) / np.log(40.0), rel=1e-12)
    assert base.M_min == int(np.ceil(base.M_raw))
    assert base.M_refined is None

    refined = sample_requirements(consts, H, kappas, s=0.5, s0=1.0, tau=0.5, delta=0.1,
                                  n=2, m=1, refined=True)
    assert refined.M_refined >= 1
    with pytest.raises(DomainError):
        sample_requirements(consts, H, kappas, s=0.5, s0=1.0, tau=1.0, delta=0.1, n=2, m=1)


def test_refined_batch_size_uses_dimension_free_variance():
    consts = LandscapeConstants(C=2.0, rho=0.25, D=0.0)
    # kappa = 1: [2 * 4 + (2 + 2 * 8 * 0.125) * 1] / 0.5^3 = 96, q = 96 / (0.5 / 0.5)
    needs = sample_requirements(consts, [[1.0]], (1.0, 1.0), s=0.5, s0=1.0, tau=0.5,
                                delta=0.05, n=1, m=1, refined=True)
    assert needs.nu_refined == pytest.approx(96.0, rel=1e-12)
    assert needs.M_refined_raw == pytest.approx(18560.0 * np.log(40.0), rel=1e-12)
    assert needs.M_refined == int(np.ceil(needs.M_refined_raw))
    assert dimension_free_nu(2.0, 0.25, 1.0, 1.0, [[1.0]]) == pytest.approx(96.0, rel=1e-12)


def test_landscape_constants_from_gains():
    model = mass_spring_model()
    gains = [initial_gain(model.A, model.H), steady_state_gain(model)[0]]
    consts = LandscapeConstants.from_gains(model.A, model.H, gains, grid_points=128)
    assert 0.0 < consts.rho < 1.0
    assert consts.C >= 1.0
    assert consts.D == pytest.approx(max(np.linalg.norm(g.L, 2) for g in gains))


# ==========================================
# 🚦 INITIAL GAIN
# ==========================================

def test_initial_gain_strategies():
    zero = initial_gain([[0.5]], [[1.0]], InitStrategy.ZERO_IF_STABLE)
    assert zero.L[0, 0] == 0.0

    model = mass_spring_model()
    assert spectral_radius(model.A) == pytest.approx(1.0)
    surrogate = initial_gain(model.A, model.H, "surrogate_dare")
    assert surrogate.rho < 1.0

    user = initial_gain([[0.5]], [[1.0]], "user", user_gain=[[0.3]])
    assert user.L[0, 0] == 0.3


def test_initial_gain_errors():
    with pytest.raises(InitializationError):
        initial_gain([[0.5]], [[1.0]], "user", user_gain=[[2.0]])
    with pytest.raises(InitializationError):
        initial_gain([[0.5]], [[1.0]], "user")
    with pytest.raises(InitializationError):
        initial_gain([[1.01]], [[1.0]], "zero_if_stable")
