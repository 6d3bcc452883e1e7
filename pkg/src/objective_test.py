import numpy as np
import pytest

from errors import DiagnosticFailure, DomainError, InstabilityError
from filtering import steady_state_gain
from linalg_core import spectral_radius
from objective import (
    adjoint_lqr_cost,
    cost_J,
    cost_report,
    duality_check,
    finite_difference_gradient,
    grad_J,
    grad_J_T,
    truncated_cost_J_T,
)
from system_model import NoiseConfig, SystemModel, mass_spring_model


def _scalar(a=0.5, q=1.0, r=1.0, p0=1.0):
    return SystemModel(A=[[a]], H=[[1.0]], Q=[[q]], R=[[r]], P0=[[p0]])


def _random_system(rng, n=3, m=2, rho=0.8):
    A = rng.standard_normal((n, n))
    A *= rho / spectral_radius(A)
    H = rng.standard_normal((m, n))
    B = rng.standard_normal((n, n))
    C = rng.standard_normal((m, m))
    model = SystemModel(A=A, H=H, Q=B @ B.T / n, R=C @ C.T / m + 0.1 * np.eye(m), P0=np.eye(n))
    L = 0.02 * rng.standard_normal((n, m))
    return model, L


# ==========================================
# 🎯 STEADY-STATE COST
# ==========================================

def test_cost_scalar_closed_form():
    model = _scalar()
    assert cost_J(model, [[0.0]]) == pytest.approx(4.0 / 3.0, rel=1e-12)
    assert cost_J(model, [[0.1]]) == pytest.approx(1.01 / 0.84, rel=1e-12)


def test_gradient_scalar_closed_form():
    # 2 Y (L r - A_L X), Y = 1/0.84, X = 1.01/0.84, A_L = 0.4
    g = grad_J(_scalar(), [[0.1]])
    assert g[0, 0] == pytest.approx(-0.9070294785, abs=1e-9)
    fd = finite_difference_gradient(lambda L: cost_J(_scalar(), L), [[0.1]], step=1e-4)
    assert fd[0, 0] == pytest.approx(g[0, 0], rel=1e-8)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(42)
    for _ in range(5):
        model, L = _random_system(rng)
        g = grad_J(model, L)
        fd = finite_difference_gradient(lambda M: cost_J(model, M), L, step=1e-4)
        np.testing.assert_allclose(fd, g, rtol=1e-6, atol=1e-7 * (1.0 + np.abs(g).max()))


@pytest.mark.slow
def test_grad_J_matches_finite_differences_sizes():
    rng = np.random.default_rng(50)
    checked = 0
    while checked < 50:
        n, m = int(rng.integers(1, 6)), int(rng.integers(1, 4))
        model, L = _random_system(rng, n=n, m=m)
        if spectral_radius(model.A - L @ model.H) >= 0.95:
            continue
        g = grad_J(model, L)
        fd = finite_difference_gradient(lambda M: cost_J(model, M), L, step=1e-4)
        np.testing.assert_allclose(fd, g, rtol=1e-6, atol=1e-7 * (1.0 + np.abs(g).max()))
        checked += 1


def test_gradient_vanishes_at_kalman_gain():
    model = mass_spring_model()
    gain, P = steady_state_gain(model)
    report = cost_report(model, gain)
    assert np.linalg.norm(report.grad) < 1e-8
    # J(L*) is the steady-state prediction error covariance seen through H
    assert report.J == pytest.approx(float(np.trace(model.H @ P @ model.H.T)), rel=1e-9)


def test_cost_rejects_unstable_gain():
    with pytest.raises(InstabilityError):
        cost_J(_scalar(), [[2.0]])


# ==========================================
# ✂️ FINITE HORIZON
# ==========================================

def test_truncated_cost_single_step():
    model = _scalar(p0=0.0)
    L = [[0.3]]
    assert truncated_cost_J_T(model, L, 1) == pytest.approx(1.0 + 0.09)
    assert truncated_cost_J_T(model, L, 1, include_trR=True) == pytest.approx(2.09)
    with pytest.raises(DomainError):
        truncated_cost_J_T(model, L, 0)


def test_truncated_cost_approaches_steady_state():
    for model, L in ((_scalar(p0=0.0), [[0.1]]),
                     (mass_spring_model(initial_variance=0.0), steady_state_gain(mass_spring_model())[0])):
        J = cost_J(model, L)
        gaps = [abs(truncated_cost_J_T(model, L, T) - J) for T in (10, 20, 40)]
        assert gaps[0] > gaps[1] > gaps[2]


def test_truncated_cost_needs_no_stability():
    assert np.isfinite(truncated_cost_J_T(_scalar(), [[2.0]], 5))


def test_truncated_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    model, L = _random_system(rng, n=2, m=2)
    for T in (1, 3, 12):
        g = grad_J_T(model, L, T)
        fd = finite_difference_gradient(lambda M: truncated_cost_J_T(model, M, T), L, step=1e-4)
        np.testing.assert_allclose(fd, g, rtol=1e-6, atol=1e-9)


def test_truncated_gradient_converges_to_steady_state():
    model = _scalar()
    np.testing.assert_allclose(grad_J_T(model, [[0.1]], 200), grad_J(model, [[0.1]]), atol=1e-12)


# ==========================================
# 🔄 DUALITY
# ==========================================

def test_adjoint_cost_matches_truncated_cost():
    rng = np.random.default_rng(9)
    model, L = _random_system(rng)
    for T in (1, 4, 15):
        rhs = sum(adjoint_lqr_cost(model, L, h, T) for h in model.H) + np.trace(model.R)
        assert rhs == pytest.approx(truncated_cost_J_T(model, L, T, include_trR=True), rel=1e-10)


def test_adjoint_cost_single_step():
    model = _scalar(a=0.5, q=2.0, r=3.0, p0=0.5)
    # z(1) = 1, u(1) = L, z(0) = a - L
    L = 0.2
    expected = 2.0 + 3.0 * L ** 2 + 0.5 * (0.5 - L) ** 2
    assert adjoint_lqr_cost(model, [[L]], [1.0], 1) == pytest.approx(expected)


def test_duality_noiseless_is_exact():
    model = SystemModel(A=[[0.5]], H=[[1.0]], Q=[[0.0]], R=[[0.0]], P0=[[0.0]])
    report = duality_check(model, [[0.2]], T=5, mc_samples=50, seed=0)
    assert report.lhs == 0.0
    assert report.rhs == 0.0
    assert report.within(4.0)


def test_duality_small_sample():
    model = _scalar()
    report = duality_check(model, [[0.1]], T=4, mc_samples=3000, seed=1, workers=2)
    assert report.rhs == pytest.approx(report.truncated_cost, rel=1e-10)
    assert report.mc_samples == 3000
    assert report.stderr > 0.0
    assert report.within(4.0), report.to_dict()
    assert set(report.to_dict()) >= {"lhs", "rhs", "stderr", "z_score", "horizon"}


@pytest.mark.parametrize("L, T", [(0.0, 1), (0.3, 3)])
def test_duality_with_nonzero_initial_mean(L, T):
    model = SystemModel(A=[[0.5]], H=[[1.0]], Q=[[0.1]], R=[[0.1]], P0=[[0.05]], m0=[2.0])
    report = duality_check(model, [[L]], T=T, mc_samples=20000, seed=5)
    if T == 1 and L == 0.0:
        # 0.25 * 0.05 + 0.1, plus R
        assert report.rhs == pytest.approx(0.2125, rel=1e-12)
    assert report.within(4.0), report.to_dict()
    assert report.lhs == pytest.approx(report.rhs, rel=0.05)


def test_duality_independent_of_workers():
    model = _scalar()
    one = duality_check(model, [[0.1]], T=3, mc_samples=4100, seed=8, workers=1)
    many = duality_check(model, [[0.1]], T=3, mc_samples=4100, seed=8, workers=3)
    assert one.lhs == many.lhs
    assert one.stderr == many.stderr


def test_duality_rejects_empty_sample():
    with pytest.raises(DomainError):
        duality_check(_scalar(), [[0.1]], T=3, mc_samples=0, seed=0)


@pytest.mark.slow
def test_duality_mass_spring_monte_carlo():
    model = mass_spring_model()
    gain, _ = steady_state_gain(model)
    report = duality_check(model, gain, T=50, mc_samples=100000, seed=0,
                           noise=NoiseConfig.for_model(model), workers=4)
    assert report.within(4.0), report.to_dict()


def test_finite_difference_validates_stencil():
    with pytest.raises(DomainError):
        finite_difference_gradient(lambda L: 0.0, [[0.0]], points=4)
    g = finite_difference_gradient(lambda L: float(np.sum(L ** 2)), [[1.0, -2.0]], points=3)
    np.testing.assert_allclose(g, [[2.0, -4.0]], rtol=1e-8)


def test_diagnostic_failure_is_assertion():
    assert issubclass(DiagnosticFailure, AssertionError)
