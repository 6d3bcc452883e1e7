"""
Empirical checks of the learner's analysis: the vectorized error identity, geometric decay
of the truncation bias, 1/sqrt(M) concentration of the batch gradient and the resolvent
power bound. Bound constants are reported beside the measurements; only directions are
asserted, never tightness.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import stats

from errors import ConvergenceError, DiagnosticFailure, DomainError, InconclusiveError, InstabilityError
from filtering import as_gain, fixed_gain_predict, steady_state_gain
from learner import GradientWorkspace, batch_grad, dimension_free_nu, stochastic_grad
from linalg_core import (
    matrix_powers,
    nuclear_norm,
    operator_norm,
    resolvent_constant,
)
from objective import cost_J, cost_report, grad_J, grad_J_T
from system_model import NoiseConfig, derive_seed, make_batch, simulate

logger = logging.getLogger(__name__)

IDENTITY_TOL = 1e-10
# Gaps at or below this (relative to ||grad J||) are roundoff and stay out of the fit.
GAP_FLOOR = 1e-13
SLOPE_TARGET = -0.5
SLOPE_TOL = 0.15


@dataclass(frozen=True)
class DecayReport:
    xs: tuple
    errors: tuple
    fitted_slope: float
    fit_r2: float
    reference_slope: float
    monotone: bool = None
    constants: dict = field(default_factory=dict)
    samples: tuple = None

    def __post_init__(self):
        if len(self.xs) != len(self.errors) or len(self.xs) < 3:
            raise DomainError("a decay report needs >= 3 (x, error) pairs of equal length")

    def to_dict(self):
        return {
            "xs": list(self.xs),
            "errors": list(self.errors),
            "fitted_slope": self.fitted_slope,
            "fit_r2": self.fit_r2,
            "reference_slope": self.reference_slope,
            "monotone": self.monotone,
            "constants": self.constants,
            "samples": None if self.samples is None else list(self.samples),
        }


def _fit(x, y):
    fit = stats.linregress(x, y)
    return float(fit.slope), float(min(1.0, max(0.0, fit.rvalue ** 2)))


# ==========================================
# 🧷 ERROR IDENTITY
# ==========================================

@dataclass(frozen=True)
class EpsilonReport:
    eps_direct: float
    eps_vectorized: float
    quadratic_term: float
    discrepancy: float


def epsilon_vector_form(A, H, L, traj):
    """
    ||y(T) - y^_L(T)||^2 two ways. With eta = (xi(T-1) - L w(T-1), ..., xi(0) - L w(0), x0)
    and the stacked powers P = (A_L^0 ... A_L^T), the state error is P eta, so

        eps = eta^T P^T H^T H P eta + 2 w(T)^T H P eta + ||w(T)||^2.

    The predictor starts from x^(0) = 0.
    """
    if not getattr(traj, "has_noise_record", False):
        raise DomainError("trajectory carries no noise record")
    gain = as_gain(A, H, L)
    H = np.atleast_2d(np.asarray(H, dtype=float))
    n = gain.L.shape[0]
    T = traj.horizon

    _, err = fixed_gain_predict(A, H, gain, traj)
    eps_direct = float(err @ err)

    xi_rev = traj.process_noise[::-1]
    omega_rev = traj.measurement_noise[T - 1::-1] if T > 0 else traj.measurement_noise[:0]
    blocks = xi_rev - omega_rev @ gain.L.T
    eta = np.vstack([blocks, traj.states[0][None, :]]).reshape(-1)

    stacked = np.transpose(matrix_powers(gain.closed_loop, T), (1, 0, 2)).reshape(n, (T + 1) * n)
    HP = H @ stacked
    quadratic = float(np.trace(np.outer(eta, eta) @ HP.T @ HP))
    omega_T = traj.measurement_noise[T]
    eps_vectorized = quadratic + 2.0 * float(omega_T @ HP @ eta) + float(omega_T @ omega_T)

    discrepancy = abs(eps_direct - eps_vectorized)
    if discrepancy > IDENTITY_TOL * (1.0 + eps_direct):
        raise DiagnosticFailure(
            f"error identity violated: direct {eps_direct!r} vs vectorized {eps_vectorized!r}"
        )
    return EpsilonReport(eps_direct, eps_vectorized, quadratic, discrepancy)


# ==========================================
# 📐 BOUND CONSTANTS
# ==========================================

def _closed_loop_scales(A, H, L, kappas, grid_points=None):
    gain = as_gain(A, H, L).require_stabilizing()
    kwargs = {} if grid_points is None else {"grid_points": grid_points}
    est = resolvent_constant(gain.closed_loop, **kwargs)
    H = np.atleast_2d(np.asarray(H, dtype=float))
    kappa_xi, kappa_omega = kappas
    return dict(
        C=est.c_value,
        rho=gain.rho,
        h_op=operator_norm(H),
        h_nuc=nuclear_norm(H),
        hth_nuc=nuclear_norm(H.T @ H),
        l_op=operator_norm(gain.L),
        kappa_xi=kappa_xi,
        kappa_omega=kappa_omega,
        kappa_L=kappa_xi + operator_norm(gain.L) * kappa_omega,
    )


def truncation_constants(A, H, L, kappas, grid_points=None):
    """
    gamma_bar (main form, 1 / (1 - rho)^2 already folded in) bounds
    ||grad J - grad J_T|| <= gamma_bar sqrt(rho)^(T+1). The tighter pair leaves it out:
    |J - J_T| <= xi_bar_refined rho^(T+1) / (1 - rho) and
    ||grad J - grad J_T|| <= gamma_bar_refined sqrt(rho)^(T+1) / (1 - rho)^2.
    """
    c = _closed_loop_scales(A, H, L, kappas, grid_points)
    C, rho, kL = c["C"], c["rho"], c["kappa_L"]
    noise_mix = c["kappa_xi"] ** 2 + c["kappa_omega"] ** 2 * c["l_op"] ** 2
    return {
        "C_L": C,
        "rho": rho,
        "gamma_bar": 10.0 * kL ** 4 * C ** 6 * c["h_op"] ** 2 * c["h_nuc"] / (1.0 - rho) ** 2,
        "xi_bar_refined": (c["kappa_xi"] ** 2 + noise_mix * C ** 2) * c["hth_nuc"] * C ** 2,
        "gamma_bar_refined": 2.0 * (c["kappa_xi"] ** 2 + C ** 2 * noise_mix) * C ** 2
        * c["h_op"] * c["hth_nuc"],
    }


def concentration_constants(A, H, L, kappas, grid_points=None):
    """
    Variance proxies of the batch gradient: nu_L (main form), the dimension-free nu_L, and
    the horizon-dependent mu_bar_L / nu_bar_L.
    """
    c = _closed_loop_scales(A, H, L, kappas, grid_points)
    C, rho, kL = c["C"], c["rho"], c["kappa_L"]
    sq = np.sqrt(rho)
    return {
        "C_L": C,
        "rho": rho,
        "nu": 4.0 * kL ** 2 * C ** 3 * c["h_op"] ** 2 * c["h_nuc"] / (1.0 - sq) ** 3,
        "nu_dimension_free": dimension_free_nu(C, rho, kL, c["kappa_omega"], H),
        "mu_bar": C ** 2 * c["hth_nuc"] * kL ** 2 / (1.0 - rho),
        "nu_bar": (2.0 * C + 4.0 * C ** 3 * rho ** 1.5) * c["h_op"] * c["hth_nuc"] * kL ** 2
        / (1.0 - rho) ** 2,
    }


# ==========================================
# ✂️ TRUNCATION
# ==========================================

def _mc_truncated_grad(model, noise, gain, T, seed, start_samples, max_samples, target_of_gap,
                       exact):
    """Mean stochastic gradient at horizon T, doubling M until stderr < target * gap."""
    ws = GradientWorkspace.build(gain, model.H, T)
    grads = []
    M = start_samples
    while True:
        for i in range(len(grads), M):
            traj = simulate(model, noise, T, derive_seed(seed, T, i))
            grads.append(stochastic_grad(model.A, model.H, gain, traj, workspace=ws))
        stack = np.asarray(grads)
        mean = stack.mean(axis=0)
        stderr = float(np.linalg.norm(stack.std(axis=0, ddof=1)) / np.sqrt(len(grads)))
        gap = float(np.linalg.norm(mean - exact))
        if stderr < target_of_gap * gap:
            return mean, gap, len(grads), True
        if M >= max_samples:
            return mean, gap, len(grads), False
        M = min(2 * M, max_samples)


def truncation_decay(model, L, T_values, method="closed_form", noise=None, seed=0,
                     start_samples=256, max_samples=65536):
    """
    ||grad J_T(L) - grad J(L)||_F over increasing T, fitted as log-gap vs T. The reference
    slope is ln sqrt(rho(A_L)). closed_form uses grad_J_T; monte_carlo averages stochastic
    gradients, growing the sample until its stderr is under 10% of the gap.
    """
    T_values = [int(T) for T in T_values]
    if len(T_values) < 3 or any(b <= a for a, b in zip(T_values, T_values[1:])):
        raise DomainError("T_values must be increasing with at least 3 entries")
    gain = as_gain(model.A, model.H, L).require_stabilizing()
    exact = grad_J(model, gain)
    floor = GAP_FLOOR * (1.0 + np.linalg.norm(exact))

    errors, samples, resolved = [], [], []
    for T in T_values:
        if method == "closed_form":
            errors.append(float(np.linalg.norm(grad_J_T(model, gain, T) - exact)))
            samples.append(0)
            resolved.append(True)
        elif method == "monte_carlo":
            noise = noise or NoiseConfig.for_model(model)
            _, gap, used, ok = _mc_truncated_grad(
                model, noise, gain, T, seed, start_samples, max_samples, 0.1, exact
            )
            errors.append(gap)
            samples.append(used)
            resolved.append(ok)
        else:
            raise DomainError(f"unknown method {method!r}")

    errors_arr = np.asarray(errors)
    keep = errors_arr > floor
    reference = float(np.log(np.sqrt(gain.rho))) if gain.rho > 0 else float("-inf")
    if keep.sum() >= 2:
        slope, r2 = _fit(np.asarray(T_values)[keep], np.log(errors_arr[keep]))
    else:
        slope, r2 = float("nan"), 0.0

    above = errors_arr[keep]
    report = DecayReport(
        xs=tuple(T_values),
        errors=tuple(errors),
        fitted_slope=slope,
        fit_r2=r2,
        reference_slope=reference,
        monotone=bool(np.all(np.diff(above) <= 0.0)),
        constants={},
        samples=tuple(samples),
    )

    if not all(resolved):
        unresolved = [T for T, ok in zip(T_values, resolved) if not ok]
        raise InconclusiveError(
            f"Monte-Carlo error not separated from truncation bias at T = {unresolved}",
            report=report,
        )
    if keep.sum() >= 2 and not slope < 0.0:
        raise DiagnosticFailure(f"truncation gap does not decay (slope {slope:.3g})")
    logger.info("truncation decay: slope %.4f (reference %.4f), R^2 %.4f", slope, reference, r2)
    return report


def truncation_bound_curve(model, L, T_values, kappas, grid_points=None):
    """The truncation bound gamma_bar_L sqrt(rho)^(T+1) at each T, for reporting."""
    consts = truncation_constants(model.A, model.H, L, kappas, grid_points)
    sq = np.sqrt(consts["rho"])
    return [consts["gamma_bar"] * sq ** (T + 1) for T in T_values]


# ==========================================
# 📊 CONCENTRATION
# ==========================================

def concentration_sweep(model, noise, L, T, M_values, reps=50, seed=0, workers=1,
                        assert_slope=True):
    """
    For each M, `reps` independent batch gradients; the error is their mean operator-norm
    distance from the pooled mean of every trajectory gradient drawn. log error vs log M
    should fall with slope -1/2.
    """
    if reps < 20:
        raise DomainError(f"reps must be >= 20, got {reps}")
    M_values = [int(M) for M in M_values]
    if len(M_values) < 3:
        raise DomainError("M_values needs at least 3 entries")
    gain = as_gain(model.A, model.H, L).require_stabilizing()

    cells = []
    for i, M in enumerate(M_values):
        grads = []
        for r in range(reps):
            batch = make_batch(model, noise, T, M, derive_seed(seed, i, r), workers=workers)
            grads.append(batch_grad(model.A, model.H, gain, batch, workers=workers))
        cells.append(np.asarray(grads))

    total = sum(M * reps for M in M_values)
    pooled = sum(M * cell.sum(axis=0) for M, cell in zip(M_values, cells)) / total

    errors, spreads = [], []
    for cell in cells:
        dev = np.array([operator_norm(g - pooled) for g in cell])
        errors.append(float(dev.mean()))
        spreads.append(float(dev.std(ddof=1) / np.sqrt(reps) / dev.mean()))
    slope, r2 = _fit(np.log(M_values), np.log(errors))

    consts = concentration_constants(model.A, model.H, gain, (noise.kappa_xi, noise.kappa_omega))
    consts["relative_stderr"] = spreads
    consts["nu_over_empirical"] = consts["nu"] / (errors[0] * np.sqrt(M_values[0]))

    report = DecayReport(
        xs=tuple(M_values),
        errors=tuple(errors),
        fitted_slope=slope,
        fit_r2=r2,
        reference_slope=SLOPE_TARGET,
        monotone=bool(np.all(np.diff(errors) <= 0.0)),
        constants=consts,
        samples=tuple(M * reps for M in M_values),
    )
    logger.info("concentration slope %.3f (R^2 %.3f)", slope, r2)
    if assert_slope and abs(slope - SLOPE_TARGET) > SLOPE_TOL:
        raise DiagnosticFailure(
            f"concentration slope {slope:.3f} outside {SLOPE_TARGET} +/- {SLOPE_TOL}"
        )
    return report


# ==========================================
# 🔁 POWER BOUND
# ==========================================

@dataclass(frozen=True)
class PowerBoundReport:
    k_max: int
    c_value: float
    radius: float
    grid_points: int
    ratios: tuple
    worst_ratio: float
    worst_k: int


def power_bound_check(L, k_max=50, A=None, H=None, grid_points=None):
    """
    Checks ||A_L^k|| <= C_L r^(k+1) for k = 0..k_max. L is a GainMatrix, or a raw gain
    together with A and H. Ratios are ||A_L^k|| / (C_L r^(k+1)); the grid is refined once
    before a violation is reported.
    """
    if hasattr(L, "closed_loop"):
        A_L = L.closed_loop
    elif A is not None and H is not None:
        A_L = as_gain(A, H, L).closed_loop
    else:
        raise DomainError("power_bound_check needs a GainMatrix or (A, H)")

    kwargs = {} if grid_points is None else {"grid_points": grid_points}
    est = resolvent_constant(A_L, k_check=k_max, max_refinements=1, **kwargs)
    norms = np.linalg.norm(matrix_powers(A_L, k_max), ord=2, axis=(1, 2))
    ratios = norms / est.bound(np.arange(k_max + 1))
    worst = int(np.argmax(ratios))
    return PowerBoundReport(
        k_max=k_max,
        c_value=est.c_value,
        radius=est.radius,
        grid_points=est.grid_points,
        ratios=tuple(float(r) for r in ratios),
        worst_ratio=float(ratios[worst]),
        worst_k=worst,
    )


# ==========================================
# 🏔️ LANDSCAPE
# ==========================================

def gradient_dominance_constant(model, gains, min_grad=1e-10):
    """
    Smallest c with J(L) - J(L*) <= c ||grad J(L)||_F^2 over the given gains; gains whose
    gradient is numerically zero are skipped. Returns (c, per-gain ratios).
    """
    gain_star, _ = steady_state_gain(model)
    j_star = cost_J(model, gain_star)
    ratios = []
    for L in gains:
        rep = cost_report(model, L)
        g2 = float(np.sum(rep.grad ** 2))
        if g2 <= min_grad ** 2:
            continue
        ratios.append(max(0.0, rep.J - j_star) / g2)
    if not ratios:
        raise DomainError("no gain with a nonzero gradient")
    return max(ratios), ratios


@dataclass(frozen=True)
class CoercivityReport:
    scales: tuple
    costs: tuple
    rhos: tuple
    boundary_scale: float

    def exceeds(self, threshold):
        return max(self.costs) > threshold


def coercivity_probe(model, L, direction=None, points=16, max_doublings=60):
    """
    Cost along L + s D as s approaches the first scale s_b where rho(A_L) reaches 1.
    D defaults to L itself. Evaluations stop once the Lyapunov solve gives out.
    """
    gain = as_gain(model.A, model.H, L).require_stabilizing()
    D = gain.L if direction is None else np.atleast_2d(np.asarray(direction, dtype=float))

    def rho_at(s):
        return as_gain(model.A, model.H, gain.L + s * D).rho

    hi = 1.0
    for _ in range(max_doublings):
        if rho_at(hi) >= 1.0:
            break
        hi *= 2.0
    else:
        raise DomainError("ray never leaves the stable set")
    lo = 0.0
    for _ in range(100):
        mid = 0.5 * (lo + hi)
        if rho_at(mid) >= 1.0:
            hi = mid
        else:
            lo = mid
    boundary = lo

    scales, costs, rhos = [], [], []
    for k in range(points):
        s = boundary * (1.0 - 2.0 ** (-k))
        cand = as_gain(model.A, model.H, gain.L + s * D)
        try:
            costs.append(cost_J(model, cand))
        except (InstabilityError, ConvergenceError):
            break
        scales.append(s)
        rhos.append(cand.rho)
    return CoercivityReport(tuple(scales), tuple(costs), tuple(rhos), boundary)
