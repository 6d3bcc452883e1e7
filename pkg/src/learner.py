"""
Data-driven gain learning.

The update path (stochastic_grad, batch_grad, the sgd_run step) sees only A, H, the current
gain and output trajectories. Q and R reach it solely through the simulated data; an oracle
model, when given, is used for logging J(L_k) and never feeds back into the update.
"""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from config import TARGET_RHO
from errors import (
    ConvergenceError,
    DimensionError,
    DomainError,
    InitializationError,
    InstabilityError,
    StallError,
)
from filtering import GainMatrix, as_gain, fixed_gain_predict, fixed_gain_states, steady_state_gain
from linalg_core import (
    as_matrix,
    max_eigenvalue,
    min_eigenvalue,
    nuclear_norm,
    operator_norm,
    pairwise_mean,
    resolvent_constant,
    solve_discrete_lyapunov,
    spectral_radius,
)
from objective import cost_J, cost_report
from system_model import SystemModel, derive_seed, make_batch

logger = logging.getLogger(__name__)

ARMIJO_C = 1e-4
MIN_STEP = 1e-20
# J changes below this relative size are roundoff; the line search then compares gradients.
ROUNDOFF_REL = 1e-13
# gd_run stops once neither J (by STALL_REL, relative) nor ||grad J|| (by half) improved
# for STALL_WINDOW iterations.
STALL_REL = 1e-13
STALL_WINDOW = 100


class Safeguard(str, Enum):
    REJECT_AND_SHRINK = "reject_and_shrink"
    ASSERT_ONLY = "assert_only"


class InitStrategy(str, Enum):
    SURROGATE_DARE = "surrogate_dare"
    ZERO_IF_STABLE = "zero_if_stable"
    USER = "user"


@dataclass(frozen=True)
class SgdConfig:
    step_size: float = 1e-3
    batch_size: int = 100
    horizon: int = 50
    max_iters: int = 500
    seed: int = 0
    safeguard: Safeguard = Safeguard.REJECT_AND_SHRINK
    target_rho: float = TARGET_RHO
    max_rejections: int = 50
    workers: int = 1

    def __post_init__(self):
        if not self.step_size > 0:
            raise DomainError(f"step_size must be positive, got {self.step_size}")
        for name in ("batch_size", "horizon", "max_iters", "max_rejections", "workers"):
            if getattr(self, name) < 1:
                raise DomainError(f"{name} must be >= 1, got {getattr(self, name)}")
        if not 0.0 < self.target_rho < 1.0:
            raise DomainError(f"target_rho must lie in (0, 1), got {self.target_rho}")
        object.__setattr__(self, "safeguard", Safeguard(self.safeguard))


# ==========================================
# 📒 RUN RECORD
# ==========================================

@dataclass
class RunRecord:
    method: str = "sgd"
    iterates: list = field(default_factory=list)
    costs: list = field(default_factory=list)
    grad_norms: list = field(default_factory=list)
    rhos: list = field(default_factory=list)
    step_sizes: list = field(default_factory=list)
    rejections: list = field(default_factory=list)
    wall_times: list = field(default_factory=list)
    safeguard_events: list = field(default_factory=list)
    j_star: float = None
    stop_reason: str = None

    def append(self, gain, cost, grad_norm, step_size, rejections, wall_time):
        if not gain.is_stabilizing:
            raise InstabilityError(f"refusing to record an unstable iterate (rho = {gain.rho})")
        self.iterates.append(gain)
        self.costs.append(float(cost))
        self.grad_norms.append(float(grad_norm))
        self.rhos.append(gain.rho)
        self.step_sizes.append(float(step_size))
        self.rejections.append(int(rejections))
        self.wall_times.append(float(wall_time))

    def __len__(self):
        return len(self.iterates)

    @property
    def final(self):
        return self.iterates[-1]

    @property
    def gaps(self):
        if self.j_star is None:
            raise DomainError("run was recorded without an oracle, no optimality gap")
        return np.asarray(self.costs) - self.j_star

    @property
    def normalized_gaps(self):
        """(J(L_k) - J*) / (J(L_0) - J*); all zeros when L_0 is already optimal."""
        gaps = self.gaps
        if gaps[0] <= 0.0:
            return np.zeros_like(gaps)
        return gaps / gaps[0]

    def plateau_value(self, window=20, normalized=True):
        values = self.normalized_gaps if normalized else self.gaps
        start = detect_plateau(values, window)
        if start is None:
            start = max(0, len(values) - window)
        return float(np.mean(values[start:]))


def detect_plateau(values, window=20, rel_tol=0.05):
    """
    First index where the moving average stops decreasing: the mean over the next window
    is no lower than (1 - rel_tol) times the mean over the previous one. None if it never does.
    """
    values = np.asarray(values, dtype=float)
    for i in range(window, len(values) - window + 1):
        before = values[i - window:i].mean()
        after = values[i:i + window].mean()
        if after >= (1.0 - rel_tol) * before:
            return i
    return None


# ==========================================
# 📉 STOCHASTIC GRADIENT
# ==========================================

@dataclass(frozen=True)
class GradientWorkspace:
    """Closed-loop powers shared by every trajectory of one horizon at one gain."""
    horizon: int
    powers_t: np.ndarray      # (A_L^T)^i H^T, i = 0..T-1
    pair_lag: np.ndarray      # t - k over 1 <= k <= t <= T-1
    pair_y: np.ndarray        # t
    pair_gain: np.ndarray     # H A_L^(k-1) L per pair

    @classmethod
    def build(cls, gain, H, T):
        if T < 1:
            raise DomainError(f"horizon T must be >= 1, got {T}")
        A_L_t = gain.closed_loop.T
        n, m = gain.L.shape
        powers_t = np.empty((T, n, m))
        powers_t[0] = H.T
        for i in range(1, T):
            powers_t[i] = A_L_t @ powers_t[i - 1]
        loop_gain = np.transpose(powers_t, (0, 2, 1)) @ gain.L

        rows, cols = np.tril_indices(T - 1)
        return cls(
            horizon=T,
            powers_t=powers_t,
            pair_lag=rows - cols,
            pair_y=rows + 1,
            pair_gain=loop_gain[cols],
        )


def stochastic_grad(A, H, L, traj, workspace=None):
    """
    Gradient of eps(L) = ||y(T) - y^_L(T)||^2 for one trajectory, by the double sum

        -2 sum_{t=0}^{T-1} (A_L^T)^t H^T e y(T-1-t)^T
        +2 sum_{1<=k<=t<=T-1} (A_L^T)^(t-k) H^T e (H A_L^(k-1) L y(T-1-t))^T

    with e = y(T) - y^_L(T). Takes no covariance argument.
    """
    H = as_matrix(H, "H")
    gain = as_gain(A, H, L)
    outputs = traj.outputs if hasattr(traj, "outputs") else np.asarray(traj, dtype=float)
    T = outputs.shape[0] - 1
    if T < 1:
        raise DomainError(f"trajectory needs T >= 1, got {T}")
    ws = workspace if workspace is not None else GradientWorkspace.build(gain, H, T)
    if ws.horizon != T:
        raise DimensionError(f"workspace built for T = {ws.horizon}, trajectory has T = {T}")

    _, e = fixed_gain_predict(A, H, gain, outputs)
    weights = ws.powers_t @ e                  # (T, n): (A_L^T)^t H^T e
    y_rev = outputs[T - 1::-1]                 # y(T-1-t) at row t

    direct = weights.T @ y_rev
    fed_back = np.einsum("pab,pb->pa", ws.pair_gain, y_rev[ws.pair_y])
    through_loop = weights[ws.pair_lag].T @ fed_back
    return -2.0 * direct + 2.0 * through_loop


def innovation_grad(A, H, L, traj):
    """The same gradient in O(T): -2 sum_s (A_L^T)^(T-1-s) H^T e nu(s)^T, nu = y - H x^."""
    H = as_matrix(H, "H")
    gain = as_gain(A, H, L)
    outputs = traj.outputs if hasattr(traj, "outputs") else np.asarray(traj, dtype=float)
    T = outputs.shape[0] - 1
    if T < 1:
        raise DomainError(f"trajectory needs T >= 1, got {T}")

    xs = fixed_gain_states(A, H, gain, outputs)
    e = outputs[T] - H @ xs[T]
    innovations = outputs[:T] - xs[:T] @ H.T

    grad = np.zeros_like(gain.L)
    w = H.T @ e
    for s in range(T - 1, -1, -1):
        grad += np.outer(w, innovations[s])
        w = gain.closed_loop.T @ w
    return -2.0 * grad


def batch_grad(A, H, L, batch, workers=1):
    """Mean of stochastic_grad over the batch, reduced by an index-ordered pairwise tree."""
    batch = list(batch)
    if not batch:
        raise DomainError("batch must not be empty")
    H = as_matrix(H, "H")
    gain = as_gain(A, H, L)
    horizons = {traj.horizon for traj in batch}
    if len(horizons) != 1:
        raise DimensionError(f"batch mixes horizons {sorted(horizons)}")
    ws = GradientWorkspace.build(gain, H, horizons.pop())

    def one(traj):
        return stochastic_grad(A, H, gain, traj, workspace=ws)

    if workers > 1 and len(batch) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            grads = list(pool.map(one, batch))
    else:
        grads = [one(traj) for traj in batch]
    return pairwise_mean(grads)


# ==========================================
# 🛡️ STABILITY MARGIN
# ==========================================

def stability_margin(A, H, L, Lambda=None):
    """
    Radius lambda_min(Lambda) / (2 lambda_max(Z) ||H||), Z = A_L Z A_L^T + Lambda.
    Any Delta with ||Delta||_F at most this keeps L + Delta stabilizing.
    """
    H = as_matrix(H, "H")
    gain = as_gain(A, H, L).require_stabilizing()
    n = gain.L.shape[0]
    Lam = np.eye(n) if Lambda is None else as_matrix(Lambda, "Lambda", square=True)
    if min_eigenvalue(Lam) <= 0.0:
        raise DomainError("Lambda must be positive definite")
    Z = solve_discrete_lyapunov(gain.closed_loop, Lam)
    return min_eigenvalue(Lam) / (2.0 * max_eigenvalue(Z) * operator_norm(H))


# ==========================================
# 🏃 RUNS
# ==========================================

def _oracle_optimum(oracle):
    if oracle is None:
        return None
    gain_star, _ = steady_state_gain(oracle)
    return cost_J(oracle, gain_star)


def sgd_run(model_sim, noise, L0, cfg, oracle=None, record_timing=True):
    """
    L_{k+1} = L_k - eta * batch_grad(L_k, fresh batch k), batch seed derive_seed(cfg.seed, k).

    A step landing at rho >= target_rho is rejected; reject_and_shrink halves eta and retries,
    assert_only aborts. The record holds iterates 0..max_iters, each with the batch gradient
    norm measured there and the step that left it.
    """
    A, H = model_sim.A, model_sim.H
    gain = as_gain(A, H, L0)
    if not gain.is_stabilizing:
        raise DomainError(f"initial gain is not stabilizing (rho = {gain.rho:.6f})")
    if gain.rho >= cfg.target_rho:
        raise DomainError(
            f"initial gain has rho = {gain.rho:.6f} >= target_rho = {cfg.target_rho}"
        )

    record = RunRecord(method="sgd", j_star=_oracle_optimum(oracle))
    K = cfg.max_iters
    for k in range(K + 1):
        started = time.perf_counter()
        batch = make_batch(model_sim, noise, cfg.horizon, cfg.batch_size,
                           derive_seed(cfg.seed, k), workers=cfg.workers)
        g = batch_grad(A, H, gain, batch, workers=cfg.workers)
        cost = cost_J(oracle, gain) if oracle is not None else float("nan")
        g_norm = float(np.linalg.norm(g))

        if k == K:
            elapsed = time.perf_counter() - started if record_timing else 0.0
            record.append(gain, cost, g_norm, 0.0, 0, elapsed)
            break

        eta = cfg.step_size
        rejected = 0
        while True:
            candidate = GainMatrix.build(A, H, gain.L - eta * g)
            if candidate.rho < cfg.target_rho:
                break
            if cfg.safeguard is Safeguard.ASSERT_ONLY:
                raise InstabilityError(
                    f"iteration {k}: step reached rho = {candidate.rho:.6f} "
                    f">= target_rho = {cfg.target_rho}"
                )
            rejected += 1
            record.safeguard_events.append((k, Safeguard.REJECT_AND_SHRINK.value))
            if rejected > cfg.max_rejections:
                raise StallError(
                    f"iteration {k}: {rejected} consecutive rejected steps", record=record
                )
            eta *= 0.5

        if rejected:
            logger.debug("iteration %d: %d rejected steps, eta -> %.3e", k, rejected, eta)
        elapsed = time.perf_counter() - started if record_timing else 0.0
        record.append(gain, cost, g_norm, eta, rejected, elapsed)
        gain = candidate

    record.stop_reason = "max_iters"
    logger.info(
        "sgd finished %d iterations: rho %.4f, %d safeguard events",
        K, gain.rho, len(record.safeguard_events),
    )
    return record


def gd_run(model, L0, tol=1e-10, max_iters=10000, record_timing=True):
    """
    Exact-gradient descent with Armijo backtracking from eta = 1 (halving, sufficient
    decrease ARMIJO_C); candidates with rho >= 1 are rejected.

    Stops at ||grad J||_F <= tol (stop_reason "tol"), or once the iterate sits on the
    roundoff floor of J (stop_reason "stagnation"): for STALL_WINDOW iterations J has
    not dropped by STALL_REL and ||grad J|| has not halved, or the line search finds no
    acceptable step while J is flat.
    Running out of iterations raises ConvergenceError carrying the record.
    """
    A, H = model.A, model.H
    gain = as_gain(A, H, L0)
    if not gain.is_stabilizing:
        raise DomainError(f"initial gain is not stabilizing (rho = {gain.rho:.6f})")

    record = RunRecord(method="gd", j_star=_oracle_optimum(model))
    report = cost_report(model, gain)
    anchor, g_anchor, stale = report.J, float(np.linalg.norm(report.grad)), 0

    def finish(reason, g_norm, k):
        record.append(gain, report.J, g_norm, 0.0, 0, 0.0)
        record.stop_reason = reason
        logger.info("gd stopped (%s) after %d iterations (|grad| = %.3e)", reason, k, g_norm)
        return record

    for k in range(max_iters + 1):
        started = time.perf_counter()
        g = report.grad
        g_norm = float(np.linalg.norm(g))
        if g_norm <= tol:
            return finish("tol", g_norm, k)
        if stale >= STALL_WINDOW:
            return finish("stagnation", g_norm, k)
        if k == max_iters:
            record.append(gain, report.J, g_norm, 0.0, 0, 0.0)
            break

        eta, shrinks, flat = 1.0, 0, False
        while True:
            candidate = GainMatrix.build(A, H, gain.L - eta * g)
            if candidate.is_stabilizing:
                trial = cost_report(model, candidate)
                if trial.J <= report.J - ARMIJO_C * eta * g_norm ** 2:
                    break
                flat = abs(trial.J - report.J) <= ROUNDOFF_REL * (1.0 + abs(report.J))
                if flat and np.linalg.norm(trial.grad) < g_norm:
                    break
            eta *= 0.5
            shrinks += 1
            if eta < MIN_STEP:
                if flat:
                    return finish("stagnation", g_norm, k)
                raise ConvergenceError(
                    f"line search failed at iteration {k} (|grad| = {g_norm:.3e})", record=record
                )

        elapsed = time.perf_counter() - started if record_timing else 0.0
        record.append(gain, report.J, g_norm, eta, shrinks, elapsed)
        gain, report = candidate, trial
        g_next = float(np.linalg.norm(report.grad))
        if report.J < anchor - STALL_REL * (1.0 + abs(anchor)) or g_next < 0.5 * g_anchor:
            anchor, g_anchor, stale = report.J, g_next, 0
        else:
            stale += 1

    record.stop_reason = "max_iters"
    raise ConvergenceError(
        f"gradient descent did not reach tol = {tol} in {max_iters} iterations", record=record
    )


# ==========================================
# 📏 SAMPLE SIZES
# ==========================================

@dataclass(frozen=True)
class LandscapeConstants:
    """Sublevel-set proxies: resolvent constant C, spectral radius rho, gain norm bound D."""
    C: float
    rho: float
    D: float

    def __post_init__(self):
        if not 0.0 < self.rho < 1.0:
            raise DomainError(f"rho must lie in (0, 1), got {self.rho}")
        if not (self.C > 0 and self.D >= 0):
            raise DomainError("C must be positive and D nonnegative")

    @classmethod
    def from_gains(cls, A, H, gains, grid_points=None):
        """Worst case over a set of representative stabilizing gains."""
        C = rho = D = 0.0
        for L in gains:
            gain = as_gain(A, H, L).require_stabilizing()
            kwargs = {} if grid_points is None else {"grid_points": grid_points}
            est = resolvent_constant(gain.closed_loop, **kwargs)
            C = max(C, est.c_value)
            rho = max(rho, gain.rho)
            D = max(D, operator_norm(gain.L))
        return cls(C=C, rho=rho, D=D)


@dataclass(frozen=True)
class SampleRequirements:
    T_min: int
    M_min: int
    T_raw: float
    M_raw: float
    gamma_bar: float
    nu: float
    nu_refined: float = None
    M_refined_raw: float = None
    M_refined: int = None


def dimension_free_nu(C, rho, kappa, kappa_omega, H):
    """
    [2 kappa kappa_omega C^2 + (C + 2 C^3 rho^1.5) ||H|| kappa^2] ||H^T H||_* / (1 - sqrt(rho))^3,
    the batch-gradient variance proxy that carries no min(n, m) factor.
    """
    H = as_matrix(H, "H")
    lead = (2.0 * kappa * kappa_omega * C ** 2
            + (C + 2.0 * C ** 3 * rho ** 1.5) * operator_norm(H) * kappa ** 2)
    return float(lead * nuclear_norm(H.T @ H) / (1.0 - np.sqrt(rho)) ** 3)


def sample_requirements(constants, H, kappas, s, s0, tau, delta, n, m, refined=False):
    """
    Horizon and batch size that put the biased batch gradient within s * s0 of the truth:

        T >= ln(gamma_bar sqrt(min(n, m)) / s0) / ln(1 / sqrt(rho))
        M >= 4 nu^2 min(n, m) ln(2n / delta) / (s s0)^2

    gamma_bar = 10 (k_xi + D k_omega)^4 C^6 ||H||^2 ||H||_*,
    nu = 5 C^3 ||H||^2 ||H||_* (k_xi + D k_omega)^2 / (1 - sqrt(rho))^3.
    With refined set, also M >= [2 q^2 + 4/3 q] ln(2n / delta), q = nu_refined / (s s0 / tau),
    nu_refined from dimension_free_nu.
    """
    H = as_matrix(H, "H")
    kappa_xi, kappa_omega = kappas
    for name, value in (("s", s), ("s0", s0), ("delta", delta), ("kappa_xi", kappa_xi),
                        ("kappa_omega", kappa_omega)):
        if not value > 0:
            raise DomainError(f"{name} must be positive, got {value}")
    if not 0.0 < tau < 1.0:
        raise DomainError(f"tau must lie in (0, 1), got {tau}")
    if not 0.0 < delta < 1.0:
        raise DomainError(f"delta must lie in (0, 1), got {delta}")

    C, rho, D = constants.C, constants.rho, constants.D
    h_op, h_nuc = operator_norm(H), nuclear_norm(H)
    kappa = kappa_xi + D * kappa_omega
    dim = min(n, m)

    gamma_bar = 10.0 * kappa ** 4 * C ** 6 * h_op ** 2 * h_nuc
    nu = 5.0 * C ** 3 * h_op ** 2 * h_nuc * kappa ** 2 / (1.0 - np.sqrt(rho)) ** 3
    log_term = np.log(2.0 * n / delta)

    T_raw = float(np.log(gamma_bar * np.sqrt(dim) / s0) / np.log(1.0 / np.sqrt(rho)))
    M_raw = float(4.0 * nu ** 2 * dim * log_term / (s * s0) ** 2)
    result = dict(
        T_min=int(np.ceil(max(0.0, T_raw))),
        M_min=int(np.ceil(M_raw)),
        T_raw=T_raw,
        M_raw=M_raw,
        gamma_bar=float(gamma_bar),
        nu=float(nu),
    )
    if refined:
        nu_refined = dimension_free_nu(C, rho, kappa, kappa_omega, H)
        q = nu_refined / (s * s0 / tau)
        M_ref = float((2.0 * q ** 2 + 4.0 / 3.0 * q) * log_term)
        result.update(nu_refined=nu_refined, M_refined_raw=M_ref, M_refined=int(np.ceil(M_ref)))
    return SampleRequirements(**result)


# ==========================================
# 🚦 INITIAL GAIN
# ==========================================

def initial_gain(A, H, strategy=InitStrategy.SURROGATE_DARE, user_gain=None,
                 surrogate_q=1.0, surrogate_r=1.0):
    """
    Stabilizing starting gain from (A, H) alone. surrogate_dare solves the DARE with
    placeholder covariances surrogate_q * I and surrogate_r * I.
    """
    A = as_matrix(A, "A", square=True)
    H = as_matrix(H, "H")
    n, m = A.shape[0], H.shape[0]
    strategy = InitStrategy(strategy)

    if strategy is InitStrategy.SURROGATE_DARE:
        surrogate = SystemModel(A, H, surrogate_q * np.eye(n), surrogate_r * np.eye(m), np.eye(n))
        gain, _ = steady_state_gain(surrogate)
    elif strategy is InitStrategy.ZERO_IF_STABLE:
        if spectral_radius(A) >= 1.0:
            raise InitializationError(
                f"zero gain is not stabilizing: rho(A) = {spectral_radius(A):.6f}"
            )
        gain = GainMatrix.build(A, H, np.zeros((n, m)))
    else:
        if user_gain is None:
            raise InitializationError("strategy 'user' needs a gain")
        gain = GainMatrix.build(A, H, user_gain)

    if not gain.is_stabilizing:
        raise InitializationError(f"{strategy.value} gain is not stabilizing (rho = {gain.rho:.6f})")
    return gain
