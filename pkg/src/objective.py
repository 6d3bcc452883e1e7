"""
Oracle-side objective: the steady-state prediction error J(L) = tr(X H^T H), its truncated
counterpart J_T(L), both gradients, and the estimation/control duality check.

Everything here reads Q, R and P0 from the model, so none of it is reachable from the
data-driven update path in learner.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from errors import DiagnosticFailure, DomainError
from filtering import as_gain, fixed_gain_predict
from linalg_core import as_vector, solve_discrete_lyapunov, symmetrize
from system_model import NoiseConfig, derive_seed, simulate

logger = logging.getLogger(__name__)

IDENTITY_TOL = 1e-10
DUALITY_CHUNK = 2048


@dataclass(frozen=True)
class CostReport:
    J: float
    X: np.ndarray
    Y: np.ndarray
    grad: np.ndarray


def cost_report(model, L):
    """
    X = A_L X A_L^T + Q + L R L^T,  Y = A_L^T Y A_L + H^T H,
    J = tr(X H^T H),  grad J = 2 Y (L R - A_L X H^T).
    """
    gain = as_gain(model.A, model.H, L).require_stabilizing()
    A_L, Lm, H = gain.closed_loop, gain.L, model.H

    X = solve_discrete_lyapunov(A_L, model.Q + Lm @ model.R @ Lm.T)
    Y = solve_discrete_lyapunov(A_L.T, H.T @ H)
    J = float(np.trace(X @ H.T @ H))
    grad = 2.0 * Y @ (Lm @ model.R - A_L @ X @ H.T)
    return CostReport(J=J, X=X, Y=Y, grad=grad)


def cost_J(model, L):
    return cost_report(model, L).J


def grad_J(model, L):
    return cost_report(model, L).grad


# ==========================================
# ✂️ FINITE HORIZON
# ==========================================

def _truncated_covariances(model, gain, T):
    """X_0 = P0, X_{t+1} = A_L X_t A_L^T + Q + L R L^T, returned for t = 0..T."""
    if T < 1:
        raise DomainError(f"horizon T must be >= 1, got {T}")
    A_L, Lm = gain.closed_loop, gain.L
    W = model.Q + Lm @ model.R @ Lm.T
    Xs = [model.P0]
    for _ in range(T):
        Xs.append(symmetrize(A_L @ Xs[-1] @ A_L.T + W))
    return Xs


def truncated_cost_J_T(model, L, T, include_trR=False):
    """tr(X_T H^T H) (+ tr R): the exact mean-squared error of y^_L(T). No stability needed."""
    gain = as_gain(model.A, model.H, L)
    X_T = _truncated_covariances(model, gain, T)[-1]
    value = float(np.trace(X_T @ model.H.T @ model.H))
    if include_trR:
        value += float(np.trace(model.R))
    return value


def grad_J_T(model, L, T):
    """
    Gradient of J_T through the adjoint weights
    Lambda_T = H^T H, Lambda_t = A_L^T Lambda_{t+1} A_L:

        grad J_T = 2 sum_{t<T} Lambda_{t+1} (L R - A_L X_t H^T)
    """
    gain = as_gain(model.A, model.H, L)
    A_L, Lm, H = gain.closed_loop, gain.L, model.H
    Xs = _truncated_covariances(model, gain, T)

    Lam = H.T @ H
    LR = Lm @ model.R
    grad = np.zeros_like(Lm)
    for t in range(T - 1, -1, -1):
        grad += Lam @ (LR - A_L @ Xs[t] @ H.T)
        Lam = A_L.T @ Lam @ A_L
    return 2.0 * grad


# ==========================================
# 🔄 DUALITY
# ==========================================

def adjoint_lqr_cost(model, L, a, T):
    """
    LQR cost of the time-reversed adjoint system under the feedback u(t) = L^T z(t):

        z(T) = a,  z(t) = A^T z(t+1) - H^T u(t+1)
        cost = z(0)^T P0 z(0) + sum_{t=1}^{T} z(t)^T Q z(t) + u(t)^T R u(t)
    """
    gain = as_gain(model.A, model.H, L)
    if T < 1:
        raise DomainError(f"horizon T must be >= 1, got {T}")
    z = as_vector(a, model.n, "a")
    A, H, Lm = model.A, model.H, gain.L

    cost = 0.0
    for _ in range(T):
        u = Lm.T @ z
        cost += float(z @ model.Q @ z + u @ model.R @ u)
        z = A.T @ z - H.T @ u
    return cost + float(z @ model.P0 @ z)


@dataclass(frozen=True)
class DualityReport:
    lhs: float
    rhs: float
    adjoint_cost_sum: float
    truncated_cost: float
    stderr: float
    mc_samples: int
    horizon: int

    @property
    def z_score(self):
        if self.stderr == 0.0:
            return 0.0 if self.lhs == self.rhs else float("inf")
        return abs(self.lhs - self.rhs) / self.stderr

    def within(self, n_stderr=4.0):
        return self.z_score <= n_stderr

    def to_dict(self):
        return {
            "lhs": self.lhs,
            "rhs": self.rhs,
            "adjoint_cost_sum": self.adjoint_cost_sum,
            "truncated_cost": self.truncated_cost,
            "stderr": self.stderr,
            "z_score": self.z_score,
            "mc_samples": self.mc_samples,
            "horizon": self.horizon,
        }


def _squared_errors(model, noise, gain, T, seed, start, count):
    out = np.empty(count)
    for i in range(count):
        traj = simulate(model, noise, T, derive_seed(seed, start + i))
        _, err = fixed_gain_predict(model.A, model.H, gain, traj, m0=model.m0)
        out[i] = float(err @ err)
    return out


def duality_check(model, L, T, mc_samples, seed, noise=None, workers=1):
    """
    lhs: Monte-Carlo E||y(T) - y^_L(T)||^2 on fresh trajectories, predictor started at
    x^(0) = m0 so the state error starts with covariance P0.
    rhs: sum over the rows H_i of the adjoint LQR cost from z(T) = H_i^T, plus tr R.
    rhs must equal truncated_cost_J_T(..., include_trR=True) to IDENTITY_TOL.
    """
    if mc_samples < 1:
        raise DomainError(f"mc_samples must be >= 1, got {mc_samples}")
    gain = as_gain(model.A, model.H, L)
    noise = noise or NoiseConfig.for_model(model)

    adjoint_sum = sum(adjoint_lqr_cost(model, gain, h_row, T) for h_row in model.H)
    rhs = adjoint_sum + float(np.trace(model.R))
    truncated = truncated_cost_J_T(model, gain, T, include_trR=True)
    if abs(rhs - truncated) > IDENTITY_TOL * (1.0 + abs(truncated)):
        raise DiagnosticFailure(
            f"adjoint cost {rhs!r} disagrees with truncated cost {truncated!r}"
        )

    # Per-index values then a single ordered reduction, so the mean ignores worker count.
    starts = list(range(0, mc_samples, DUALITY_CHUNK))
    sizes = [min(DUALITY_CHUNK, mc_samples - s) for s in starts]
    if workers > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(
                lambda sc: _squared_errors(model, noise, gain, T, seed, *sc), zip(starts, sizes)
            ))
    else:
        parts = [_squared_errors(model, noise, gain, T, seed, 0, mc_samples)]
    values = np.concatenate(parts)

    lhs = float(np.mean(values))
    stderr = float(np.std(values, ddof=1) / np.sqrt(mc_samples)) if mc_samples > 1 else 0.0
    logger.info("duality check T=%d: lhs=%.6g rhs=%.6g stderr=%.3g", T, lhs, rhs, stderr)
    return DualityReport(
        lhs=lhs, rhs=rhs, adjoint_cost_sum=adjoint_sum, truncated_cost=truncated,
        stderr=stderr, mc_samples=mc_samples, horizon=T,
    )


# ==========================================
# 🧮 VALIDATION
# ==========================================

def finite_difference_gradient(func, L, step=None, points=5):
    """Entrywise centered differences of a scalar func(L); 3- or 5-point stencil."""
    L = np.atleast_2d(np.asarray(L, dtype=float))
    if points not in (3, 5):
        raise DomainError(f"points must be 3 or 5, got {points}")
    h = step if step is not None else 1e-5 * (1.0 + np.linalg.norm(L))
    logger.debug("finite differences: %d entries, h = %.3e, %d-point", L.size, h, points)

    grad = np.zeros_like(L)
    for idx in np.ndindex(L.shape):
        def at(offset):
            shifted = L.copy()
            shifted[idx] += offset
            return func(shifted)

        if points == 3:
            grad[idx] = (at(h) - at(-h)) / (2.0 * h)
        else:
            grad[idx] = (-at(2 * h) + 8.0 * at(h) - 8.0 * at(-h) + at(-2 * h)) / (12.0 * h)
    return grad
