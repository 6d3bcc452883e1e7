"""
Kalman machinery: the time-varying filter recursion, the steady-state (DARE) gain used as
the ground-truth oracle, and the fixed-gain output predictor the learner differentiates.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from errors import ConvergenceError, DimensionError, InstabilityError, NumericalError
from linalg_core import as_matrix, as_vector, spectral_radius, symmetrize

logger = logging.getLogger(__name__)

# Reciprocal condition number below which S = H P H^T + R is treated as singular.
SINGULAR_RCOND = 1e-14


@dataclass(frozen=True)
class GainMatrix:
    L: np.ndarray
    closed_loop: np.ndarray
    rho: float

    @classmethod
    def build(cls, A, H, L):
        """Gain L with A_L = A - L H and its spectral radius cached."""
        A = as_matrix(A, "A", square=True)
        H = as_matrix(H, "H")
        L = as_matrix(L, "L")
        n, m = A.shape[0], H.shape[0]
        if L.shape != (n, m):
            # a flat vector for a single-output system is the common mistake
            if L.size == n * m and m == 1:
                L = L.reshape(n, 1)
            else:
                raise DimensionError(f"L must be {n}x{m}, got {L.shape}")
        closed_loop = A - L @ H
        return cls(L=L, closed_loop=closed_loop, rho=spectral_radius(closed_loop))

    @property
    def is_stabilizing(self):
        return self.rho < 1.0

    def require_stabilizing(self, what="gain"):
        if not self.is_stabilizing:
            raise InstabilityError(f"{what} is not stabilizing (rho(A_L) = {self.rho:.6f})")
        return self


def as_gain(A, H, L):
    """Accept either a GainMatrix or a raw n x m array."""
    if isinstance(L, GainMatrix):
        return L
    return GainMatrix.build(A, H, L)


@dataclass(frozen=True)
class FilterState:
    xhat: np.ndarray
    P: np.ndarray
    t: int = 0
    gain: np.ndarray = field(default=None, compare=False)


@dataclass(frozen=True)
class KalmanRun:
    """Predictions x^(0..T+1), covariances P(0..T+1) and gains L(0..T) over a trajectory."""
    xhat: np.ndarray
    P: np.ndarray
    gains: np.ndarray


# ==========================================
# ⏱️ TIME-VARYING FILTER
# ==========================================

def _innovation_covariance(H, P, R):
    S = symmetrize(H @ P @ H.T + R)
    if np.linalg.cond(S) * SINGULAR_RCOND > 1.0:
        raise NumericalError("innovation covariance S = H P H^T + R is singular")
    return S


def kf_step(model, state, y):
    """
    One predictor step:

        L(t)   = A P H^T S^-1,   S = H P H^T + R
        x(t+1) = A x + L(t) (y - H x)
        P(t+1) = A P A^T + Q - A P H^T S^-1 H P A^T
    """
    A, H = model.A, model.H
    y = as_vector(y, model.m, "y")
    P = state.P
    S = _innovation_covariance(H, P, model.R)

    # L S = A P H^T  =>  L = (S^-1 H P A^T)^T, S and P symmetric
    gain = np.linalg.solve(S, H @ P @ A.T).T
    xhat = A @ state.xhat + gain @ (y - H @ state.xhat)
    P_next = symmetrize(A @ P @ A.T + model.Q - gain @ S @ gain.T)
    return FilterState(xhat=xhat, P=P_next, t=state.t + 1, gain=gain)


def run_kalman_filter(model, traj, m0=None, P0=None):
    outputs = np.asarray(traj.outputs, dtype=float)
    if outputs.ndim != 2 or outputs.shape[1] != model.m:
        raise DimensionError(f"outputs must have shape (T+1, {model.m}), got {outputs.shape}")

    state = FilterState(
        xhat=model.m0.copy() if m0 is None else as_vector(m0, model.n, "m0"),
        P=model.P0.copy() if P0 is None else as_matrix(P0, "P0", square=True),
    )
    xs, Ps, gains = [state.xhat], [state.P], []
    for y in outputs:
        state = kf_step(model, state, y)
        xs.append(state.xhat)
        Ps.append(state.P)
        gains.append(state.gain)
    return KalmanRun(xhat=np.array(xs), P=np.array(Ps), gains=np.array(gains))


# ==========================================
# 🎯 STEADY-STATE ORACLE
# ==========================================

def steady_state_gain(model, tol=1e-12, max_iter=100000, method="iteration"):
    """
    Steady-state gain L_inf = A P_inf H^T (H P_inf H^T + R)^-1.

    `iteration` runs the Riccati recursion from P0 until successive updates differ by at
    most tol * (1 + ||P||_F); `scipy` hands the DARE to scipy.linalg.solve_discrete_are.
    Returns (GainMatrix, P_inf).
    """
    model.require_positive_definite_R()
    A, H, Q, R = model.A, model.H, model.Q, model.R

    if method == "scipy":
        P = symmetrize(scipy.linalg.solve_discrete_are(A.T, H.T, Q, R))
    elif method == "iteration":
        P = model.P0.copy()
        for i in range(max_iter):
            S = _innovation_covariance(H, P, R)
            K = np.linalg.solve(S, H @ P @ A.T).T
            P_next = symmetrize(A @ P @ A.T + Q - K @ S @ K.T)
            residual = np.linalg.norm(P_next - P)
            P = P_next
            if residual <= tol * (1.0 + np.linalg.norm(P)):
                logger.debug("Riccati recursion converged in %d iterations", i + 1)
                break
        else:
            raise ConvergenceError(
                f"Riccati recursion did not converge in {max_iter} iterations "
                f"(last update {residual:.3e})"
            )
    else:
        raise ValueError(f"unknown method {method!r}")

    S = _innovation_covariance(H, P, R)
    L = np.linalg.solve(S, H @ P @ A.T).T
    gain = GainMatrix.build(A, H, L).require_stabilizing("steady-state Kalman gain")
    return gain, P


def dare_residual(model, P):
    A, H = model.A, model.H
    S = H @ P @ H.T + model.R
    rhs = A @ P @ A.T + model.Q - A @ P @ H.T @ np.linalg.solve(S, H @ P @ A.T)
    return float(np.linalg.norm(P - rhs))


# ==========================================
# 🔮 FIXED-GAIN PREDICTION
# ==========================================

def fixed_gain_states(A, H, L, outputs, m0=None):
    """x^(0..T) from x^(t+1) = A_L x^(t) + L y(t), x^(0) = m0 (zero by default)."""
    gain = as_gain(A, H, L)
    outputs = np.asarray(outputs, dtype=float)
    n, m = gain.L.shape
    if outputs.ndim != 2 or outputs.shape[1] != m:
        raise DimensionError(f"outputs must have shape (T+1, {m}), got {outputs.shape}")

    T = outputs.shape[0] - 1
    A_L, Lm = gain.closed_loop, gain.L
    xs = np.empty((T + 1, n))
    xs[0] = 0.0 if m0 is None else as_vector(m0, n, "m0")
    for t in range(T):
        xs[t + 1] = A_L @ xs[t] + Lm @ outputs[t]
    return xs


def fixed_gain_predict(A, H, L, traj, m0=None):
    """
    y^_L(T) = H x^(T) for the constant-gain predictor; returns (yhat, error).
    Touches only A and H.
    """
    H = as_matrix(H, "H")
    outputs = traj.outputs if hasattr(traj, "outputs") else traj
    xs = fixed_gain_states(A, H, L, outputs, m0)
    yhat = H @ xs[-1]
    return yhat, np.asarray(outputs, dtype=float)[-1] - yhat
