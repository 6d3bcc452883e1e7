"""
Dense small-matrix primitives: spectral radius, discrete Lyapunov solves,
closed-loop power tables and the resolvent constant that bounds
||A_L^k|| <= C_L * r^(k+1).

All functions are pure; no module state is mutated.
"""

import logging
from dataclasses import dataclass

import numpy as np

from config import GRID_POINTS
from errors import (
    ConvergenceError,
    DiagnosticFailure,
    DimensionError,
    DomainError,
    InstabilityError,
)

logger = logging.getLogger(__name__)

SYMMETRY_TOL = 1e-10
# Below this a spectral radius is treated as exactly zero (nilpotent closed loop).
ZERO_RHO = 1e-12
FALLBACK_RADIUS = 0.5
CERTIFY_TOL = 1e-9


@dataclass(frozen=True)
class ResolventEstimate:
    c_value: float
    radius: float
    grid_points: int

    def __post_init__(self):
        if not self.c_value > 0:
            raise DomainError(f"resolvent constant must be positive, got {self.c_value}")
        if not 0.0 < self.radius < 1.0:
            raise DomainError(f"contour radius must lie in (0, 1), got {self.radius}")

    def bound(self, k):
        """C_L * r^(k+1), the certified bound on ||A_L^k||."""
        return self.c_value * self.radius ** (np.asarray(k) + 1)


# ==========================================
# 🧱 VALIDATION HELPERS
# ==========================================

def as_matrix(values, name="matrix", square=False):
    """Coerce to a finite 2-D float array. Scalars become 1x1, vectors become rows."""
    arr = np.atleast_2d(np.asarray(values, dtype=float))
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be 2-D, got shape {arr.shape}")
    if square and arr.shape[0] != arr.shape[1]:
        raise DimensionError(f"{name} must be square, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DomainError(f"{name} has non-finite entries")
    return arr


def as_vector(values, size, name="vector"):
    vec = np.asarray(values, dtype=float).reshape(-1)
    if vec.shape[0] != size:
        raise DimensionError(f"{name} must have {size} entries, got {vec.shape[0]}")
    if not np.all(np.isfinite(vec)):
        raise DomainError(f"{name} has non-finite entries")
    return vec


def symmetrize(M):
    return 0.5 * (M + M.T)


def check_symmetric(M, name="matrix", tol=SYMMETRY_TOL):
    gap = np.linalg.norm(M - M.T)
    if gap > tol * (1.0 + np.linalg.norm(M)):
        raise DomainError(f"{name} is not symmetric (||M - M^T||_F = {gap:.3e})")
    return symmetrize(M)


def min_eigenvalue(M):
    return float(np.linalg.eigvalsh(symmetrize(M))[0])


def max_eigenvalue(M):
    return float(np.linalg.eigvalsh(symmetrize(M))[-1])


def operator_norm(M):
    return float(np.linalg.norm(np.atleast_2d(M), 2))


def nuclear_norm(M):
    return float(np.linalg.norm(np.atleast_2d(M), "nuc"))


# ==========================================
# 📐 SPECTRAL QUANTITIES
# ==========================================

def spectral_radius(M):
    """Largest eigenvalue modulus, from the full (LAPACK QR) eigenvalue set."""
    M = as_matrix(M, "M", square=True)
    return float(np.max(np.abs(np.linalg.eigvals(M))))


def matrix_powers(F, k_max):
    """Stack of F^0 .. F^k_max with shape (k_max + 1, n, n)."""
    F = as_matrix(F, "F", square=True)
    n = F.shape[0]
    out = np.empty((k_max + 1, n, n))
    out[0] = np.eye(n)
    for k in range(1, k_max + 1):
        out[k] = out[k - 1] @ F
    return out


def solve_discrete_lyapunov(F, W, tol=1e-12, max_iter=200):
    """
    Unique X with X = F X F^T + W for Schur stable F.

    Doubling (Smith) iteration: X <- X + F_k X F_k^T, F_k <- F_k^2, stopped once the
    residual of the original equation drops below tol * (1 + ||W||_F).
    """
    F = as_matrix(F, "F", square=True)
    W = as_matrix(W, "W", square=True)
    if F.shape != W.shape:
        raise DimensionError(f"F {F.shape} and W {W.shape} must have the same shape")
    W = check_symmetric(W, "W")

    rho = spectral_radius(F)
    if rho >= 1.0:
        raise InstabilityError(f"Lyapunov equation needs rho(F) < 1, got {rho:.6f}")

    scale = 1.0 + np.linalg.norm(W)
    X = W.copy()
    Fk = F.copy()
    residual = np.inf
    for _ in range(max_iter):
        residual = np.linalg.norm(X - F @ X @ F.T - W)
        if residual <= tol * scale or not np.any(Fk):
            break
        X = symmetrize(X + Fk @ X @ Fk.T)
        Fk = Fk @ Fk

    residual = np.linalg.norm(X - F @ X @ F.T - W)
    if residual > 1e-10 * scale:
        raise ConvergenceError(
            f"Lyapunov doubling stalled at residual {residual:.3e} (rho(F) = {rho:.6f})"
        )
    return X


# ==========================================
# 🔁 RESOLVENT CONSTANT
# ==========================================

def _resolvent_max(A, radius, points):
    theta = 2.0 * np.pi * np.arange(points) / points
    z = radius * np.exp(1j * theta)
    n = A.shape[0]
    shifted = z[:, None, None] * np.eye(n)[None, :, :] - A[None, :, :]
    norms = np.linalg.norm(np.linalg.inv(shifted), ord=2, axis=(1, 2))
    return float(norms.max())


def contour_radius(A_L, fallback_radius=FALLBACK_RADIUS):
    rho = spectral_radius(A_L)
    if rho >= 1.0:
        raise InstabilityError(f"closed loop is not Schur stable (rho = {rho:.6f})")
    return (np.sqrt(rho) if rho > ZERO_RHO else fallback_radius), rho


def resolvent_constant(A_L, grid_points=GRID_POINTS, fallback_radius=FALLBACK_RADIUS,
                       k_check=50, max_refinements=3):
    """
    Grid estimate of C_L = max_theta ||(r e^{i theta} I - A_L)^{-1}|| with r = sqrt(rho(A_L)).

    The grid value is a lower bound of the supremum, so the estimate is refined (grid
    doubled) until it certifies ||A_L^k|| <= C_L r^(k+1) for k = 0..k_check.
    """
    A = as_matrix(A_L, "A_L", square=True)
    if grid_points < 64:
        raise DomainError(f"grid_points must be >= 64, got {grid_points}")
    radius, rho = contour_radius(A, fallback_radius)

    c_value = _resolvent_max(A, radius, grid_points)
    points = 2 * grid_points
    c_fine = _resolvent_max(A, radius, points)
    if abs(c_fine - c_value) >= 0.01 * c_value:
        logger.warning(
            "resolvent grid not resolved: C_L moved %.3e -> %.3e when doubling %d points",
            c_value, c_fine, grid_points,
        )
    c_value = max(c_value, c_fine)

    norms = np.linalg.norm(matrix_powers(A, k_check), ord=2, axis=(1, 2))
    exponents = np.arange(1, k_check + 2)
    refinements = 0
    while True:
        offending = np.nonzero(norms > c_value * radius ** exponents * (1.0 + CERTIFY_TOL))[0]
        if offending.size == 0:
            break
        if refinements == max_refinements:
            raise DiagnosticFailure(
                f"power bound still violated after refinement at k = {offending.tolist()}"
            )
        refinements += 1
        points *= 2
        c_value = max(c_value, _resolvent_max(A, radius, points))

    logger.debug("C_L = %.6g at r = %.6g (rho = %.6g, %d points)", c_value, radius, rho, points)
    return ResolventEstimate(c_value=c_value, radius=float(radius), grid_points=points)


# ==========================================
# ➕ DETERMINISTIC REDUCTIONS
# ==========================================

def pairwise_sum(items):
    """Index-ascending pairwise tree sum; the same order for any worker count."""
    items = list(items)
    if not items:
        raise DomainError("cannot sum an empty sequence")
    while len(items) > 1:
        paired = [items[i] + items[i + 1] for i in range(0, len(items) - 1, 2)]
        if len(items) % 2:
            paired.append(items[-1])
        items = paired
    return items[0]


def pairwise_mean(items):
    items = list(items)
    return pairwise_sum(items) / len(items)
