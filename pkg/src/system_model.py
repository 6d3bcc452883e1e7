"""
Ground-truth LTI model and the bounded-noise trajectory simulator.

    x(t+1) = A x(t) + xi(t)        xi(t)  ~ Q, ||xi(t)||  <= kappa_xi
    y(t)   = H x(t) + omega(t)     omega(t) ~ R, ||omega(t)|| <= kappa_omega
    x(0)   ~ (m0, P0),             ||x(0)|| <= kappa_xi

Q and R are only ever read here (and by the oracle paths); the learner sees outputs.
"""

import csv
import hashlib
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum

import numpy as np

from errors import DimensionError, DomainError
from linalg_core import as_matrix, as_vector, check_symmetric, min_eigenvalue

logger = logging.getLogger(__name__)

PSD_TOL = 1e-12
MAX_REDRAWS = 1000
DEFAULT_SIGMAS = 6.0


class NoiseFamily(str, Enum):
    TRUNCATED_GAUSSIAN = "truncated_gaussian"
    SCALED_UNIFORM = "scaled_uniform"


def derive_seed(seed, *path):
    """
    64-bit sub-seed: first 8 bytes (little endian) of BLAKE2b over "seed:i:j:...".
    Any reimplementation hashing the same string reproduces the seed tree.
    """
    key = ":".join(str(int(p)) for p in (seed,) + path).encode("ascii")
    return int.from_bytes(hashlib.blake2b(key, digest_size=8).digest(), "little")


# ==========================================
# 🏗️ MODEL
# ==========================================

@dataclass(frozen=True)
class SystemModel:
    A: np.ndarray
    H: np.ndarray
    Q: np.ndarray
    R: np.ndarray
    P0: np.ndarray
    m0: np.ndarray = None
    check_observable: bool = True

    def __post_init__(self):
        A = as_matrix(self.A, "A", square=True)
        n = A.shape[0]
        H = as_matrix(self.H, "H")
        if H.shape[1] != n:
            raise DimensionError(f"H must have {n} columns, got shape {H.shape}")
        m = H.shape[0]

        Q = self._covariance(self.Q, "Q", n)
        R = self._covariance(self.R, "R", m)
        P0 = self._covariance(self.P0, "P0", n)
        m0 = np.zeros(n) if self.m0 is None else as_vector(self.m0, n, "m0")

        for name, value in (("A", A), ("H", H), ("Q", Q), ("R", R), ("P0", P0), ("m0", m0)):
            object.__setattr__(self, name, value)

        if self.check_observable and not self.is_observable():
            raise DomainError("(A, H) is not observable")
        if np.any(m0):
            logger.warning("nonzero m0: the error-form and truncation identities assume m0 = 0")

    @staticmethod
    def _covariance(values, name, size):
        M = as_matrix(values, name, square=True)
        if M.shape != (size, size):
            raise DimensionError(f"{name} must be {size}x{size}, got {M.shape}")
        M = check_symmetric(M, name)
        if min_eigenvalue(M) < -PSD_TOL * (1.0 + np.abs(M).max()):
            raise DomainError(f"{name} must be positive semidefinite")
        return M

    @property
    def n(self):
        return self.A.shape[0]

    @property
    def m(self):
        return self.H.shape[0]

    def observability_matrix(self):
        blocks = [self.H]
        for _ in range(self.n - 1):
            blocks.append(blocks[-1] @ self.A)
        return np.vstack(blocks)

    def is_observable(self):
        return np.linalg.matrix_rank(self.observability_matrix()) == self.n

    def require_positive_definite_R(self):
        if min_eigenvalue(self.R) <= 0.0:
            raise DomainError("R must be positive definite for this operation")

    def with_covariances(self, Q, R):
        """Same (A, H, P0, m0) with placeholder covariances; used by surrogate designs."""
        return SystemModel(self.A, self.H, Q, R, self.P0, self.m0, self.check_observable)


def mass_spring_model(omega=1.0, dt=0.1, process_variance=0.1, measurement_variance=0.1,
                      initial_variance=0.05, A=None, H=None):
    """
    Undamped mass-spring oscillator sampled at dt (exact discretization), position measured.
    A and H are overridable; the covariances are isotropic.
    """
    if A is None:
        c, s = np.cos(omega * dt), np.sin(omega * dt)
        A = [[c, s / omega], [-omega * s, c]]
    if H is None:
        H = [[1.0, 0.0]]
    A = as_matrix(A, "A", square=True)
    H = as_matrix(H, "H")
    n, m = A.shape[0], H.shape[0]
    return SystemModel(
        A=A,
        H=H,
        Q=process_variance * np.eye(n),
        R=measurement_variance * np.eye(m),
        P0=initial_variance * np.eye(n),
    )


# ==========================================
# 🎲 NOISE
# ==========================================

@dataclass(frozen=True)
class NoiseConfig:
    kappa_xi: float
    kappa_omega: float
    family: NoiseFamily = NoiseFamily.TRUNCATED_GAUSSIAN

    def __post_init__(self):
        if not (self.kappa_xi > 0 and self.kappa_omega > 0):
            raise DomainError("noise bounds kappa_xi and kappa_omega must be positive")
        object.__setattr__(self, "family", NoiseFamily(self.family))

    @classmethod
    def for_model(cls, model, family=NoiseFamily.TRUNCATED_GAUSSIAN, sigmas=DEFAULT_SIGMAS):
        """Bounds at `sigmas` nominal standard deviations (sqrt of the covariance trace)."""
        spread_xi = np.sqrt(max(np.trace(model.Q), np.trace(model.P0)))
        spread_omega = np.sqrt(np.trace(model.R))
        kappa_xi = sigmas * spread_xi + np.linalg.norm(model.m0)
        kappa_omega = sigmas * spread_omega
        return cls(kappa_xi=kappa_xi or 1.0, kappa_omega=kappa_omega or 1.0, family=family)


def psd_sqrt(cov):
    """Symmetric square root via eigh, eigenvalues taken in descending order."""
    vals, vecs = np.linalg.eigh(cov)
    order = np.argsort(vals)[::-1]
    vals = np.clip(vals[order], 0.0, None)
    vecs = vecs[:, order]
    return (vecs * np.sqrt(vals)) @ vecs.T


def draw_noise(rng, cov, count, kappa, family, mean=None):
    """`count` draws with covariance `cov` (nominally) and norm <= kappa surely."""
    cov = np.atleast_2d(cov)
    d = cov.shape[0]
    center = np.zeros(d) if mean is None else np.asarray(mean, dtype=float)
    if np.linalg.norm(center) > kappa:
        raise DomainError(f"mean norm {np.linalg.norm(center):.3g} exceeds bound {kappa:.3g}")
    B = psd_sqrt(cov)
    family = NoiseFamily(family)

    if family is NoiseFamily.TRUNCATED_GAUSSIAN:
        draws = rng.standard_normal((count, d)) @ B.T + center
        bad = np.linalg.norm(draws, axis=1) > kappa
        redraws = 0
        while bad.any():
            redraws += 1
            if redraws > MAX_REDRAWS:
                raise DomainError(f"bound kappa = {kappa:.3g} too tight for the covariance")
            draws[bad] = rng.standard_normal((int(bad.sum()), d)) @ B.T + center
            bad = np.linalg.norm(draws, axis=1) > kappa
        if redraws > 20:
            logger.warning("truncated-gaussian sampling needed %d redraw rounds", redraws)
        return draws

    # Unit-variance uniform coordinates; anything outside the ball is pulled onto it.
    u = rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), size=(count, d))
    draws = u @ B.T + center
    norms = np.linalg.norm(draws, axis=1)
    over = norms > kappa
    draws[over] *= (kappa * (1.0 - 1e-12) / norms[over])[:, None]
    return draws


# ==========================================
# 📈 TRAJECTORIES
# ==========================================

@dataclass(frozen=True)
class Trajectory:
    outputs: np.ndarray
    states: np.ndarray = None
    process_noise: np.ndarray = None
    measurement_noise: np.ndarray = None
    seed: int = None

    @property
    def horizon(self):
        return self.outputs.shape[0] - 1

    @property
    def has_noise_record(self):
        return self.states is not None and self.process_noise is not None \
            and self.measurement_noise is not None

    def to_csv(self, path):
        m = self.outputs.shape[1]
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f)
            writer.writerow(["t"] + [f"y_{i + 1}" for i in range(m)])
            for t, row in enumerate(self.outputs):
                writer.writerow([t] + [repr(float(v)) for v in row])
        return path


def simulate(model, noise, T, seed):
    """One trajectory y(0..T). Draw order is x0, xi(0..T-1), omega(0..T)."""
    if T < 1:
        raise DomainError(f"horizon T must be >= 1, got {T}")
    rng = np.random.default_rng(seed)

    x0 = draw_noise(rng, model.P0, 1, noise.kappa_xi, noise.family, mean=model.m0)[0]
    xi = draw_noise(rng, model.Q, T, noise.kappa_xi, noise.family)
    omega = draw_noise(rng, model.R, T + 1, noise.kappa_omega, noise.family)

    A = model.A
    states = np.empty((T + 1, model.n))
    states[0] = x0
    for t in range(T):
        states[t + 1] = A @ states[t] + xi[t]
    outputs = states @ model.H.T + omega

    return Trajectory(outputs=outputs, states=states, process_noise=xi,
                      measurement_noise=omega, seed=seed)


def iter_batch(model, noise, T, M, seed):
    """Lazily yields the same trajectories as make_batch (one sub-seed per index)."""
    if M < 1:
        raise DomainError(f"batch count M must be >= 1, got {M}")
    for i in range(M):
        yield simulate(model, noise, T, derive_seed(seed, i))


def make_batch(model, noise, T, M, seed, workers=1):
    if M < 1:
        raise DomainError(f"batch count M must be >= 1, got {M}")
    seeds = [derive_seed(seed, i) for i in range(M)]
    if workers > 1 and M > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda s: simulate(model, noise, T, s), seeds))
    return [simulate(model, noise, T, s) for s in seeds]
