"""Agent dynamics, consensus gain synthesis and spectral condition checks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .linalg import DimensionError, as_matrix, mat_power_sum, spectral_radius

logger = logging.getLogger(__name__)

__all__ = [
    "ConsensusReport",
    "FeasibilityReport",
    "GainSchedule",
    "InputConstraint",
    "Plant",
    "SynthesisError",
    "check_consensus_condition",
    "check_feasibility_conditions",
    "step",
    "synthesize_gain",
]


class SynthesisError(ValueError):
    pass


@dataclass(frozen=True)
class Plant:
    """Discrete-time LTI plant ``x(t+1) = A x(t) + B u(t)``."""

    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        a = as_matrix(self.a, "A")
        b = np.array(self.b, dtype=float)
        if b.ndim == 1:
            b = b.reshape(-1, 1)
        b = as_matrix(b, "B")
        n = a.shape[0]
        if a.shape != (n, n):
            raise DimensionError(f"A must be square, got {a.shape}")
        if b.shape[0] != n:
            raise DimensionError(f"B must have {n} rows, got {b.shape}")
        for arr in (a, b):
            arr.setflags(write=False)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        if not self.is_stabilizable():
            raise ValueError("(A, B) is not stabilizable")

    @property
    def state_dim(self):
        return self.a.shape[0]

    @property
    def input_dim(self):
        return self.b.shape[1]

    def is_stabilizable(self, tol=1e-9):
        """PBH test on every eigenvalue outside the open unit disc."""
        n = self.state_dim
        for lam in np.linalg.eigvals(self.a):
            if abs(lam) < 1 - tol:
                continue
            pbh = np.hstack([self.a - lam * np.eye(n), self.b])
            if np.linalg.matrix_rank(pbh, tol=tol) < n:
                return False
        return True


@dataclass(frozen=True)
class InputConstraint:
    """Box ``lower <= u <= upper`` or Euclidean ball ``||u|| <= radius``."""

    kind: str
    lower: tuple = ()
    upper: tuple = ()
    radius: float = 0.0

    def __post_init__(self):
        if self.kind == "box":
            lo = np.asarray(self.lower, dtype=float)
            hi = np.asarray(self.upper, dtype=float)
            if lo.shape != hi.shape or lo.ndim != 1:
                raise ValueError("box bounds must be equal-length vectors")
            if np.any(lo > 0) or np.any(hi < 0):
                raise ValueError("input set must contain the origin")
            object.__setattr__(self, "lower", tuple(lo.tolist()))
            object.__setattr__(self, "upper", tuple(hi.tolist()))
        elif self.kind == "ball":
            if not self.radius > 0:
                raise ValueError("ball radius must be positive")
        else:
            raise ValueError(f"unknown input constraint kind {self.kind!r}")

    @classmethod
    def box(cls, lower, upper):
        return cls("box", tuple(np.atleast_1d(lower)), tuple(np.atleast_1d(upper)))

    @classmethod
    def ball(cls, radius):
        return cls("ball", radius=float(radius))

    def contains(self, u, tol=0.0):
        u = np.asarray(u, dtype=float)
        if self.kind == "box":
            return bool(np.all(u >= np.array(self.lower) - tol) and np.all(u <= np.array(self.upper) + tol))
        return bool(np.linalg.norm(u) <= self.radius + tol)

    def project(self, u):
        u = np.asarray(u, dtype=float)
        if self.kind == "box":
            return np.clip(u, self.lower, self.upper)
        norm = np.linalg.norm(u)
        return u if norm <= self.radius else u * (self.radius / norm)

    def violation(self, u):
        return float(np.linalg.norm(np.asarray(u, dtype=float) - self.project(u), np.inf))


@dataclass
class GainSchedule:
    current_k: np.ndarray
    lambda_used: float
    recompute_count: int = 0
    history: list = field(default_factory=list)


def synthesize_gain(plant, psi, r_weight, lambda_m):
    """``K = -(1/lambda_M) (B' Psi B + R)^-1 B' Psi A``."""
    if not lambda_m > 0:
        raise ValueError("lambda_m must be positive")
    psi = as_matrix(psi, "psi")
    r_weight = as_matrix(r_weight, "r_weight")
    a, b = plant.a, plant.b
    n, m = plant.state_dim, plant.input_dim
    if psi.shape != (n, n) or r_weight.shape != (m, m):
        raise DimensionError(
            f"psi must be {n}x{n} and R {m}x{m}, got {psi.shape} and {r_weight.shape}"
        )
    h = b.T @ psi @ b + r_weight
    if np.linalg.matrix_rank(h) < m:
        raise SynthesisError("B' Psi B + R is singular")
    return -np.linalg.solve(h, b.T @ psi @ a) / lambda_m


@dataclass(frozen=True)
class FeasibilityReport:
    rho_sum: float
    rho_closed_loop: float
    sum_ok: bool
    closed_loop_ok: bool

    @property
    def ok(self):
        return self.sum_ok and self.closed_loop_ok

    def as_dict(self):
        return {
            "rho_power_sum": self.rho_sum,
            "rho_A_K": self.rho_closed_loop,
            "power_sum_le_1": self.sum_ok,
            "A_K_schur": self.closed_loop_ok,
            "ok": self.ok,
        }


def check_feasibility_conditions(plant, k_gain, n_horizon):
    """Spectral conditions on ``A_K = A + B K`` used for recursive feasibility."""
    k_gain = as_matrix(k_gain, "k_gain")
    a_k = plant.a + plant.b @ k_gain
    rho_sum = spectral_radius(mat_power_sum(a_k, plant.b, k_gain, n_horizon))
    rho_cl = spectral_radius(a_k)
    report = FeasibilityReport(rho_sum, rho_cl, rho_sum <= 1.0, rho_cl < 1.0)
    if not report.ok:
        logger.warning("recursive feasibility not certified: %s", report.as_dict())
    return report


@dataclass(frozen=True)
class ConsensusReport:
    eigenvalues: tuple
    radii: tuple

    @property
    def ok(self):
        return bool(self.radii) and all(r < 1.0 for r in self.radii)

    def as_dict(self):
        return {
            "laplacian_eigenvalues": list(self.eigenvalues),
            "radii": list(self.radii),
            "ok": self.ok,
        }


def check_consensus_condition(plant, k_gain, laplacian_eigs):
    """``rho(A + lambda_i B K) < 1`` for every nonzero Laplacian eigenvalue."""
    k_gain = as_matrix(k_gain, "k_gain")
    bk = plant.b @ k_gain
    radii = tuple(spectral_radius(plant.a + lam * bk) for lam in laplacian_eigs)
    return ConsensusReport(tuple(float(x) for x in laplacian_eigs), radii)


def step(plant, x, u):
    x = np.asarray(x, dtype=float)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if x.shape != (plant.state_dim,) or u.shape != (plant.input_dim,):
        raise DimensionError(f"state/input shapes {x.shape}/{u.shape} do not match plant")
    return plant.a @ x + plant.b @ u
