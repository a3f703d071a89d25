"""Per-agent logic: assumed trajectories, attack detection, DMPC assembly.

Index conventions (horizon N):

* ``TrajectoryBundle.states`` holds x(t+k|t) for k = 0..N+1. The last entry
  is the extended state obtained by applying u(t+N|t) once more.
* ``AssumedTrajectory.states`` holds x_hat(t+k|t) for k = 0..N.
* corrections and inputs hold k = 0..N.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .solver import Ball, Box, Constraint, QpProblem

__all__ = [
    "AssumedTrajectory",
    "DetectionVerdict",
    "DmpcProblem",
    "ProtocolError",
    "TrajectoryBundle",
    "apply_input",
    "assemble_dmpc",
    "candidate_no_attack",
    "candidate_post_attack",
    "detect",
    "initial_assumed",
    "make_assumed",
]

NORMAL = "normal"
ADVERSARIAL = "adversarial"


class ProtocolError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrajectoryBundle:
    origin_time: int
    states: np.ndarray
    inputs: np.ndarray
    corrections: np.ndarray

    @property
    def horizon(self):
        return len(self.inputs) - 1


@dataclass(frozen=True)
class AssumedTrajectory:
    origin_time: int
    states: np.ndarray

    @property
    def horizon(self):
        return len(self.states) - 1


@dataclass(frozen=True)
class DetectionVerdict:
    broadcaster: int
    receiver: int
    time: int
    verdict: str
    max_deviation: float
    offending_index: int | None = None

    @property
    def adversarial(self):
        return self.verdict == ADVERSARIAL


def initial_assumed(a, x0, horizon):
    """x_hat(k|0) = A^k x(0) for k = 0..N."""
    states = [np.asarray(x0, dtype=float)]
    for _ in range(horizon):
        states.append(a @ states[-1])
    return AssumedTrajectory(0, np.array(states))


def make_assumed(prev_optimal):
    """Shift an optimal bundle by one step to get the next broadcast."""
    n_states = prev_optimal.horizon + 2
    if len(prev_optimal.states) != n_states:
        raise ProtocolError("bundle is missing the extended state x(t+N+1|t)")
    return AssumedTrajectory(prev_optimal.origin_time + 1, prev_optimal.states[1:].copy())


def detect(received, previous_broadcast, eta, broadcaster=-1, receiver=-1):
    """Compare a broadcast with the one received a round earlier.

    Entry k of ``received`` and entry k+1 of ``previous_broadcast`` predict the
    same instant; any gap larger than ``eta`` flags the link. A gap of exactly
    ``eta`` is still normal.
    """
    if received.origin_time != previous_broadcast.origin_time + 1:
        raise ProtocolError(
            f"broadcasts are not consecutive: {previous_broadcast.origin_time} -> "
            f"{received.origin_time}"
        )
    if received.states.shape != previous_broadcast.states.shape:
        raise ProtocolError("horizon mismatch between consecutive broadcasts")
    gaps = np.linalg.norm(received.states[:-1] - previous_broadcast.states[1:], axis=1)
    k = int(np.argmax(gaps))
    worst = float(gaps[k])
    if worst > eta:
        return DetectionVerdict(broadcaster, receiver, received.origin_time, ADVERSARIAL, worst, k)
    return DetectionVerdict(broadcaster, receiver, received.origin_time, NORMAL, worst)


@dataclass
class DmpcProblem:
    """A QP plus the affine maps that turn its solution into trajectories.

    ``x_map @ c + x_off`` gives the stacked states x(t+k|t), k = 0..N+1, and
    ``u_map @ c + u_off`` the inputs u(t+k|t), k = 0..N.
    """

    qp: QpProblem
    origin_time: int
    x_map: np.ndarray
    x_off: np.ndarray
    u_map: np.ndarray
    u_off: np.ndarray
    a: np.ndarray
    b: np.ndarray
    k_gain: np.ndarray
    degree: float
    neighbor_sum: np.ndarray
    input_constraint: object

    @property
    def n(self):
        return self.a.shape[0]

    @property
    def m(self):
        return self.b.shape[1]

    def bundle(self, c):
        c = np.asarray(c, dtype=float)
        states = (self.x_map @ c + self.x_off).reshape(-1, self.n)
        inputs = (self.u_map @ c + self.u_off).reshape(-1, self.m)
        return TrajectoryBundle(self.origin_time, states, inputs, c.reshape(-1, self.m))

    def kappa(self, states):
        """Consensus term K sum_j a_ij (x_k - x_hat_j,k) along ``states`` (k = 0..N)."""
        states = np.asarray(states, dtype=float)[: len(self.neighbor_sum)]
        return (self.degree * states - self.neighbor_sum) @ self.k_gain.T

    def corrections_for_inputs(self, inputs):
        """Corrections that reproduce a given input sequence from x(t|t)."""
        inputs = np.asarray(inputs, dtype=float)
        x = self.x_off[: self.n].copy()
        out = []
        for u in inputs:
            out.append(u - self.k_gain @ (self.degree * x - self.neighbor_sum[len(out)]))
            x = self.a @ x + self.b @ u
        return np.concatenate(out)


def assemble_dmpc(
    a,
    b,
    self_state,
    assumed_self,
    assumed_neighbors,
    weights,
    k_gain,
    input_constraint,
    eta,
    psi,
    state_box=None,
    enforce_tube=True,
    tube_margin=0.0,
    tighten_inputs=False,
):
    """Build the DMPC problem for one agent.

    ``assumed_neighbors`` and ``weights`` are dicts keyed by neighbor id; only
    neighbors with positive weight take part. The predicted dynamics are
    folded into affine maps of the stacked corrections, leaving pure set
    constraints for the solver.
    """
    if assumed_self is None:
        raise ProtocolError("assumed trajectory of the agent itself is missing")
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    k_gain = np.atleast_2d(np.asarray(k_gain, dtype=float))
    n, m = b.shape
    horizon = assumed_self.horizon
    n_var = (horizon + 1) * m
    t0 = assumed_self.origin_time

    degree = 0.0
    nsum = np.zeros((horizon + 1, n))
    for j, traj in assumed_neighbors.items():
        w = float(weights.get(j, 0.0))
        if w <= 0:
            continue
        if traj.origin_time != t0 or traj.horizon != horizon:
            raise ProtocolError(f"neighbor {j} trajectory does not match origin/horizon")
        degree += w
        nsum += w * traj.states

    x_map = np.zeros((horizon + 2, n, n_var))
    x_off = np.zeros((horizon + 2, n))
    u_map = np.zeros((horizon + 1, m, n_var))
    u_off = np.zeros((horizon + 1, m))
    x_off[0] = np.asarray(self_state, dtype=float)
    for k in range(horizon + 1):
        u_map[k] = degree * k_gain @ x_map[k]
        u_map[k][:, k * m:(k + 1) * m] += np.eye(m)
        u_off[k] = k_gain @ (degree * x_off[k] - nsum[k])
        x_map[k + 1] = a @ x_map[k] + b @ u_map[k]
        x_off[k + 1] = a @ x_off[k] + b @ u_off[k]

    cons = []
    ic = input_constraint
    shrink = eta * np.linalg.norm(k_gain, axis=1) if tighten_inputs else np.zeros(m)
    for k in range(horizon + 1):
        if ic.kind == "box":
            s = Box(np.array(ic.lower) + shrink, np.array(ic.upper) - shrink)
        else:
            s = Ball(np.zeros(m), ic.radius - (eta * np.linalg.norm(k_gain, 2) if tighten_inputs else 0.0))
        cons.append(Constraint(u_map[k], u_off[k], s, f"input[{k}]"))
    if enforce_tube:
        radius = eta - tube_margin
        for k in range(horizon + 1):
            cons.append(Constraint(x_map[k], x_off[k], Ball(assumed_self.states[k], radius), f"tube[{k}]"))
    if state_box is not None:
        lo, hi = (np.asarray(v, dtype=float) for v in state_box)
        rows = np.flatnonzero(np.isfinite(lo) | np.isfinite(hi))
        if rows.size:
            for k in range(1, horizon + 1):
                cons.append(
                    Constraint(x_map[k][rows], x_off[k][rows], Box(lo[rows], hi[rows]), f"state[{k}]")
                )
    qp = QpProblem(horizon, m, psi, cons)
    return DmpcProblem(
        qp, t0,
        x_map.reshape(-1, n_var), x_off.reshape(-1),
        u_map.reshape(-1, n_var), u_off.reshape(-1),
        a, b, k_gain, degree, nsum, ic,
    )


def candidate_no_attack(prev_corrections):
    """Drop the first correction and append a zero."""
    prev = np.asarray(prev_corrections, dtype=float)
    return np.concatenate([prev[1:], np.zeros_like(prev[:1])])


def candidate_post_attack(prev_optimal_inputs, new_kappa, input_constraint, terminal="project"):
    """Corrections that replay the previous optimal inputs under a new kappa.

    ``prev_optimal_inputs`` is u*(t+k|t), k = 0..N and ``new_kappa`` the
    consensus term of the new problem along the replayed trajectory,
    k = 0..N. With ``terminal="project"`` the last input is the admissible
    point closest to kappa; with ``"repeat"`` it repeats u*(t+N|t), which
    reproduces the extended state of the previous bundle exactly.
    """
    u = np.asarray(prev_optimal_inputs, dtype=float)
    kap = np.asarray(new_kappa, dtype=float)
    head = u[1:] - kap[:-1]
    if terminal == "project":
        tail = input_constraint.project(kap[-1]) - kap[-1]
    elif terminal == "repeat":
        tail = u[-1] - kap[-1]
    else:
        raise ValueError(f"unknown terminal rule {terminal!r}")
    return np.vstack([head, tail[None, :]])


def apply_input(bundle):
    return bundle.inputs[0].copy()
