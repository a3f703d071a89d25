"""ADMM solver for the small constrained QPs of the DMPC step.

The decision vector ``c`` stacks the N+1 input corrections. Every constrained
quantity is affine in ``c`` (``q = G c + h``) and must lie in a box or a
Euclidean ball, so the problem is

    minimize    sum_k c_k' Psi c_k
    subject to  G_j c + h_j in S_j        for every constraint j

ADMM splits ``z = G c + h`` and alternates a cached linear solve in ``c`` with
exact projections of ``z``. Rows are equilibrated per constraint block before
iterating; residuals are always reported in the original units.

Whenever the set of constraints that ``z`` sits on changes, the solver tries
to polish: it solves the KKT equations with that set held active (Newton
steps for active balls) and stops as soon as the result is feasible, has
correctly signed multipliers and is stationary, all to ``eps_abs``. A
failed attempt is refined a few times by releasing wrongly signed or
redundant constraints and adding violated ones. A nonzero dual warm start
names a guessed active set, which is polished before the first iteration.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace

import numpy as np
from numba import njit

from .linalg import DimensionError

logger = logging.getLogger(__name__)

__all__ = [
    "Ball",
    "Box",
    "Constraint",
    "QpProblem",
    "QpSolution",
    "SolverSettings",
    "project_ball",
    "project_box",
    "solve",
]

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
MAX_ITER = "max-iter"


def project_box(v, lower, upper):
    return np.minimum(np.maximum(v, lower), upper)


def project_ball(v, center, radius):
    if radius < 0:
        raise ValueError("radius must be non-negative")
    v = np.asarray(v, dtype=float)
    d = v - center
    dist = np.linalg.norm(d)
    if dist <= radius:
        return v
    return center + (radius / dist) * d


@dataclass(frozen=True)
class Box:
    lower: np.ndarray
    upper: np.ndarray

    @property
    def dim(self):
        return len(self.lower)

    def project(self, v):
        return project_box(v, self.lower, self.upper)


@dataclass(frozen=True)
class Ball:
    center: np.ndarray
    radius: float

    @property
    def dim(self):
        return len(self.center)

    def project(self, v):
        return project_ball(v, self.center, self.radius)


@dataclass(frozen=True)
class Constraint:
    """``g @ c + h`` must lie in ``set``."""

    g: np.ndarray
    h: np.ndarray
    set: Box | Ball
    label: str = ""

    def value(self, c):
        return self.g @ c + self.h

    def violation(self, c):
        q = self.value(c)
        return float(np.linalg.norm(q - self.set.project(q), np.inf))


@dataclass
class QpProblem:
    horizon: int
    input_dim: int
    psi: np.ndarray
    constraints: list = field(default_factory=list)

    def __post_init__(self):
        self.psi = np.atleast_2d(np.asarray(self.psi, dtype=float))
        m = self.input_dim
        if self.psi.shape != (m, m):
            raise DimensionError(f"psi must be {m}x{m}")
        try:
            np.linalg.cholesky(self.psi)
        except np.linalg.LinAlgError:
            raise ValueError("psi must be positive definite") from None
        for con in self.constraints:
            if con.g.shape != (con.set.dim, self.n_var) or con.h.shape != (con.set.dim,):
                raise DimensionError(f"constraint {con.label!r} has inconsistent shapes")

    @property
    def n_var(self):
        return (self.horizon + 1) * self.input_dim

    def cost(self, c):
        c = np.asarray(c, dtype=float).reshape(-1, self.input_dim)
        return float(np.einsum("ki,ij,kj->", c, self.psi, c))

    def max_violation(self, c):
        if not self.constraints:
            return 0.0
        return max(con.violation(c) for con in self.constraints)


@dataclass(frozen=True)
class SolverSettings:
    rho: float = 50.0
    alpha: float = 1.6
    sigma: float = 1e-9
    eps_abs: float = 1e-8
    max_iter: int = 20_000
    stall_iter: int = 2_000
    check_every: int = 10
    adaptive_rho: bool = False
    adapt_every: int = 50
    polish: bool = True

    def updated(self, **kw):
        return replace(self, **kw)


@dataclass
class QpSolution:
    """Result of :func:`solve`.

    ``duals`` stacks one multiplier per constraint row, in constraint order,
    skipping constraints whose ``g`` is identically zero.
    """

    c_star: np.ndarray
    status: str
    primal_residual: float
    dual_residual: float
    iterations: int
    cost: float
    duals: np.ndarray | None = None

    @property
    def optimal(self):
        return self.status == OPTIMAL


class _Compiled:
    """Stacked, row-scaled form of a QpProblem.

    Every row carries box bounds (infinite for ball rows); ball blocks are
    listed by start row, dimension and radius with their centers stored in
    the row-aligned ``center`` vector.
    """

    def __init__(self, qp):
        n = qp.n_var
        self.p = 2.0 * np.kron(np.eye(qp.horizon + 1), qp.psi)
        cons = qp.constraints
        if not cons:
            self._empty(n)
            return
        sizes = np.array([len(c.h) for c in cons])
        starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        g = np.vstack([c.g for c in cons])
        h = np.concatenate([c.h for c in cons])
        norms = np.sqrt(np.einsum("ij,ij->i", g, g))
        block_max = np.maximum.reduceat(norms, starts)
        live = block_max > 0
        # constant constraints: nothing to optimise, just check them
        self.const_violation = max(
            (c.violation(np.zeros(n)) for c, ok in zip(cons, live) if not ok), default=0.0
        )
        is_ball = np.array([isinstance(c.set, Ball) for c in cons])
        row_block = np.repeat(np.arange(len(cons)), sizes)
        row_live = live[row_block]
        row_ball = is_ball[row_block]
        scale = np.where(row_ball, 1.0 / np.where(live, block_max, 1.0)[row_block],
                         1.0 / np.where(norms > 0, norms, 1.0))
        lo = np.full(len(h), -np.inf)
        hi = np.full(len(h), np.inf)
        center = np.zeros(len(h))
        ball_start, ball_dim, ball_rad = [], [], []
        kept = np.cumsum(row_live) - row_live  # row index after dropping dead blocks
        for b, c in enumerate(cons):
            if not live[b]:
                continue
            sl = slice(starts[b], starts[b] + sizes[b])
            if is_ball[b]:
                center[sl] = c.set.center * scale[starts[b]]
                ball_start.append(kept[starts[b]])
                ball_dim.append(sizes[b])
                ball_rad.append(c.set.radius * scale[starts[b]])
            else:
                lo[sl] = c.set.lower * scale[sl]
                hi[sl] = c.set.upper * scale[sl]
        self.g = np.ascontiguousarray(g[row_live] * scale[row_live, None])
        self.h = h[row_live] * scale[row_live]
        self.scale = scale[row_live]
        self.lo, self.hi, self.center = lo[row_live], hi[row_live], center[row_live]
        self.n_rows = len(self.h)
        self.ball_start = np.array(ball_start, dtype=np.int64)
        self.ball_dim = np.array(ball_dim, dtype=np.int64)
        self.ball_rad = np.array(ball_rad, dtype=float)

    def _empty(self, n):
        self.n_rows = 0
        self.g = np.zeros((0, n))
        self.h = self.scale = self.lo = self.hi = self.center = np.zeros(0)
        self.ball_start = self.ball_dim = np.zeros(0, dtype=np.int64)
        self.ball_rad = np.zeros(0)
        self.const_violation = 0.0

    def project(self, v):
        return _project(v, self.lo, self.hi, self.center, self.ball_start, self.ball_dim, self.ball_rad)


@njit(cache=True, nogil=True)
def _project(v, lo, hi, center, ball_start, ball_dim, ball_rad):
    out = np.minimum(np.maximum(v, lo), hi)
    for b in range(ball_start.shape[0]):
        s0 = ball_start[b]
        d = ball_dim[b]
        dist2 = 0.0
        for r in range(s0, s0 + d):
            dist2 += (v[r] - center[r]) ** 2
        dist = np.sqrt(dist2)
        if dist > ball_rad[b]:
            f = ball_rad[b] / dist
            for r in range(s0, s0 + d):
                out[r] = center[r] + f * (v[r] - center[r])
    return out


@njit(cache=True, nogil=True)
def _residuals(g, h, p, scale, c, z, y):
    prim = 0.0
    gc = g @ c + h - z
    for r in range(gc.shape[0]):
        val = abs(gc[r]) / scale[r]
        if val > prim:
            prim = val
    dual = np.max(np.abs(p @ c + g.T @ y))
    return prim, dual


@njit(cache=True, nogil=True)
def _active_set(z, lo, hi, center, ball_start, ball_dim, ball_rad):
    """Rows sitting on a bound (+1 upper, -1 lower) and balls on their sphere."""
    n_rows = z.shape[0]
    side = np.zeros(n_rows, dtype=np.int64)
    for r in range(n_rows):
        if z[r] >= hi[r]:
            side[r] = 1
        elif z[r] <= lo[r]:
            side[r] = -1
    on_ball = np.zeros(ball_start.shape[0], dtype=np.bool_)
    for b in range(ball_start.shape[0]):
        dist2 = 0.0
        for r in range(ball_start[b], ball_start[b] + ball_dim[b]):
            dist2 += (z[r] - center[r]) ** 2
        on_ball[b] = np.sqrt(dist2) >= ball_rad[b] * (1.0 - 1e-12)
    return side, on_ball


@njit(cache=True, nogil=True)
def _kkt_newton(g, h, p, center, ball_start, ball_dim, ball_rad, lo, hi,
                c0, y0, side, on_ball):
    """Newton on the KKT equations with the guessed active set held as equalities."""
    n = c0.shape[0]
    box_rows = np.flatnonzero(side != 0)
    balls = np.flatnonzero(on_ball)
    na = box_rows.shape[0]
    nb = balls.shape[0]
    m = n + na + nb
    c = c0.copy()
    lam = np.empty(na)
    for k in range(na):
        lam[k] = y0[box_rows[k]]
    mu = np.empty(nb)
    for k in range(nb):
        b = balls[k]
        s0 = ball_start[b]
        acc = 0.0
        for r in range(s0, s0 + ball_dim[b]):
            acc += y0[r] ** 2
        mu[k] = np.sqrt(acc) / ball_rad[b]
    for _ in range(30):
        q = g @ c + h
        kkt = np.zeros((m, m))
        rhs = np.zeros(m)
        kkt[:n, :n] = p
        stat = p @ c
        for k in range(na):
            r = box_rows[k]
            bound = hi[r] if side[r] > 0 else lo[r]
            for j in range(n):
                kkt[j, n + k] = g[r, j]
                kkt[n + k, j] = g[r, j]
                stat[j] += lam[k] * g[r, j]
            rhs[n + k] = -(q[r] - bound)
        for k in range(nb):
            b = balls[k]
            s0 = ball_start[b]
            gb = g[s0:s0 + ball_dim[b]]
            d = q[s0:s0 + ball_dim[b]] - center[s0:s0 + ball_dim[b]]
            grad = gb.T @ d
            kkt[:n, :n] += mu[k] * (gb.T @ gb)
            for j in range(n):
                kkt[j, n + na + k] = grad[j]
                kkt[n + na + k, j] = grad[j]
                stat[j] += mu[k] * grad[j]
            rhs[n + na + k] = -0.5 * (d @ d - ball_rad[b] ** 2)
        rhs[:n] = -stat
        if not (np.all(np.isfinite(kkt)) and np.all(np.isfinite(rhs))):
            # diverged on this guess; the caller sees NaN and rejects it
            c[:] = np.nan
            break
        try:
            step = np.linalg.lstsq(kkt, rhs)[0]
        except Exception:  # LAPACK can fail to converge on a badly scaled guess
            c[:] = np.nan
            break
        if not np.all(np.isfinite(step)) or np.max(np.abs(step[:n])) > 1e8 * (1.0 + np.max(np.abs(c0))):
            c[:] = np.nan
            break
        c = c + step[:n]
        lam = lam + step[n:n + na]
        mu = mu + step[n + na:]
        if np.max(np.abs(step)) <= 1e-15 * (1.0 + np.max(np.abs(c))):
            break
    return c, box_rows, lam, balls, mu


@njit(cache=True, nogil=True)
def _ball_grad(g, q, center, ball_start, ball_dim, b):
    s0 = ball_start[b]
    gb = g[s0:s0 + ball_dim[b]]
    return gb.T @ (q[s0:s0 + ball_dim[b]] - center[s0:s0 + ball_dim[b]])


@njit(cache=True, nogil=True)
def _parallel(a, b):
    na = np.sqrt(a @ a)
    nb = np.sqrt(b @ b)
    if na == 0.0 or nb == 0.0:
        return False
    return abs(a @ b) >= (1.0 - 1e-9) * na * nb


@njit(cache=True, nogil=True)
def _release_parallel(g, q, center, ball_start, ball_dim, keep, side, on_ball, keep_row, keep_ball):
    for r in range(g.shape[0]):
        if side[r] != 0 and r != keep_row and _parallel(keep, g[r]):
            side[r] = 0
    for b in range(ball_start.shape[0]):
        if on_ball[b] and b != keep_ball and _parallel(
                keep, _ball_grad(g, q, center, ball_start, ball_dim, b)):
            on_ball[b] = False


@njit(cache=True, nogil=True)
def _polish(g, h, p, scale, lo, hi, center, ball_start, ball_dim, ball_rad,
            c0, y0, side, on_ball, eps, rounds):
    """Solve the KKT equations for a guessed active set.

    Box rows in ``side`` become equalities and balls in ``on_ball`` become
    sphere equalities; Newton's method handles the latter. A failed
    certificate drops wrong-signed multipliers and adds violated
    constraints, for up to ``rounds`` guesses. Returns (ok, c, y) where
    ``ok`` certifies feasibility, multiplier signs and stationarity to ``eps``.
    """
    n_rows = g.shape[0]
    side = side.copy()
    on_ball = on_ball.copy()
    for _ in range(rounds):
        c, box_rows, lam, balls, mu = _kkt_newton(g, h, p, center, ball_start, ball_dim,
                                                  ball_rad, lo, hi, c0, y0, side, on_ball)
        if not np.all(np.isfinite(c)):
            break
        q = g @ c + h
        y = np.zeros(n_rows)
        ok = True
        clash_row = -1
        clash_ball = -1
        for r in range(n_rows):
            s_new = 0
            if (lo[r] - q[r]) / scale[r] > eps:
                s_new = -1
            elif (q[r] - hi[r]) / scale[r] > eps:
                s_new = 1
            if s_new != 0:
                if side[r] == s_new:
                    clash_row = r
                side[r] = s_new
                ok = False
        for b in range(ball_start.shape[0]):
            s0 = ball_start[b]
            dist2 = 0.0
            for r in range(s0, s0 + ball_dim[b]):
                dist2 += (q[r] - center[r]) ** 2
            if (np.sqrt(dist2) - ball_rad[b]) / scale[s0] > eps:
                if on_ball[b]:
                    clash_ball = b
                on_ball[b] = True
                ok = False
        if clash_row >= 0 or clash_ball >= 0:
            # an active constraint is still violated: the equalities are
            # inconsistent, so release whatever is parallel to it
            if clash_ball >= 0:
                keep = _ball_grad(g, q, center, ball_start, ball_dim, clash_ball)
            else:
                keep = g[clash_row].copy()
            _release_parallel(g, q, center, ball_start, ball_dim, keep, side, on_ball,
                              clash_row, clash_ball)
        for k in range(box_rows.shape[0]):
            r = box_rows[k]
            if lam[k] * side[r] < -eps:
                side[r] = 0
                ok = False
            y[r] = lam[k]
        for k in range(balls.shape[0]):
            b = balls[k]
            if mu[k] < -eps:
                on_ball[b] = False
                ok = False
            for r in range(ball_start[b], ball_start[b] + ball_dim[b]):
                y[r] = mu[k] * (q[r] - center[r])
        if ok:
            if np.max(np.abs(p @ c + g.T @ y)) <= eps:
                return True, c, y
            break
    return False, c0, y0


@njit(cache=True, nogil=True)
def _admm(g, h, p, scale, lo, hi, center, ball_start, ball_dim, ball_rad,
          c, y, rho, sigma, alpha, eps, max_iter, stall_iter, check_every,
          adaptive, adapt_every, polish):
    n = c.shape[0]
    eye = np.eye(n)
    gtg = g.T @ g
    m_inv = np.linalg.inv(p + sigma * eye + rho * gtg)
    m_sigma = sigma * m_inv
    m_g = m_inv @ g.T
    z = _project(g @ c + h, lo, hi, center, ball_start, ball_dim, ball_rad)
    best_score = np.inf
    best_c = c.copy()
    best_y = y.copy()
    best_prim = np.inf
    since_best = 0
    status = 2  # max-iter
    last_side = np.zeros(g.shape[0], dtype=np.int64)
    last_ball = np.zeros(ball_start.shape[0], dtype=np.bool_)
    tried = False
    if polish and np.any(y != 0.0):
        # a dual warm start names the constraints expected to be active; the
        # bound side comes from the primal warm start, since it can flip
        q0 = g @ c + h
        side = np.zeros(g.shape[0], dtype=np.int64)
        for r in range(g.shape[0]):
            if y[r] == 0.0 or not (np.isfinite(lo[r]) or np.isfinite(hi[r])):
                continue
            if not np.isfinite(lo[r]):
                side[r] = 1
            elif not np.isfinite(hi[r]):
                side[r] = -1
            else:
                side[r] = 1 if q0[r] - lo[r] > hi[r] - q0[r] else -1
        on_ball = np.zeros(ball_start.shape[0], dtype=np.bool_)
        for b in range(ball_start.shape[0]):
            for r in range(ball_start[b], ball_start[b] + ball_dim[b]):
                if y[r] != 0.0:
                    on_ball[b] = True
        ok, c_p, y_p = _polish(g, h, p, scale, lo, hi, center, ball_start, ball_dim,
                               ball_rad, c, y, side, on_ball, eps, 8)
        if ok:
            return c_p, y_p, 0, 0, rho
    it = 0
    for it in range(1, max_iter + 1):
        c_t = m_sigma @ c + m_g @ (rho * (z - h) - y)
        w = g @ c_t + h
        c = alpha * c_t + (1.0 - alpha) * c
        v = alpha * w + (1.0 - alpha) * z
        z_new = _project(v + y / rho, lo, hi, center, ball_start, ball_dim, ball_rad)
        y = y + rho * (v - z_new)
        z = z_new
        if it % check_every != 0:
            continue
        prim, dual = _residuals(g, h, p, scale, c, z, y)
        score = max(prim, dual)
        if score < best_score:
            best_score = score
            best_c = c.copy()
            best_y = y.copy()
        if prim <= eps and dual <= eps:
            return c, y, it, 0, rho
        if polish:
            side, on_ball = _active_set(z, lo, hi, center, ball_start, ball_dim, ball_rad)
            if not tried or np.any(side != last_side) or np.any(on_ball != last_ball):
                tried = True
                last_side = side
                last_ball = on_ball
                ok, c_p, y_p = _polish(g, h, p, scale, lo, hi, center, ball_start, ball_dim,
                                       ball_rad, c, y, side, on_ball, eps, 3)
                if ok:
                    return c_p, y_p, it, 0, rho
        if prim < best_prim * (1.0 - 1e-3):
            best_prim = prim
            since_best = 0
        else:
            since_best += check_every
            if since_best >= stall_iter and best_prim > 1e3 * eps:
                return c, y, it, 1, rho
        if adaptive and it % adapt_every == 0:
            gc = g @ c
            pc = p @ c
            gy = g.T @ y
            prim_s = np.max(np.abs(gc + h - z)) / max(np.max(np.abs(gc)), np.max(np.abs(z)), 1e-12)
            dual_s = np.max(np.abs(pc + gy)) / max(np.max(np.abs(pc)), np.max(np.abs(gy)), 1e-12)
            ratio = np.sqrt(prim_s / max(dual_s, 1e-30))
            if ratio > 5.0 or ratio < 0.2:
                rho = min(max(rho * ratio, 1e-6), 1e6)
                m_inv = np.linalg.inv(p + sigma * eye + rho * gtg)
                m_sigma = sigma * m_inv
                m_g = m_inv @ g.T
    return best_c, best_y, it, status, rho


_STATUS = {0: OPTIMAL, 1: INFEASIBLE, 2: MAX_ITER}


def solve(qp, warm_start=None, settings=None, dual_warm_start=None):
    """Minimise the QP; see module docstring for the method.

    Returns a :class:`QpSolution` whose status is ``optimal``, ``infeasible``
    (constant constraint violated, or the primal residual stalled for
    ``settings.stall_iter`` iterations) or ``max-iter`` (best iterate kept).
    """
    settings = settings or SolverSettings()
    n = qp.n_var
    comp = _Compiled(qp)
    zeros = np.zeros(n)
    if comp.const_violation > settings.eps_abs:
        return QpSolution(zeros, INFEASIBLE, comp.const_violation, 0.0, 0, 0.0)
    if comp.n_rows == 0:
        return QpSolution(zeros, OPTIMAL, 0.0, 0.0, 0, 0.0)
    # c = 0 is the unconstrained minimiser; if it is feasible it is optimal
    z0 = comp.h
    if np.array_equal(comp.project(z0), z0):
        return QpSolution(zeros, OPTIMAL, 0.0, 0.0, 0, 0.0, np.zeros(comp.n_rows))

    c0 = zeros.copy() if warm_start is None else np.array(warm_start, dtype=float).ravel()
    if dual_warm_start is not None and len(dual_warm_start) == comp.n_rows:
        y0 = np.asarray(dual_warm_start, dtype=float) / comp.scale
    else:
        y0 = np.zeros(comp.n_rows)
    c, y, it, code, _ = _admm(
        comp.g, comp.h, comp.p, comp.scale, comp.lo, comp.hi, comp.center,
        comp.ball_start, comp.ball_dim, comp.ball_rad,
        c0, y0, float(settings.rho), float(settings.sigma), float(settings.alpha),
        float(settings.eps_abs), int(settings.max_iter), int(settings.stall_iter),
        int(settings.check_every), bool(settings.adaptive_rho), int(settings.adapt_every),
        bool(settings.polish),
    )
    z = comp.project(comp.g @ c + comp.h)
    prim, dual = _residuals(comp.g, comp.h, comp.p, comp.scale, c, z, y)
    status = _STATUS[code]
    if status == INFEASIBLE:
        logger.info("QP declared infeasible after %d iterations (prim=%.3e)", it, prim)
    return QpSolution(c, status, prim, dual, it, qp.cost(c), y * comp.scale)
