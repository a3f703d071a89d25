"""Time-varying weighted undirected communication graph.

Agents are indexed ``0..M-1`` internally; callers that use other labels keep
their own mapping. Edge weights only ever go *down* over time (detection
prunes links, nothing adds them back), so a graph is stored as its initial
weight matrix plus a list of prune events.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .linalg import eigenvalues

logger = logging.getLogger(__name__)

__all__ = [
    "AttackPartition",
    "CapacityError",
    "ConnectivityError",
    "PruneEvent",
    "TimeGraph",
    "build_graph",
    "check_f_local",
    "is_r_reachable",
    "is_r_robust",
    "lambda_max",
    "laplacian",
    "nonzero_laplacian_eigenvalues",
    "prune_edge",
]

EXHAUSTIVE_CAP = 12


class ConnectivityError(ValueError):
    """The (relevant part of the) graph is not connected."""


class CapacityError(ValueError):
    """Exact enumeration requested above the supported size."""


@dataclass(frozen=True)
class PruneEvent:
    t: int
    i: int
    j: int
    mirrored: bool = False


@dataclass(frozen=True)
class AttackPartition:
    """Normal / adversarial split of the agent set at one instant."""

    normal_agents: frozenset
    adversarial_agents: frozenset = frozenset()
    adversarial_links: frozenset = frozenset()

    def __post_init__(self):
        if self.normal_agents & self.adversarial_agents:
            raise ValueError("normal and adversarial agent sets overlap")
        links = frozenset(frozenset(e) for e in self.adversarial_links)
        object.__setattr__(self, "adversarial_links", links)

    @classmethod
    def from_adversaries(cls, n_agents, adversarial_agents=(), adversarial_links=()):
        adv = frozenset(adversarial_agents)
        return cls(frozenset(range(n_agents)) - adv, adv, frozenset(adversarial_links))


@dataclass(frozen=True)
class TimeGraph:
    """Weighted undirected graph whose edges can be pruned at given rounds.

    ``weights0`` is the symmetric weight matrix at t = 0. ``prunes`` lists the
    directed prune events; an event (t, i, j) zeroes a_ij from round t on.
    """

    weights0: np.ndarray
    alpha: float = 1e-3
    prunes: tuple = field(default=())

    def __post_init__(self):
        w = np.array(self.weights0, dtype=float)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError("weights must be a square matrix")
        if not np.allclose(w, w.T, rtol=0, atol=0):
            raise ValueError("weights must be symmetric")
        if np.any(np.diag(w) != 0):
            raise ValueError("self loops are not allowed")
        if np.any(w < 0) or np.any(w > 1):
            raise ValueError("weights must lie in [0, 1]")
        if not 0 < self.alpha < 1:
            raise ValueError("alpha must lie in (0, 1)")
        pos = w[w > 0]
        if pos.size and pos.min() <= self.alpha:
            raise ValueError(f"positive weights must exceed alpha={self.alpha}")
        if np.any(w.sum(axis=1) > 1 + 1e-12):
            raise ValueError("weighted degree of some agent exceeds 1")
        w.setflags(write=False)
        object.__setattr__(self, "weights0", w)

    @property
    def n_agents(self):
        return self.weights0.shape[0]

    def weights(self, t):
        """Weight matrix a_ij(t)."""
        w = self.weights0.copy()
        for ev in self.prunes:
            if ev.t <= t:
                w[ev.i, ev.j] = 0.0
        return w

    def neighbors(self, i, t):
        return [int(j) for j in np.flatnonzero(self.weights(t)[i] > 0)]

    def adjacency(self, t):
        return self.weights(t) > 0

    def pruned_at(self, t):
        return [ev for ev in self.prunes if ev.t == t]


def build_graph(n_agents, edges, weights=None, alpha=1e-3):
    """Graph from an undirected edge list.

    Without explicit weights every edge gets
    ``min(1/|N_i(0)|, 1/|N_j(0)|)`` so that the matrix stays symmetric.
    """
    w = np.zeros((n_agents, n_agents))
    pairs = []
    for e in edges:
        i, j = int(e[0]), int(e[1])
        if i == j or not (0 <= i < n_agents and 0 <= j < n_agents):
            raise ValueError(f"bad edge {e!r}")
        pairs.append((i, j))
    degree = np.zeros(n_agents, dtype=int)
    for i, j in {tuple(sorted(p)) for p in pairs}:
        degree[i] += 1
        degree[j] += 1
    for idx, (i, j) in enumerate(pairs):
        if weights is not None:
            a = float(weights[idx])
        else:
            a = min(1.0 / degree[i], 1.0 / degree[j])
            if degree[i] != degree[j]:
                logger.info(
                    "edge (%d,%d): degrees %d/%d differ, using symmetric weight %.6g",
                    i, j, degree[i], degree[j], a,
                )
        w[i, j] = w[j, i] = a
    return TimeGraph(w, alpha=alpha)


def laplacian(g, t):
    w = g.weights(t)
    return np.diag(w.sum(axis=1)) - w


def _components(adj, nodes):
    nodes = set(nodes)
    comps = []
    while nodes:
        start = nodes.pop()
        stack, comp = [start], {start}
        while stack:
            v = stack.pop()
            for u in np.flatnonzero(adj[v]):
                u = int(u)
                if u in nodes:
                    nodes.remove(u)
                    comp.add(u)
                    stack.append(u)
        comps.append(comp)
    return comps


def lambda_max(g, t, agents=None):
    """Largest Laplacian eigenvalue at ``t``.

    ``agents`` restricts the connectivity requirement (default: every agent
    that still has a neighbor). Isolated agents contribute a zero row and
    column and do not affect the result.
    """
    adj = g.adjacency(t)
    if agents is None:
        agents = [i for i in range(g.n_agents) if adj[i].any()]
    agents = sorted(agents)
    if not agents or not adj[np.ix_(agents, agents)].any():
        raise ConnectivityError(f"no edges among agents {agents} at t={t}")
    if len(_components(adj[np.ix_(agents, agents)], range(len(agents)))) > 1:
        raise ConnectivityError(f"agents {agents} are not connected at t={t}")
    return float(np.max(eigenvalues(laplacian(g, t)).real))


def nonzero_laplacian_eigenvalues(g, t, agents=None, tol=1e-9):
    """Laplacian spectrum of the subgraph induced by ``agents``, zeros dropped."""
    lap = laplacian(g, t)
    if agents is not None:
        agents = sorted(agents)
        w = g.weights(t)[np.ix_(agents, agents)]
        lap = np.diag(w.sum(axis=1)) - w
    eig = np.sort(eigenvalues(lap).real)
    return [float(e) for e in eig if e > tol]


def is_r_reachable(g, t, subset, r):
    subset = set(subset)
    if not subset or len(subset) >= g.n_agents:
        raise ValueError("subset must be a nonempty proper subset of the agents")
    adj = g.adjacency(t)
    outside = [j for j in range(g.n_agents) if j not in subset]
    return any(int(adj[i, outside].sum()) >= r for i in subset)


def is_r_robust(g, t, r, cap=EXHAUSTIVE_CAP):
    """Exact r-robustness test over all pairs of disjoint nonempty subsets.

    Subsets are bitmasks. A pair violates robustness iff neither side is
    r-reachable, so we mark the non-reachable subsets, spread that mark to
    every superset (zeta transform), and look for a non-reachable set whose
    complement still contains a non-reachable set.
    """
    m = g.n_agents
    if not 1 <= r < m:
        raise ValueError(f"r must satisfy 1 <= r < M={m}")
    if m > cap:
        raise CapacityError(f"M={m} exceeds the exhaustive cap of {cap}")
    adj = g.adjacency(t)
    nbr_mask = [sum(1 << j for j in np.flatnonzero(adj[i])) for i in range(m)]
    full = (1 << m) - 1
    bad = bytearray(1 << m)
    for s in range(1, full + 1):
        reach = False
        for i in range(m):
            if s >> i & 1 and bin(nbr_mask[i] & ~s).count("1") >= r:
                reach = True
                break
        bad[s] = not reach
    has_bad_subset = bytearray(bad)
    for i in range(m):
        bit = 1 << i
        for s in range(full + 1):
            if s & bit and has_bad_subset[s ^ bit]:
                has_bad_subset[s] = 1
    for s in range(1, full):
        if bad[s] and has_bad_subset[full & ~s]:
            return False
    return True


def check_f_local(g, t, part, f):
    """True iff each normal agent sees at most ``f`` adversarial links + agents."""
    adj = g.adjacency(t)
    for i in part.normal_agents:
        links = sum(1 for e in part.adversarial_links if i in e)
        agents = sum(1 for j in part.adversarial_agents if adj[i, j])
        if links + agents > f:
            return False
    return True


def prune_edge(g, t, i, j, mirror=True):
    """Return a new graph with a_ij (and a_ji when mirroring) zero from ``t``."""
    w = g.weights(t)
    if w[i, j] == 0:
        logger.info("prune (%d,%d) at t=%d ignored: edge already dead", i, j, t)
        return g
    events = [PruneEvent(t, i, j)]
    if mirror and w[j, i] != 0:
        events.append(PruneEvent(t, j, i, mirrored=True))
    return TimeGraph(g.weights0, alpha=g.alpha, prunes=g.prunes + tuple(events))
