"""Scenario documents: a versioned JSON schema, validation and round-trip.

Agents are referred to by integer labels everywhere in a scenario file (the
bundled examples use 0 for a reference agent and 1.. for the others); the
engine maps them to dense internal indices.
"""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .attacks import AttackScript, is_active
from .graph import AttackPartition, CapacityError, build_graph, check_f_local, is_r_robust
from .lti import InputConstraint, Plant
from .solver import SolverSettings

logger = logging.getLogger(__name__)

__all__ = [
    "SCHEMA",
    "GainSpec",
    "Reference",
    "Scenario",
    "ScenarioError",
    "bundled_scenario_path",
    "load_scenario",
    "parse_scenario",
]

SCHEMA = "resilient-dmpc/scenario/v1"

_TOP_KEYS = {
    "schema", "name", "description", "plant", "horizon", "eta", "psi", "r_weight",
    "gain", "input_constraint", "state_box", "agents", "edges", "weights", "alpha",
    "initial_states", "initial_perturbation", "offsets", "reference", "attacks", "F",
    "T_max", "seed", "detection", "solver", "tighten_inputs", "tube_margin",
    "stop_tolerance",
}
_REQUIRED = {"schema", "plant", "horizon", "eta", "gain", "input_constraint", "agents", "edges", "initial_states"}


class ScenarioError(ValueError):
    """Invalid scenario document; ``field`` names the offending entry."""

    def __init__(self, message, field=None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


@dataclass(frozen=True)
class GainSpec:
    """Either an explicit K(0) or the closed-form synthesis.

    ``psi_state`` is the n x n state weight used by the formula (identity when
    omitted). With ``rescale_on_prune`` an explicit gain is multiplied by
    lambda_M(0) / lambda_M(t) whenever the graph changes, which is what the
    formula does implicitly.
    """

    mode: str
    k: np.ndarray | None = None
    psi_state: np.ndarray | None = None
    rescale_on_prune: bool = True


@dataclass(frozen=True)
class Reference:
    """A scripted leader that follows a piecewise-linear speed profile.

    ``knots`` are (time in seconds, speed) pairs; the speed is held constant
    outside them. The state is (position, speed, acceleration).
    """

    agent: int
    sample_time: float
    knots: tuple
    position0: float = 0.0

    def state(self, step):
        times = np.array([k[0] for k in self.knots], dtype=float)
        speeds = np.array([k[1] for k in self.knots], dtype=float)
        tau = step * self.sample_time
        v = float(np.interp(tau, times, speeds))
        # position: exact integral of the piecewise-linear speed
        grid = np.concatenate([[0.0], times[(times > 0) & (times < tau)], [tau]])
        vals = np.interp(grid, times, speeds)
        s = self.position0 + float(np.sum(0.5 * (vals[1:] + vals[:-1]) * np.diff(grid)))
        seg = np.searchsorted(times, tau, side="right") - 1
        if 0 <= seg < len(times) - 1:
            acc = (speeds[seg + 1] - speeds[seg]) / (times[seg + 1] - times[seg])
        else:
            acc = 0.0
        return np.array([s, v, float(acc)])

    def trajectory(self, step, horizon):
        return np.array([self.state(step + k) for k in range(horizon + 1)])


@dataclass(eq=False)
class Scenario:
    name: str
    plant: Plant
    horizon: int
    eta: float
    psi: np.ndarray
    r_weight: np.ndarray
    gain: GainSpec
    input_constraint: InputConstraint
    agents: tuple
    edges: tuple
    initial_states: dict
    state_box: tuple | None = None
    weights: tuple | None = None
    alpha: float = 1e-3
    initial_perturbation: float = 0.0
    offsets: dict | None = None
    reference: Reference | None = None
    attacks: tuple = ()
    f: int = 0
    t_max: int = 200
    seed: int = 0
    detection: bool = True
    solver: SolverSettings = field(default_factory=SolverSettings)
    tighten_inputs: bool = False
    tube_margin: float = 1e-7
    stop_tolerance: float | None = None
    description: str = ""

    @property
    def n_agents(self):
        return len(self.agents)

    def index(self, label):
        return self.agents.index(label)

    def adversarial_agents(self):
        return sorted({s.target for s in self.attacks if s.is_agent_attack})

    def normal_agents(self):
        adv = set(self.adversarial_agents())
        return [a for a in self.agents if a not in adv]

    def initial_graph(self):
        idx = {a: i for i, a in enumerate(self.agents)}
        edges = [(idx[i], idx[j]) for i, j in self.edges]
        return build_graph(self.n_agents, edges, self.weights, self.alpha)

    def offset(self, label):
        if self.offsets is None:
            return np.zeros(self.plant.state_dim)
        return np.asarray(self.offsets.get(label, np.zeros(self.plant.state_dim)), dtype=float)

    def with_overrides(self, **kw):
        out = copy.copy(self)
        for k, v in kw.items():
            if not hasattr(out, k):
                raise AttributeError(k)
            setattr(out, k, v)
        return out

    def to_dict(self):
        def mat(m):
            return None if m is None else np.asarray(m, dtype=float).tolist()

        def bound(v):
            return [None if not np.isfinite(x) else float(x) for x in v]

        ic = self.input_constraint
        if ic.kind == "box":
            ic_d = {"kind": "box", "lower": list(ic.lower), "upper": list(ic.upper)}
        else:
            ic_d = {"kind": "ball", "radius": ic.radius}
        gain = {"mode": self.gain.mode, "rescale_on_prune": self.gain.rescale_on_prune}
        if self.gain.k is not None:
            gain["K"] = mat(self.gain.k)
        if self.gain.psi_state is not None:
            gain["psi_state"] = mat(self.gain.psi_state)
        ref = None
        if self.reference is not None:
            r = self.reference
            ref = {
                "agent": r.agent,
                "sample_time": r.sample_time,
                "speed_knots": [list(k) for k in r.knots],
                "position0": r.position0,
            }
        attacks = []
        for s in self.attacks:
            d = {
                "kind": s.kind,
                "target": list(s.target) if isinstance(s.target, tuple) else s.target,
                "window": list(s.window),
                "magnitude": list(s.magnitude),
                "seed": s.seed,
            }
            attacks.append(d)
        solver = {
            k: getattr(self.solver, k)
            for k in SolverSettings.__dataclass_fields__
        }
        return {
            "schema": SCHEMA,
            "name": self.name,
            "description": self.description,
            "plant": {"A": mat(self.plant.a), "B": mat(self.plant.b)},
            "horizon": self.horizon,
            "eta": self.eta,
            "psi": mat(self.psi),
            "r_weight": mat(self.r_weight),
            "gain": gain,
            "input_constraint": ic_d,
            "state_box": None if self.state_box is None else {
                "lower": bound(self.state_box[0]), "upper": bound(self.state_box[1])
            },
            "agents": list(self.agents),
            "edges": [list(e) for e in self.edges],
            "weights": None if self.weights is None else list(self.weights),
            "alpha": self.alpha,
            "initial_states": {str(a): list(map(float, self.initial_states[a])) for a in self.agents},
            "initial_perturbation": self.initial_perturbation,
            "offsets": None if self.offsets is None else {
                str(a): list(map(float, v)) for a, v in self.offsets.items()
            },
            "reference": ref,
            "attacks": attacks,
            "F": self.f,
            "T_max": self.t_max,
            "seed": self.seed,
            "detection": self.detection,
            "solver": solver,
            "tighten_inputs": self.tighten_inputs,
            "tube_margin": self.tube_margin,
            "stop_tolerance": self.stop_tolerance,
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        return self.to_dict() == other.to_dict()


def _matrix(value, name, shape=None):
    try:
        m = np.array(value, dtype=float)
    except (TypeError, ValueError):
        raise ScenarioError("not a numeric matrix", name) from None
    if m.ndim == 0:
        m = m.reshape(1, 1)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ScenarioError(f"expected a matrix, got {m.ndim} dimensions", name)
    if shape is not None and m.shape != shape:
        raise ScenarioError(f"expected shape {shape}, got {m.shape}", name)
    if not np.all(np.isfinite(m)):
        raise ScenarioError("entries must be finite", name)
    return m


def _vector(value, name, length):
    try:
        v = np.array([np.nan if x is None else x for x in value], dtype=float)
    except (TypeError, ValueError):
        raise ScenarioError("not a numeric vector", name) from None
    if v.shape != (length,):
        raise ScenarioError(f"expected {length} entries, got {v.size}", name)
    return v


def _defaulted(doc, key, default):
    if key not in doc or doc[key] is None and default is not None:
        logger.info("scenario default %s = %r", key, default)
        return default
    return doc[key]


def parse_scenario(doc):
    """Validate a decoded scenario document and build a :class:`Scenario`."""
    if not isinstance(doc, dict):
        raise ScenarioError("top level must be an object")
    unknown = set(doc) - _TOP_KEYS
    if unknown:
        raise ScenarioError(f"unknown field(s) {sorted(unknown)}")
    missing = _REQUIRED - set(doc)
    if missing:
        raise ScenarioError(f"missing required field(s) {sorted(missing)}")
    if doc["schema"] != SCHEMA:
        raise ScenarioError(f"unsupported schema {doc['schema']!r}, expected {SCHEMA!r}", "schema")

    pl = doc["plant"]
    if not isinstance(pl, dict) or set(pl) != {"A", "B"}:
        raise ScenarioError("plant needs exactly the keys A and B", "plant")
    a = _matrix(pl["A"], "plant.A")
    n = a.shape[0]
    if a.shape != (n, n):
        raise ScenarioError(f"A must be square, got {a.shape}", "plant.A")
    b = np.array(pl["B"], dtype=float)
    if b.ndim == 1:
        b = b.reshape(-1, 1)
    b = _matrix(b, "plant.B")
    if b.shape[0] != n:
        raise ScenarioError(f"B must have {n} rows", "plant.B")
    m = b.shape[1]
    try:
        plant = Plant(a, b)
    except ValueError as exc:
        raise ScenarioError(str(exc), "plant") from None

    horizon = doc["horizon"]
    if not isinstance(horizon, int) or horizon < 1:
        raise ScenarioError("must be a positive integer", "horizon")
    eta = float(doc["eta"])
    if not eta > 0:
        raise ScenarioError("must be positive", "eta")
    psi = _matrix(_defaulted(doc, "psi", np.eye(m).tolist()), "psi", (m, m))
    if np.any(np.linalg.eigvalsh(0.5 * (psi + psi.T)) <= 0):
        raise ScenarioError("must be positive definite", "psi")
    r_weight = _matrix(_defaulted(doc, "r_weight", np.eye(m).tolist()), "r_weight", (m, m))

    g = doc["gain"]
    mode = g.get("mode") if isinstance(g, dict) else None
    if mode == "explicit":
        if "K" not in g:
            raise ScenarioError("explicit mode needs K", "gain.K")
        gain = GainSpec("explicit", _matrix(g["K"], "gain.K", (m, n)), None,
                        bool(g.get("rescale_on_prune", True)))
    elif mode == "formula":
        ps = g.get("psi_state")
        ps = np.eye(n) if ps is None else _matrix(ps, "gain.psi_state", (n, n))
        gain = GainSpec("formula", None, ps, bool(g.get("rescale_on_prune", True)))
    else:
        raise ScenarioError("mode must be 'explicit' or 'formula'", "gain.mode")

    icd = doc["input_constraint"]
    try:
        if icd.get("kind") == "box":
            ic = InputConstraint.box(_vector(icd["lower"], "input_constraint.lower", m),
                                     _vector(icd["upper"], "input_constraint.upper", m))
        elif icd.get("kind") == "ball":
            ic = InputConstraint.ball(icd["radius"])
        else:
            raise ScenarioError("kind must be 'box' or 'ball'", "input_constraint.kind")
    except (KeyError, ValueError, AttributeError) as exc:
        if isinstance(exc, ScenarioError):
            raise
        raise ScenarioError(str(exc), "input_constraint") from None

    state_box = None
    if doc.get("state_box") is not None:
        sb = doc["state_box"]
        lo = _vector(sb["lower"], "state_box.lower", n)
        hi = _vector(sb["upper"], "state_box.upper", n)
        lo = np.where(np.isnan(lo), -np.inf, lo)
        hi = np.where(np.isnan(hi), np.inf, hi)
        if np.any(lo > hi):
            raise ScenarioError("lower exceeds upper", "state_box")
        state_box = (lo, hi)

    agents = doc["agents"]
    if not agents or not all(isinstance(x, int) for x in agents) or len(set(agents)) != len(agents):
        raise ScenarioError("must be a nonempty list of distinct integers", "agents")
    agents = tuple(agents)
    labels = set(agents)
    edges = []
    for k, e in enumerate(doc["edges"]):
        if len(e) != 2 or e[0] not in labels or e[1] not in labels or e[0] == e[1]:
            raise ScenarioError(f"bad edge {e!r}", f"edges[{k}]")
        edges.append((int(e[0]), int(e[1])))
    if len({frozenset(e) for e in edges}) != len(edges):
        raise ScenarioError("duplicate edge", "edges")
    weights = doc.get("weights")
    if weights is not None:
        if len(weights) != len(edges):
            raise ScenarioError("one weight per edge required", "weights")
        weights = tuple(float(w) for w in weights)
    alpha = float(_defaulted(doc, "alpha", 1e-3))

    init = doc["initial_states"]
    if not isinstance(init, dict) or {int(k) for k in init} != labels:
        raise ScenarioError("one initial state per agent required", "initial_states")
    initial_states = {int(k): _vector(v, f"initial_states.{k}", n) for k, v in init.items()}

    offsets = None
    if doc.get("offsets") is not None:
        offsets = {}
        for k, v in doc["offsets"].items():
            if int(k) not in labels:
                raise ScenarioError(f"unknown agent {k}", "offsets")
            off = _vector(v, f"offsets.{k}", n)
            if not np.allclose(a @ off, off, atol=1e-12):
                raise ScenarioError("offset must be an equilibrium (A d = d)", f"offsets.{k}")
            offsets[int(k)] = off

    reference = None
    if doc.get("reference") is not None:
        rd = doc["reference"]
        if rd.get("agent") not in labels:
            raise ScenarioError("reference agent must be listed in agents", "reference.agent")
        if n != 3:
            raise ScenarioError("speed-profile references need (position, speed, acceleration) states",
                                "reference")
        knots = tuple(tuple(float(x) for x in k) for k in rd["speed_knots"])
        if len(knots) < 1 or any(len(k) != 2 for k in knots) or any(
            knots[i + 1][0] <= knots[i][0] for i in range(len(knots) - 1)
        ):
            raise ScenarioError("knots must be (time, speed) pairs with increasing times",
                                "reference.speed_knots")
        reference = Reference(int(rd["agent"]), float(rd["sample_time"]), knots,
                              float(rd.get("position0", 0.0)))
        if not np.allclose(reference.state(0), initial_states[reference.agent]):
            raise ScenarioError("reference initial state disagrees with its speed profile",
                                "initial_states")

    attacks = []
    for k, ad in enumerate(doc.get("attacks") or []):
        try:
            target = ad["target"]
            script = AttackScript(
                ad["kind"],
                tuple(target) if isinstance(target, list) else target,
                tuple(ad["window"]),
                tuple(ad.get("magnitude", (-2.0, 2.0))),
                int(ad.get("seed", k)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioError(str(exc), f"attacks[{k}]") from None
        tgt = script.target if isinstance(script.target, tuple) else (script.target,)
        if not set(tgt) <= labels:
            raise ScenarioError(f"unknown target {script.target}", f"attacks[{k}].target")
        if script.kind == "link" and frozenset(tgt) not in {frozenset(e) for e in edges}:
            raise ScenarioError("link attack on a non-existent edge", f"attacks[{k}].target")
        if reference is not None and reference.agent in tgt and script.is_agent_attack:
            raise ScenarioError("the reference agent cannot be adversarial", f"attacks[{k}].target")
        attacks.append(script)

    solver_doc = _defaulted(doc, "solver", {}) or {}
    unknown = set(solver_doc) - set(SolverSettings.__dataclass_fields__)
    if unknown:
        raise ScenarioError(f"unknown solver setting(s) {sorted(unknown)}", "solver")
    solver = SolverSettings(**solver_doc)

    tol = doc.get("stop_tolerance")
    sc = Scenario(
        name=str(doc.get("name", "unnamed")),
        description=str(doc.get("description", "")),
        plant=plant,
        horizon=horizon,
        eta=eta,
        psi=psi,
        r_weight=r_weight,
        gain=gain,
        input_constraint=ic,
        agents=agents,
        edges=tuple(edges),
        initial_states=initial_states,
        state_box=state_box,
        weights=weights,
        alpha=alpha,
        initial_perturbation=float(_defaulted(doc, "initial_perturbation", 0.0)),
        offsets=offsets,
        reference=reference,
        attacks=tuple(attacks),
        f=int(_defaulted(doc, "F", 0)),
        t_max=int(_defaulted(doc, "T_max", 200)),
        seed=int(_defaulted(doc, "seed", 0)),
        detection=bool(_defaulted(doc, "detection", True)),
        solver=solver,
        tighten_inputs=bool(_defaulted(doc, "tighten_inputs", False)),
        tube_margin=float(_defaulted(doc, "tube_margin", 1e-7)),
        stop_tolerance=None if tol is None else float(tol),
    )
    if sc.t_max < 0:
        raise ScenarioError("must be non-negative", "T_max")
    if not 0 <= sc.tube_margin < sc.eta:
        raise ScenarioError("must lie in [0, eta)", "tube_margin")
    try:
        graph = sc.initial_graph()
    except ValueError as exc:
        raise ScenarioError(str(exc), "edges") from None
    _check_attack_budget(sc, graph)
    _check_robustness(sc, graph)
    return sc


def _check_attack_budget(sc, graph):
    idx = {a: i for i, a in enumerate(sc.agents)}
    times = sorted({t for s in sc.attacks for t in range(s.window[0], s.window[1] + 1)})
    for t in times:
        active = [s for s in sc.attacks if is_active(s, t)]
        part = AttackPartition.from_adversaries(
            sc.n_agents,
            [idx[s.target] for s in active if s.is_agent_attack],
            [tuple(idx[x] for x in s.target) for s in active if s.kind == "link"],
        )
        if not check_f_local(graph, 0, part, sc.f):
            raise ScenarioError(f"attacks active at t={t} exceed the declared F={sc.f}", "attacks")


def _check_robustness(sc, graph):
    if not sc.detection or sc.f + 1 >= sc.n_agents:
        return
    try:
        ok = is_r_robust(graph, 0, sc.f + 1)
    except CapacityError:
        logger.warning("graph too large to certify %d-robustness exactly", sc.f + 1)
        return
    if not ok:
        logger.warning(
            "initial graph is not %d-robust; resilient consensus under F=%d attacks "
            "is only guaranteed on (F+1)-robust networks",
            sc.f + 1, sc.f,
        )


def load_scenario(path):
    """Read, parse and validate a scenario file."""
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise ScenarioError(f"cannot read {path}: {exc.strerror}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return parse_scenario(doc)


def bundled_scenario_path(name):
    """Path of a scenario shipped with the package (``example1``, ...)."""
    fname = name if name.endswith(".json") else f"{name}.json"
    return str(resources.files(__package__).joinpath("scenarios", fname))
