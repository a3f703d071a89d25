"""Small scenario documents built in code for engine and CLI tests."""

import copy

from resilient_dmpc.scenario import SCHEMA, parse_scenario

_BASE = {
    "schema": SCHEMA,
    "name": "mini",
    "plant": {"A": [[1.0]], "B": [[1.0]]},
    "horizon": 3,
    "eta": 10.0,
    "gain": {"mode": "explicit", "K": [[-0.25]]},
    "input_constraint": {"kind": "box", "lower": [-10.0], "upper": [10.0]},
    "agents": [1, 2],
    "edges": [[1, 2]],
    "weights": [1.0],
    "initial_states": {"1": [1.0], "2": [-1.0]},
    "T_max": 50,
}


def mini_doc(**changes):
    """Two scalar integrators coupled with weight 1, unless overridden."""
    doc = copy.deepcopy(_BASE)
    doc.update(copy.deepcopy(changes))
    return doc


def mini_scenario(**changes):
    return parse_scenario(mini_doc(**changes))


def infeasible_doc():
    """Agent 1 starts far outside a state box it cannot re-enter in one step."""
    return mini_doc(
        eta=0.1,
        weights=None,
        input_constraint={"kind": "box", "lower": [-0.1], "upper": [0.1]},
        state_box={"lower": [0.0], "upper": [1.0]},
        initial_states={"1": [5.0], "2": [0.5]},
        T_max=10,
    )
