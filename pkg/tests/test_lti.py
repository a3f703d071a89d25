import numpy as np
import pytest

from oracles import spectral_radius_oracle
from resilient_dmpc.linalg import DimensionError, mat_power_sum
from resilient_dmpc.lti import (
    InputConstraint,
    Plant,
    SynthesisError,
    check_consensus_condition,
    check_feasibility_conditions,
    step,
    synthesize_gain,
)

OSC = Plant([[0.0, 1.0], [-1.0, 0.0]], [[0.5], [0.5]])
K0 = np.array([[0.3125, -0.3724]])
T, TAU = 0.2, 0.6
PLATOON = Plant(
    [[1.0, T, T * T / 2], [0.0, 1.0, T], [0.0, 0.0, 1 - T / TAU]],
    [[0.0], [0.0], [T / TAU]],
)


def test_plant_validation():
    with pytest.raises(DimensionError):
        Plant(np.eye(2), np.ones((3, 1)))
    with pytest.raises(DimensionError):
        Plant(np.ones((2, 3)), np.ones((2, 1)))
    with pytest.raises(ValueError):
        Plant([[2.0]], [[0.0]])  # unstable mode, no input


def test_stabilizable_but_uncontrollable():
    p = Plant(np.diag([0.5, 1.5]), [[0.0], [1.0]])
    assert p.is_stabilizable()


def test_input_constraint_contains_origin():
    with pytest.raises(ValueError):
        InputConstraint.box([0.1], [0.5])
    with pytest.raises(ValueError):
        InputConstraint.ball(0.0)
    with pytest.raises(ValueError):
        InputConstraint("diamond")


def test_input_constraint_projection():
    box = InputConstraint.box([-0.5], [0.5])
    assert box.project([0.7]) == pytest.approx([0.5])
    assert box.contains([0.5]) and not box.contains([0.5 + 1e-9])
    assert box.violation([-0.8]) == pytest.approx(0.3)
    ball = InputConstraint.ball(1.0)
    assert ball.project([3.0, 4.0]) == pytest.approx([0.6, 0.8])


def test_scalar_gain_formula():
    p = Plant([[1.0]], [[1.0]])
    assert synthesize_gain(p, [[1.0]], [[1.0]], 2.0)[0, 0] == pytest.approx(-0.25)


def test_example1_gain_formula():
    lam = 5 / 3
    k = synthesize_gain(OSC, np.eye(2), [[1.0]], lam)
    a, b = OSC.a, OSC.b
    expected = -(1 / lam) * (1 / (b.T @ b + 1.0)) * (b.T @ a)
    assert k == pytest.approx(expected, abs=1e-15)
    # the documented K(0) is not what the formula gives; it is used as an override
    assert not np.allclose(k, K0, atol=1e-2)


def test_gain_errors():
    with pytest.raises(ValueError):
        synthesize_gain(OSC, np.eye(2), [[1.0]], 0.0)
    with pytest.raises(DimensionError):
        synthesize_gain(OSC, np.eye(3), [[1.0]], 1.0)
    with pytest.raises(SynthesisError):
        synthesize_gain(Plant([[0.5]], [[0.0]]), [[1.0]], [[0.0]], 1.0)


def test_feasibility_k0_schur():
    p = Plant(np.diag([0.5, 0.2]), np.eye(2))
    rep = check_feasibility_conditions(p, np.zeros((2, 2)), 5)
    assert rep.ok and rep.rho_sum == 0.0
    assert rep.rho_closed_loop == pytest.approx(0.5)


def test_feasibility_k0_oscillator_fails():
    rep = check_feasibility_conditions(OSC, np.zeros((1, 2)), 5)
    assert not rep.ok
    assert rep.rho_closed_loop == pytest.approx(1.0, abs=1e-12)


def test_feasibility_example1_against_oracle():
    rep = check_feasibility_conditions(OSC, K0, 20)
    a_k = OSC.a + OSC.b @ K0
    assert rep.rho_closed_loop == pytest.approx(spectral_radius_oracle(a_k), rel=1e-9)
    s = mat_power_sum(a_k, OSC.b, K0, 20)
    assert rep.rho_sum == pytest.approx(spectral_radius_oracle(s), rel=1e-6)
    assert rep.ok
    d = rep.as_dict()
    assert d["ok"] and d["power_sum_le_1"] and d["A_K_schur"]


def test_consensus_condition():
    assert not check_consensus_condition(OSC, np.zeros((1, 2)), [1.0]).ok
    rep = check_consensus_condition(Plant([[1.0]], [[1.0]]), [[-0.25]], [2.0])
    assert rep.ok and rep.radii[0] == pytest.approx(0.5)
    assert not check_consensus_condition(OSC, K0, []).ok


def test_consensus_example1_against_oracle():
    eigs = [2 / 3, 1.0, 1.0, 5 / 3, 5 / 3]
    rep = check_consensus_condition(OSC, K0, eigs)
    for lam, r in zip(eigs, rep.radii):
        assert r == pytest.approx(spectral_radius_oracle(OSC.a + lam * OSC.b @ K0), rel=1e-6)
    assert rep.as_dict()["ok"] == rep.ok


def test_step():
    assert step(OSC, [1.0, 0.0], [0.0]) == pytest.approx([0.0, -1.0])
    assert step(OSC, [0.0, 0.0], 0.0) == pytest.approx([0.0, 0.0])
    with pytest.raises(DimensionError):
        step(OSC, [1.0, 0.0, 0.0], [0.0])


def test_step_platoon_by_hand():
    nxt = step(PLATOON, [0.0, 20.0, 0.0], [1.0])
    # s + T v + T^2/2 a, v + T a, (1 - T/tau) a + (T/tau) u
    assert nxt == pytest.approx([4.0, 20.0, 1 / 3], abs=1e-15)
