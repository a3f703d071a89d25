import numpy as np
import pytest

import resilient_dmpc.engine as eng
from conftest import cached_run
from helpers import infeasible_doc, mini_scenario
from oracles import eig_roots, pairwise_max, spectral_radius_oracle
from resilient_dmpc import disagreement, run, validate_theorem1
from resilient_dmpc.scenario import parse_scenario
from resilient_dmpc.solver import INFEASIBLE, OPTIMAL


def test_disagreement_identical_states():
    assert disagreement(np.ones((4, 2)), range(4)) == 0.0


def test_disagreement_two_agents():
    assert disagreement({3: [0.0, 0.0], 7: [3.0, 4.0]}, [3, 7]) == pytest.approx(5.0)
    assert disagreement({3: [0.0, 0.0]}, [3]) == 0.0


def test_disagreement_matches_double_loop():
    rng = np.random.default_rng(5)
    for _ in range(20):
        states = rng.normal(size=(5, 3))
        normal = [i for i in range(5) if rng.random() < 0.8] or [0]
        assert disagreement(states, normal) == pytest.approx(pairwise_max(states, normal), rel=1e-14)


def test_disagreement_empty_set():
    with pytest.raises(ValueError):
        disagreement(np.zeros((2, 2)), [])


def test_single_stable_agent_open_loop():
    res = run(mini_scenario(plant={"A": [[0.5]], "B": [[1.0]]}, agents=[1], edges=[],
                            weights=None, initial_states={"1": [1.0]}, T_max=10))
    xs = [r.states[0, 0] for r in res.rounds]
    assert xs == pytest.approx([0.5 ** t for t in range(11)], abs=1e-15)
    assert all(r.disagreement == 0.0 for r in res.rounds)
    assert res.terminated_reason == "horizon-reached"


def test_two_integrators_halve_their_gap():
    # x1 - x2 evolves as (1 + 2 K a12) (x1 - x2) = 0.5 (x1 - x2)
    res = run(mini_scenario())
    d = [r.disagreement for r in res.rounds]
    assert d == pytest.approx([2 * 0.5 ** t for t in range(51)], rel=1e-12, abs=1e-300)
    assert all(b < a for a, b in zip(d, d[1:]) if a > 0)
    assert min(t for t, v in enumerate(d) if v < 1e-3) <= 50
    x = np.array([r.states[:, 0] for r in res.rounds])
    assert np.allclose(x[:, 0], -x[:, 1], atol=1e-15)


def test_example1_first_round_inputs(example1):
    res = run(example1.with_overrides(t_max=0))
    assert len(res.rounds) == 1
    r0 = res.rounds[0]
    assert np.all(np.abs(r0.inputs) <= 0.5 + 1e-9)
    assert all(s == OPTIMAL for s in r0.qp_status)
    assert r0.disagreement == pytest.approx(pairwise_max(r0.states, range(6)))


def test_example1_normal_set_excludes_injected_agent():
    res = cached_run("example1")
    assert res.normal == (1, 2, 3, 5, 6)
    assert res.agents == (1, 2, 3, 4, 5, 6)


def test_validation_mode_candidates_feasible(example1):
    res = run(example1.with_overrides(t_max=80), validate=True)
    kinds = {v[1] for r in res.rounds for v in r.constraint_violations}
    assert "candidate-infeasible" not in kinds
    assert "candidate-cheaper" not in kinds
    assert res.terminated_reason == "horizon-reached"


def test_warm_start_saves_iterations_on_most_rounds(example1, monkeypatch):
    """Round-over-round warm start against a cold solve of the same problem."""
    orig = eng.qpsolver.solve
    pairs = []

    def compare(qp, warm_start=None, settings=None, dual_warm_start=None):
        sol = orig(qp, warm_start=warm_start, settings=settings, dual_warm_start=dual_warm_start)
        if warm_start is not None:
            cold = orig(qp, settings=settings)
            assert cold.cost == pytest.approx(sol.cost, abs=1e-5)
            if cold.iterations > 0:
                pairs.append((cold.iterations, sol.iterations))
        return sol

    monkeypatch.setattr(eng.qpsolver, "solve", compare)
    run(example1)
    assert pairs
    wins = sum(w < c for c, w in pairs)
    assert wins / len(pairs) >= 0.8, f"warm start faster on {wins}/{len(pairs)} rounds"


def test_infeasible_termination_dumps_diagnostics():
    res = run(parse_scenario(infeasible_doc()))
    assert res.terminated_reason == "infeasible"
    assert len(res.rounds) == 1
    diag = res.diagnostics
    assert diag["t"] == 0 and diag["agents"] == [1]
    assert diag["states"]["1"] == [5.0]
    assert diag["neighbors"]["1"] == [2]
    assert diag["notes"]["1"][0][0] == "qp-infeasible"
    assert res.rounds[0].qp_status == (INFEASIBLE, OPTIMAL)


def test_summary_recomputable_from_rounds():
    res = cached_run("example1")
    s = res.summary
    assert s["rounds"] == len(res.rounds) and s["final_time"] == res.rounds[-1].t
    assert s["final_disagreement"] == res.rounds[-1].disagreement
    verdicts = [v for r in res.rounds for v in r.detections if v.adversarial]
    assert s["adversarial_verdicts"] == len(verdicts) == s["true_positives"] + s["false_positives"]
    assert sum(s["qp_status_counts"].values()) == len(res.rounds) * len(res.agents)
    normal = [res.agents.index(a) for a in res.normal]
    worst = max(float(np.max(np.abs(r.inputs[normal]))) for r in res.rounds)
    assert worst <= 0.5 and s["max_input_violation"] == 0.0
    for r in res.rounds:
        assert r.disagreement == pytest.approx(pairwise_max(r.states, normal), rel=1e-12, abs=1e-15)
    assert s["terminated_reason"] == res.terminated_reason


def test_detection_off_yields_no_verdicts(example1):
    res = run(example1.with_overrides(detection=False, t_max=45))
    assert all(not r.detections for r in res.rounds)
    assert any(r.tamper_events for r in res.rounds)


def test_theorem1_zero_gain_schur_plant():
    sc = mini_scenario(plant={"A": [[0.5]], "B": [[1.0]]}, gain={"mode": "explicit", "K": [[0.0]]})
    rep = validate_theorem1(sc)
    assert rep["passes"]
    cfg = rep["configurations"][0]
    assert cfg["feasibility"]["rho_A_K"] == pytest.approx(0.5)


def test_theorem1_example1_radii(example1):
    rep = validate_theorem1(example1)
    labels = [c["configuration"] for c in rep["configurations"]]
    assert labels == ["initial", "after link (1,5) pruned", "after agent 4 isolated"]
    a, b = example1.plant.a, example1.plant.b
    for cfg in rep["configurations"]:
        k = np.array(cfg["gain"])
        a_k = a + b @ k
        assert cfg["feasibility"]["rho_A_K"] == pytest.approx(spectral_radius_oracle(a_k), rel=1e-9)
        for lam, radius in zip(cfg["consensus"]["laplacian_eigenvalues"], cfg["consensus"]["radii"]):
            assert radius == pytest.approx(spectral_radius_oracle(a + lam * b @ k), rel=1e-9)
    first = rep["configurations"][0]
    assert first["lambda_max"] == pytest.approx(5 / 3)
    assert np.allclose(first["gain"], example1.gain.k)


def test_theorem1_example1_eigenvalues(example1):
    rep = validate_theorem1(example1)
    # induced subgraph of the normal agents (agent 4, index 3, is injected)
    keep = [0, 1, 2, 4, 5]
    w = example1.initial_graph().weights(0)[np.ix_(keep, keep)]
    ref = sorted(float(x) for x in eig_roots(np.diag(w.sum(axis=1)) - w).real if abs(x) > 1e-6)
    got = rep["configurations"][0]["consensus"]["laplacian_eigenvalues"]
    assert got == pytest.approx(ref, abs=1e-6)


def test_reference_agent_follows_profile(example2):
    res = cached_run("example2")
    for r in res.rounds:
        assert np.allclose(r.states[0], example2.reference.state(r.t), atol=1e-12)
        assert r.qp_status[0] == "reference"
    assert res.rounds[-1].states[0, 1] == pytest.approx(30.0)


def test_parallel_matches_serial(example1):
    sc = example1.with_overrides(t_max=40)
    assert run(sc).digest() == run(sc, parallel=True, workers=3).digest()


def test_seed_changes_attack_draws(example1):
    sc = example1.with_overrides(t_max=35)
    a, b = run(sc), run(sc.with_overrides(seed=1))
    assert a.digest() != b.digest()
    assert a.rounds[29].states.tobytes() == b.rounds[29].states.tobytes()


def test_badly_scaled_polish_guess_does_not_abort(example1):
    # this draw once sent the KKT polish into a LAPACK convergence failure at t=1
    sc = example1.with_overrides(seed=14, attacks=(), initial_perturbation=0.1, t_max=2)
    res = run(sc)
    assert res.terminated_reason == "horizon-reached"
    assert all(s == OPTIMAL for r in res.rounds for s in r.qp_status)


def test_short_horizon_is_noted_in_validation_mode():
    sc = mini_scenario(horizon=1, input_constraint={"kind": "box", "lower": [-0.1], "upper": [0.1]},
                       initial_states={"1": [5.0], "2": [-5.0]}, T_max=2)
    first = run(sc, validate=True).rounds[0].constraint_violations
    assert [(a, kind) for a, kind, _ in first] == [(1, "horizon-kappa-outside"), (2, "horizon-kappa-outside")]
    # u0 saturates at -0.1, so x1(1) = 4.9 while agent 2 is assumed to stay at -5:
    # kappa = -0.25 * 9.9 = -2.475, which is 2.375 outside the box
    assert first[0][2] == pytest.approx(2.375)
    assert not run(sc).rounds[0].constraint_violations
