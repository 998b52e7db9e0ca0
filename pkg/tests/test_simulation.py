import copy
import csv
import json

import numpy as np
import pytest

from smpc_cvpm.planners import TrackedObstacle, WorldState
from smpc_cvpm.scheme import SMPC_SAFE, BootstrapError, DecisionTrace
from smpc_cvpm.simulation import (CSV_COLUMNS, ScenarioError, SimulationTrace, StepRecord, average_stage_cost,
                                  bundled, collision_check, load_scenario, load_summary, parse_scenario,
                                  run_closed_loop, save_trace)
from smpc_cvpm.simulation import runner
from smpc_cvpm.uncertainty import sample
from smpc_cvpm.vehicle_models import EgoInput, EgoState, ObstacleState, step_obstacle

BASE = {"schema_version": 1, "id": "t", "T": 0.1, "N_sim": 10, "ego": {"init": {"v": 20.0}}}


def doc(**kw):
    d = copy.deepcopy(BASE)
    d.update(kw)
    return d


def lead(oid="lead", s=30.0, vs=15.0, d=0.0, seed=3, **beh):
    return {"id": oid, "init": {"s": s, "vs": vs, "d": d}, "behavior": {"type": "model", "seed": seed, **beh}}


def test_empty_road_run():
    tr = run_closed_loop(parse_scenario(doc()), "smpc_cvpm")
    assert tr.N_sim == 10 and tr.collisions == 0
    assert tr.J_sim == pytest.approx(0.0, abs=1e-10)
    assert set(tr.branches) == {SMPC_SAFE}


def test_defaults():
    sc = parse_scenario(doc())
    cfg = sc.planner
    assert (cfg.N, cfg.beta, cfg.box.a_min, cfg.box.a_max) == (15, 0.9, -8.0, 3.0)
    assert sc.road.lanes == 3 and sc.road.edges == (-1.75, 8.75)
    assert sc.ego_ref.v == 20.0 and sc.obstacles == [] and sc.anticipated


def test_average_stage_cost_example():
    sc = parse_scenario(doc())
    cfg = sc.planner
    recs = []
    for ego, u in [(EgoState(0.0, 0.0, 0.0, 20.0), EgoInput(0.0, 0.0)),
                   (EgoState(2.0, 1.0, 0.0, 20.0), EgoInput(0.0, 0.0)),
                   (EgoState(4.0, 0.0, 0.1, 18.0), EgoInput(1.0, 0.1))]:
        dec = DecisionTrace(len(recs), SMPC_SAFE, "optimal", True, None, u)
        recs.append(StepRecord(0.1 * len(recs), WorldState(ego), dec, 0.0, False))
    tr = SimulationTrace("h", "smpc_cvpm", 0, recs, WorldState(EgoState(6.0, 0.0, 0.0, 18.0)),
                         (cfg.Q, cfg.R, cfg.xi_ref))
    # 0, 0.1*1, and 1*0.01 + 0.05*4 + 0.05*1 + 1*0.01
    assert average_stage_cost(tr) == pytest.approx((0.0 + 0.1 + 0.27) / 3)
    with pytest.raises(ValueError):
        average_stage_cost(SimulationTrace("e", "smpc_cvpm", 0, [], None, tr.weights))


def test_j_sim_equals_recomputed_cost():
    sc = parse_scenario(doc(obstacles=[lead()], N_sim=20))
    tr = run_closed_loop(sc, "smpc_cvpm", 1)
    assert abs(tr.J_sim - average_stage_cost(tr)) < 1e-9


def test_collision_check_touching_counts():
    sc = parse_scenario(doc())
    g = sc.geometry
    model = parse_scenario(doc(obstacles=[lead()])).obstacles[0].model
    ego = EgoState(0.0, 0.0, 0.0, 10.0)

    def hit(s, d):
        return collision_check(ego, [TrackedObstacle("o", ObstacleState(s, 0.0, d, 0.0), model)], g)

    assert hit(4.5, 0.0) and hit(0.0, 1.8) and hit(-4.5, -1.8)
    assert not hit(4.5 + 1e-9, 0.0) and not hit(0.0, 1.8 + 1e-9)
    assert not collision_check(ego, [], g)


def test_recorded_length_error_names_obstacle():
    states = [[10.0 + i, 10.0, 0.0, 0.0] for i in range(5)]
    bad = doc(obstacles=[{"id": "ghost", "init": {"s": 10.0, "vs": 10.0},
                          "behavior": {"type": "recorded", "states": states}}])
    with pytest.raises(ScenarioError) as err:
        parse_scenario(bad)
    assert "ghost" in str(err.value) and "obstacles[0].behavior.states" in err.value.fields


@pytest.mark.parametrize("patch,field", [({"T": -0.1}, "T"), ({"N_sim": 0}, "N_sim"),
                                         ({"speed": 3}, "<root>"), ({"road": {"lanes": 0}}, "road.lanes")])
def test_schema_errors_name_fields(patch, field):
    with pytest.raises(ScenarioError) as err:
        parse_scenario(doc(**patch))
    assert field in err.value.fields


def test_semantic_errors():
    with pytest.raises(ScenarioError) as err:
        parse_scenario(doc(obstacles=[lead("a"), lead("a", s=60.0)], planner={"a_min": 2.0, "a_max": 1.0}))
    assert "obstacles[1].id" in err.value.fields and "planner.a_min" in err.value.fields


def test_unreadable_files(tmp_path):
    with pytest.raises(ScenarioError):
        load_scenario(tmp_path / "missing.json")
    p = tmp_path / "broken.json"
    p.write_text("{not json")
    with pytest.raises(ScenarioError):
        load_scenario(p)


def test_bundled_scenarios_load():
    for name in ("overtake", "sudden_stop", "anticipated_01"):
        sc = load_scenario(bundled(name))
        assert sc.id == name
    assert load_scenario(bundled("anticipated_05")).anticipated
    assert not load_scenario(bundled("sudden_stop")).anticipated


def test_recorded_and_scripted_playback():
    states = [[20.0 + 1.5 * i, 15.0, 3.5, 0.0] for i in range(6)]
    sc = parse_scenario(doc(N_sim=5, obstacles=[
        {"id": "rec", "init": {"s": 20.0, "vs": 15.0, "d": 3.5}, "behavior": {"type": "recorded", "states": states}},
        {"id": "scr", "init": {"s": 50.0, "vs": 15.0, "d": 7.0},
         "behavior": {"type": "scripted", "inputs": [[-1.0, 0.0]] * 5}}]))
    tr = run_closed_loop(sc, "smpc_cvpm")
    worlds = [r.world for r in tr.records] + [tr.final_world]
    assert [w.obstacles[0].state.s_do for w in worlds] == [s[0] for s in states]
    vs = [w.obstacles[1].state.vs_do for w in worlds]
    assert np.allclose(np.diff(vs), -0.1)


def test_model_playback_uses_documented_seed():
    sc = parse_scenario(doc(N_sim=8, obstacles=[lead(seed=42)]))
    tr = run_closed_loop(sc, "smpc_cvpm", 5)
    spec = sc.obstacles[0]
    rng = np.random.default_rng([5, 42])
    st = spec.init
    for r in tr.records[1:] + [None]:
        st = step_obstacle(st, spec.model, sample(spec.model.w, rng))
        got = (tr.final_world if r is None else r.world).obstacles[0].state
        assert np.array_equal(got.as_array(), st.as_array())


def test_determinism_and_seed_effect():
    sc = load_scenario(bundled("anticipated_02"))
    a, b = run_closed_loop(sc, "smpc_cvpm", 0), run_closed_loop(sc, "smpc_cvpm", 0)
    assert a.comparable() == b.comparable()
    c = run_closed_loop(sc, "smpc_cvpm", 1)
    assert a.comparable() != c.comparable()


def test_bootstrap_failure():
    wall = {"id": "wall", "init": {"s": 5.0, "vs": 0.0}, "behavior": {"type": "model"},
            "model": {"ref": {"vs": 0.0}}}
    sc = parse_scenario(doc(N_sim=3, road={"lanes": 1}, obstacles=[wall]))
    with pytest.raises(BootstrapError):
        run_closed_loop(sc, "smpc_ftp")
    with pytest.raises(ValueError):
        run_closed_loop(sc, "teleport")


def test_trace_files(tmp_path):
    sc = parse_scenario(doc(obstacles=[lead()]))
    tr = run_closed_loop(sc, "smpc_ftp", 2)
    csv_path, json_path = save_trace(tr, tmp_path, extra={"note": "x"})
    with open(csv_path, newline="") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == CSV_COLUMNS and len(rows) == tr.N_sim + 1
    assert [float(r[CSV_COLUMNS.index("s")]) for r in rows[1:]] == [r.world.ego.s for r in tr.records]
    summary = load_summary(json_path)
    expect = json.loads(json.dumps({**tr.summary(), "note": "x"}))
    assert summary == expect
    assert summary["J_sim"] == tr.J_sim


def test_failed_summary_write_removes_csv(tmp_path, monkeypatch):
    tr = run_closed_loop(parse_scenario(doc(N_sim=3)), "smpc_cvpm")

    def boom(*a, **k):
        raise OSError("disk full")

    monkeypatch.setattr(runner.json, "dump", boom)
    with pytest.raises(OSError):
        save_trace(tr, tmp_path)
    assert list(tmp_path.iterdir()) == []
