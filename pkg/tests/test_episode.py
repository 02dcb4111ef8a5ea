import json
import math
from dataclasses import replace

import pytest

from avpsim import episode as episode_mod
from avpsim.episode import (
    EpisodeConfig,
    SimulationFault,
    Stack,
    StackConfig,
    assemble_stack,
    run_episode,
)
from avpsim.planners import ttc
from avpsim.scenarios import (
    ConcreteScenario,
    FunctionalScenario,
    OddSpec,
    ParameterRange,
    RequirementParams,
    animal_scenario,
    default_map,
    sample_scenario,
    walkout_scenario,
)
from avpsim.sensing import SensorConfig
from avpsim.world import (
    SIGNAL_CAP,
    WAITING,
    WALKING,
    Command,
    EgoState,
    PedestrianState,
    WorldState,
    build_world,
    ego_step,
    parked_vehicle_rect,
    pedestrian_step,
    write_trace,
)

ODD = OddSpec()
PERFECT = StackConfig(sensor=SensorConfig.perfect())
# sensing and risk monitoring off: AEB runs on ground-truth detections
LEAN_GT_AEB = StackConfig(
    sensor=SensorConfig.perfect(),
    sensing_enabled=False,
    risk_enabled=False,
    ground_truth_aeb=True,
)


class ConstantPlanner:
    """Planner stand-in: fixed command, never reaches the goal, no path."""

    def __init__(self, a=0.0, delta=0.0):
        self.cmd = Command(a_cmd=a, delta_cmd=delta)

    def plan_act_cycle(self, ego, detections):
        return self.cmd, {}


class CountingPlanner:
    """Emits a distinct acceleration each control cycle, NaN after fail_at."""

    def __init__(self, fail_at=None):
        self.calls = 0
        self.fail_at = fail_at

    def plan_act_cycle(self, ego, detections):
        self.calls += 1
        if self.fail_at is not None and self.calls > self.fail_at:
            return Command(a_cmd=math.nan), {}
        return Command(a_cmd=0.1 * self.calls), {}


def stub_stack(planner=None):
    return Stack(planner=planner or ConstantPlanner(), params=RequirementParams())


def plain_scenario():
    """No other actors: the ego just drives to its bay."""
    fs = FunctionalScenario(
        name="plain",
        map_layout=default_map(),
        actor_roles=(),
        parameter_ranges=(ParameterRange("ego_start_s", 0.0, 10.0),),
        goal_bay=11,
        parked_vehicle_bays=(2, 6),
    )
    sc = ConcreteScenario(
        scenario_id="plain-0",
        seed=0,
        ego_start_s=2.0,
        goal_bay=11,
        pedestrians=(),
        parked_vehicle_bays=(2, 6),
    )
    return fs, sc


# --------------------------------------------------------------------------
# Termination and sample accounting.


@pytest.mark.parametrize(
    "dt,t_max,expected",
    [(0.05, 0.1, 3), (0.1, 0.1, 2), (0.05, 0.5, 11)],
)
def test_timeout_sample_count(dt, t_max, expected):
    fs = walkout_scenario()
    sc = sample_scenario(fs, seed=0)
    trace = run_episode(sc, fs, stub_stack(), EpisodeConfig(dt=dt, t_max=t_max))
    assert len(trace.samples) == expected
    assert [s.t for s in trace.samples] == [k * dt for k in range(expected)]
    assert trace.events == [{"type": "timeout", "t": trace.samples[-1].t}]


def test_goal_termination():
    fs = walkout_scenario()
    sc = sample_scenario(fs, seed=3)
    trace = run_episode(sc, fs, PERFECT)
    events = {e["type"]: e for e in trace.events}
    assert "goal_reached" in events
    assert events["goal_reached"]["t"] == trace.samples[-1].t
    assert not trace.collided()
    assert trace.duration < 60.0
    assert all(s.min_ped_dist > 0.0 for s in trace.samples)


def test_collision_termination():
    # the animal is not a known class, so a perfect sensor never reports it;
    # with the shield off nothing stops the ego
    fs = animal_scenario()
    sc = sample_scenario(fs, seed=5)
    trace = run_episode(sc, fs, replace(PERFECT, shield_enabled=False))
    assert trace.collided()
    collisions = [e for e in trace.events if e["type"] == "collision"]
    assert len(collisions) == 1
    assert collisions[0]["ego_v_at_impact"] > 0.0
    assert collisions[0]["actor_id"] == "animal_1"
    assert trace.samples[-1].collision == 1
    assert all(s.collision == 0 for s in trace.samples[:-1])
    assert collisions[0]["t"] == trace.samples[-1].t


def test_zero_order_hold():
    fs = walkout_scenario()
    sc = sample_scenario(fs, seed=0)
    trace = run_episode(sc, fs, stub_stack(CountingPlanner()), EpisodeConfig(dt=0.05, t_max=0.5))
    # t_cycle = 0.1 -> a fresh command every second step, held in between
    for k, s in enumerate(trace.samples):
        assert s.cmd_a == 0.1 * (k // 2 + 1)


# --------------------------------------------------------------------------
# Fault handling.


def test_non_finite_command_fault():
    fs = walkout_scenario()
    sc = sample_scenario(fs, seed=0)
    with pytest.raises(SimulationFault, match="non-finite command at t=0.200"):
        run_episode(sc, fs, stub_stack(CountingPlanner(fail_at=2)))
    try:
        run_episode(sc, fs, stub_stack(CountingPlanner(fail_at=2)))
    except SimulationFault as fault:
        # two clean cycles of two steps each were recorded before the fault
        assert len(fault.trace.samples) == 4
        assert [s.t for s in fault.trace.samples] == [k * 0.05 for k in range(4)]


def test_non_finite_state_fault(monkeypatch):
    real = episode_mod.ego_step
    calls = {"n": 0}

    def corrupted(ego, cmd, dt, odd):
        calls["n"] += 1
        out = real(ego, cmd, dt, odd)
        if calls["n"] >= 5:
            out.x = math.nan
        return out

    monkeypatch.setattr(episode_mod, "ego_step", corrupted)
    fs = walkout_scenario()
    sc = sample_scenario(fs, seed=0)
    with pytest.raises(SimulationFault, match="non-finite ego state") as excinfo:
        run_episode(sc, fs, PERFECT)
    assert len(excinfo.value.trace.samples) == 5


# --------------------------------------------------------------------------
# Replay conformance: re-integrate the recorded commands and recompute every
# derived signal with full-scan projections; the trace must match exactly.


def test_replay_conformance():
    fs = walkout_scenario()
    sc = sample_scenario(fs, seed=3)
    stack = assemble_stack(sc, fs, PERFECT)
    path = stack.planner.path
    params = stack.params
    trace = run_episode(sc, fs, stack)
    assert len(trace.samples) > 100

    world = build_world(sc, fs)
    for i, s in enumerate(trace.samples):
        assert (s.ego_x, s.ego_y, s.ego_theta, s.ego_v) == (
            world.ego.x, world.ego.y, world.ego.theta, world.ego.v)
        assert (s.ego_a, s.ego_delta) == (world.ego.a, world.ego.delta)

        s_ego, _, _ = path.project(world.ego.x, world.ego.y, 0, 0)
        best_ttc = SIGNAL_CAP
        footprint = world.ego.footprint()
        best_gap = SIGNAL_CAP
        for p in world.pedestrians:
            s_obj, lateral, _ = path.project(p.x, p.y, 0, 0)
            best_ttc = min(best_ttc, ttc(world.ego, (p.x, p.y), p.velocity(),
                                         p.radius, path, params, s_ego,
                                         obj_proj=(s_obj, lateral)))
            best_gap = min(best_gap, footprint.signed_distance(p.x, p.y) - p.radius)
        assert s.ttc == best_ttc
        assert s.min_ped_dist == best_gap
        assert s.path_clearance_margin == path.margin_at(s_ego)

        if i == len(trace.samples) - 1:
            break
        for j, p in enumerate(world.pedestrians):
            world.pedestrians[j] = pedestrian_step(p, world.ego, sc.pedestrians[j], trace.dt)
        world.ego = ego_step(world.ego, Command(a_cmd=s.cmd_a, delta_cmd=s.cmd_delta),
                             trace.dt, ODD)


def test_operating_limits_hold_on_every_sample():
    fs = walkout_scenario()
    for seed in range(5):
        sc = sample_scenario(fs, seed=seed)
        trace = run_episode(sc, fs, PERFECT)
        for s in trace.samples:
            assert ODD.ego_v_min <= s.ego_v <= ODD.ego_v_max
            assert ODD.ego_a_min <= s.ego_a <= ODD.ego_a_max


def test_euler_refinement_is_first_order():
    # halving dt must halve the position discrepancy (explicit Euler)
    fs, sc = plain_scenario()
    cfg = replace(PERFECT, sensing_enabled=False, risk_enabled=False)
    runs = [run_episode(sc, fs, cfg, EpisodeConfig(dt=dt))
            for dt in (0.05, 0.025, 0.0125)]
    assert all({e["type"] for e in r.events} == {"goal_reached"} for r in runs)

    def pos(trace, t):
        s = trace.samples[round(t / trace.dt)]
        return s.ego_x, s.ego_y

    for t in (2.0, 6.0):
        (ax, ay), (bx, by), (cx, cy) = (pos(r, t) for r in runs)
        d1 = math.hypot(ax - bx, ay - by)
        d2 = math.hypot(bx - cx, by - cy)
        assert d1 < 0.05
        assert d2 < 0.6 * d1


# --------------------------------------------------------------------------
# Determinism.


def test_rerun_writes_identical_csv(tmp_path):
    fs = walkout_scenario()
    sc = sample_scenario(fs, seed=11)
    paths = []
    for run in range(2):
        trace = run_episode(sc, fs, StackConfig())  # noisy sensor
        csv_path = tmp_path / f"run{run}.csv"
        write_trace(trace, csv_path)
        paths.append(csv_path)
    assert paths[0].read_bytes() == paths[1].read_bytes()

    # the sidecar carries the wall-clock cycle time, everything else matches
    side0 = json.loads((tmp_path / "run0.json").read_text())
    side1 = json.loads((tmp_path / "run1.json").read_text())
    side0["aux"].pop("cycle_time")
    side1["aux"].pop("cycle_time")
    assert side0 == side1

    other = run_episode(sample_scenario(fs, seed=12), fs, StackConfig())
    write_trace(other, tmp_path / "other.csv")
    assert (tmp_path / "other.csv").read_bytes() != paths[0].read_bytes()


# --------------------------------------------------------------------------
# Brake-source attribution.


def test_nominal_run_never_brakes_autonomously():
    fs = walkout_scenario()
    sc = sample_scenario(fs, seed=3)
    trace = run_episode(sc, fs, PERFECT)
    assert {s.brake_source for s in trace.samples} == {"planner"}
    assert all(s.brake_flag == 0 for s in trace.samples)


def test_shield_stops_for_unknown_class():
    fs = animal_scenario()
    sc = sample_scenario(fs, seed=5)
    trace = run_episode(sc, fs, PERFECT)
    assert not trace.collided()
    assert "shield" in {s.brake_source for s in trace.samples}
    assert any(e["type"] == "shield_activation" for e in trace.events)
    # monitor risk is recorded on the trace
    assert max(s.risk for s in trace.samples) > 0.0


def test_ground_truth_aeb_sees_every_class():
    fs = animal_scenario()
    sc = sample_scenario(fs, seed=5)
    trace = run_episode(sc, fs, LEAN_GT_AEB)
    assert not trace.collided()
    assert "aeb" in {s.brake_source for s in trace.samples}
    assert any(e["type"] == "aeb_trigger" for e in trace.events)


# --------------------------------------------------------------------------
# Ground-truth helpers.


def ped(x, y, mode=WAITING, speed=1.5, heading=-math.pi / 2, label="pedestrian"):
    return PedestrianState(id="p", x=x, y=y, speed=speed, heading=heading,
                           radius=0.3, class_label=label, mode=mode, stop_y=-10.0)


def make_world(peds):
    return WorldState(
        time=0.0,
        ego=EgoState(x=0.0, y=1.5, theta=0.0),
        pedestrians=list(peds),
        parked_vehicles=[parked_vehicle_rect(default_map().bay(2))],
        map=default_map(),
    )


def test_min_ped_gap_matches_hand_geometry():
    # axis-aligned ego at (0, 1.5): footprint center (1.3, 1.5),
    # half extents 2.2 x 0.9
    w = make_world([ped(1.3, 5.0)])
    assert episode_mod._min_ped_gap(w) == pytest.approx(5.0 - 1.5 - 0.9 - 0.3, abs=1e-12)
    w = make_world([ped(6.0, 1.5)])
    assert episode_mod._min_ped_gap(w) == pytest.approx(6.0 - 3.5 - 0.3, abs=1e-12)
    # a pedestrian inside the footprint yields a negative gap
    w = make_world([ped(3.0, 1.5)])
    assert episode_mod._min_ped_gap(w) == pytest.approx(-(0.5 + 0.3), abs=1e-12)
    assert episode_mod._min_ped_gap(make_world([])) == SIGNAL_CAP


def test_ground_truth_detections():
    walker = ped(5.0, 3.0, mode=WALKING, speed=1.2, heading=-math.pi / 2, label="animal")
    waiter = ped(8.0, 4.0)
    dets = episode_mod._gt_detections(make_world([walker, waiter]))
    # parked vehicles are not vulnerable and are skipped
    assert [d.class_label for d in dets] == ["animal", "pedestrian"]
    assert (dets[0].x, dets[0].y) == (5.0, 3.0)
    assert dets[0].v_est == pytest.approx(1.2, abs=1e-12)
    assert dets[0].vy_est == pytest.approx(-1.2, abs=1e-12)
    assert dets[1].v_est == 0.0
    assert all(d.v_tracked for d in dets)


# --------------------------------------------------------------------------
# Assembly and validation.


def test_assemble_stack_toggles():
    fs = walkout_scenario()
    sc = sample_scenario(fs, seed=0)
    full = assemble_stack(sc, fs, PERFECT)
    assert full.pipeline is not None
    assert full.monitor is not None and full.cue_stream is not None
    assert full.noise_scale == sc.perception_noise_scale

    lean = assemble_stack(sc, fs, replace(PERFECT, sensing_enabled=False, risk_enabled=False))
    assert lean.pipeline is None
    assert lean.monitor is None and lean.cue_stream is None

    gt = assemble_stack(sc, fs, LEAN_GT_AEB)
    assert gt.ground_truth_aeb


def test_episode_config_validation():
    with pytest.raises(ValueError):
        EpisodeConfig(dt=0.0)
    with pytest.raises(ValueError):
        EpisodeConfig(t_max=-1.0)
    with pytest.raises(Exception):
        PERFECT.aeb_enabled = False  # frozen


def test_signal_caps_and_trace_shape():
    fs = walkout_scenario()
    sc = sample_scenario(fs, seed=3)
    trace = run_episode(sc, fs, PERFECT)
    n = len(trace.samples)
    signals = trace.signals()
    for name in ("ego_v", "ttc", "min_ped_dist", "risk", "uc01_margin"):
        assert len(signals[name]) == n
    assert all(s.ttc <= SIGNAL_CAP for s in trace.samples)
    assert all(s.min_ped_dist <= SIGNAL_CAP for s in trace.samples)
    assert trace.scenario_id == sc.scenario_id
    assert trace.seed == sc.seed
