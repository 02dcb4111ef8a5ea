"""Closed-loop episode execution: wires the sensor pipeline, runtime risk
monitor and planner stack around the world model and records a trace.

The control cycle (sense, assess risk, plan, act) runs every t_cycle; the
world integrates at dt with the command held between cycles. An episode ends
at the goal bay, at the first collision, or at t_max.
"""

from __future__ import annotations

import math
import time as _clock
from dataclasses import dataclass, field

import numpy as np

from .planners import PlannerStack, TrackerGains, plan_path, static_profile, ttc as path_ttc
from .risk import RISK_THRESHOLD, CueConfig, FuzzyRuleBase, RiskMonitor, load_rulebase
from .scenarios import (
    ConcreteScenario,
    FunctionalScenario,
    OddSpec,
    RequirementParams,
    rng_stream,
)
from .sensing import Detection, SensorConfig, SensorPipeline, evaluate_uc_avp_01
from .world import (
    SIGNAL_CAP,
    Command,
    OrientedRect,
    Trace,
    TraceSample,
    WorldState,
    build_world,
    collision_check,
    ego_step,
    parked_vehicle_rect,
    pedestrian_step,
)


class SimulationFault(RuntimeError):
    """Non-finite state reached during integration; carries the trace prefix."""

    def __init__(self, message: str, trace: Trace):
        super().__init__(message)
        self.trace = trace


@dataclass(frozen=True)
class StackConfig:
    """Everything needed to assemble the per-episode closed-loop stack."""

    sensor: SensorConfig = field(default_factory=SensorConfig)
    params: RequirementParams = field(default_factory=RequirementParams)
    gains: TrackerGains = field(default_factory=TrackerGains)
    aeb_enabled: bool = True
    shield_enabled: bool = True
    ground_truth_aeb: bool = False
    sensing_enabled: bool = True
    risk_enabled: bool = True
    rulebase: FuzzyRuleBase | None = None
    cue: CueConfig = field(default_factory=CueConfig)
    risk_threshold: float = RISK_THRESHOLD


@dataclass(frozen=True)
class EpisodeConfig:
    dt: float = 0.05
    t_max: float = 60.0
    config_hash: str = ""

    def __post_init__(self) -> None:
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")
        if self.t_max <= 0.0:
            raise ValueError("t_max must be positive")


@dataclass
class Stack:
    """Assembled per-episode components (planner owns path and AEB latch)."""

    planner: PlannerStack
    params: RequirementParams
    pipeline: SensorPipeline | None = None
    monitor: RiskMonitor | None = None
    cue_stream: np.random.Generator | None = None
    noise_scale: float = 1.0
    ground_truth_aeb: bool = False


def assemble_stack(
    sc: ConcreteScenario,
    fs: FunctionalScenario,
    cfg: StackConfig,
    odd: OddSpec | None = None,
) -> Stack:
    """Plan the path and seed the per-episode random streams."""
    odd = odd or OddSpec()
    layout = fs.map_layout
    parked = [parked_vehicle_rect(layout.bay(i)) for i in sc.parked_vehicle_bays]
    path = plan_path(
        layout,
        (sc.ego_start_s, layout.lane_center_y),
        sc.goal_bay,
        parked,
        cfg.params,
    )
    profile = static_profile(path, odd, sc.ego_cruise)
    planner = PlannerStack(path, profile, cfg.params, cfg.gains, aeb_enabled=cfg.aeb_enabled)
    pipeline = None
    if cfg.sensing_enabled:
        pipeline = SensorPipeline(cfg.sensor, rng_stream(sc.seed, "perception"))
    monitor = None
    cue_stream = None
    if cfg.risk_enabled:
        monitor = RiskMonitor(
            rulebase=cfg.rulebase or load_rulebase(),
            cue_cfg=cfg.cue,
            threshold=cfg.risk_threshold,
            shield_enabled=cfg.shield_enabled,
        )
        cue_stream = rng_stream(sc.seed, "risk-cues")
    return Stack(
        planner=planner,
        params=cfg.params,
        pipeline=pipeline,
        monitor=monitor,
        cue_stream=cue_stream,
        noise_scale=sc.perception_noise_scale,
        ground_truth_aeb=cfg.ground_truth_aeb,
    )


def _gt_detections(world: WorldState) -> list[Detection]:
    """Oracle detections for a ground-truth-driven AEB: every agent, exact
    position and velocity, class label straight from the world."""
    dets = []
    for p in world.pedestrians:
        vx, vy = p.velocity()
        dets.append(
            Detection(
                class_label=p.class_label,
                x=p.x,
                y=p.y,
                box=OrientedRect(p.x, p.y, p.radius, p.radius, 0.0),
                v_est=math.hypot(vx, vy),
                vx_est=vx,
                vy_est=vy,
                v_tracked=True,
            )
        )
    return dets


def _min_ped_gap(world: WorldState) -> float:
    footprint = world.ego.footprint()
    gap = SIGNAL_CAP
    for p in world.pedestrians:
        gap = min(gap, footprint.signed_distance(p.x, p.y) - p.radius)
    return gap


def run_episode(
    sc: ConcreteScenario,
    fs: FunctionalScenario,
    stack: Stack | StackConfig,
    cfg: EpisodeConfig | None = None,
    odd: OddSpec | None = None,
) -> Trace:
    """Run one episode; the trace records every dt step.

    Termination: goal reached (tracker standstill in the goal bay), first
    collision, or t_max. Commands are issued every params.t_cycle and
    zero-order-held in between.
    """
    cfg = cfg or EpisodeConfig()
    odd = odd or OddSpec()
    if isinstance(stack, StackConfig):
        stack = assemble_stack(sc, fs, stack, odd)

    world = build_world(sc, fs)
    params = stack.params
    steps_per_cycle = max(1, int(round(params.t_cycle / cfg.dt)))
    n_steps = int(round(cfg.t_max / cfg.dt))
    ped_params = list(sc.pedestrians)

    trace = Trace(dt=cfg.dt, scenario_id=sc.scenario_id, seed=sc.seed,
                  config_hash=cfg.config_hash)

    cmd = Command()
    risk = 0.0
    n_detections = 0
    uc01_margin = params.e_detect
    cycle_time = 0.0
    cross_track = 0.0
    aeb_due = 0.0
    at_goal = False
    aeb_seen = False
    shield_seen = False
    ego_hint = 0
    n_peds = len(ped_params)
    ped_hints = [0] * n_peds
    # lateral slack above the ttc gate still guaranteed by the walk-speed
    # Lipschitz bound; while positive the pedestrian provably cannot close,
    # so its projection is skipped
    ped_slack = [0.0] * n_peds
    ped_fresh = [False] * n_peds

    for k in range(n_steps + 1):
        t = k * cfg.dt

        if k % steps_per_cycle == 0:
            started = _clock.perf_counter()
            detections = stack.pipeline.step(world, stack.noise_scale) if stack.pipeline else []
            aeb_input = _gt_detections(world) if stack.ground_truth_aeb else detections
            cmd, diag = stack.planner.plan_act_cycle(world.ego, aeb_input)
            if stack.monitor is not None:
                cmd, sample = stack.monitor.step(world, detections, stack.cue_stream, cmd)
                risk = sample.risk
                if sample.shield_latched and not shield_seen:
                    shield_seen = True
                    trace.events.append({"type": "shield_activation", "t": t})
            if not (math.isfinite(cmd.a_cmd) and math.isfinite(cmd.delta_cmd)):
                raise SimulationFault(f"non-finite command at t={t:.3f}", trace)
            n_detections = len(detections)
            if stack.pipeline is not None:
                _, uc01_margin = evaluate_uc_avp_01(world, detections, params)
            cross_track = diag.get("cross_track", 0.0)
            at_goal = bool(diag.get("at_goal", False))
            aeb_due = diag.get("aeb_due", 0.0)
            if aeb_due and not aeb_seen:
                aeb_seen = True
                trace.events.append({"type": "aeb_trigger", "t": t})
            cycle_time = _clock.perf_counter() - started

        path = getattr(stack.planner, "path", None)
        ttc = SIGNAL_CAP
        margin = 0.0
        if path is not None:
            s_ego, _, ego_hint = path.project(world.ego.x, world.ego.y, ego_hint, window=8)
            margin = path.margin_at(s_ego)
            for i, p in enumerate(world.pedestrians):
                if ped_slack[i] > 0.0:
                    ped_fresh[i] = False
                    continue
                # a stale hint after skipped steps forces a full scan
                window = 8 if ped_fresh[i] else 0
                s_obj, lateral, ped_hints[i] = path.project(p.x, p.y, ped_hints[i], window)
                ped_fresh[i] = True
                gate = world.ego.half_width + p.radius + params.e_detect
                if lateral > gate:
                    ped_slack[i] = lateral - gate
                    continue
                ttc = min(ttc, path_ttc(world.ego, (p.x, p.y), p.velocity(),
                                        p.radius, path, params, s_ego,
                                        obj_proj=(s_obj, lateral)))

        trace.samples.append(TraceSample(
            t=t,
            ego_x=world.ego.x,
            ego_y=world.ego.y,
            ego_theta=world.ego.theta,
            ego_v=world.ego.v,
            ego_a=world.ego.a,
            ego_delta=world.ego.delta,
            cmd_a=cmd.a_cmd,
            cmd_delta=cmd.delta_cmd,
            min_ped_dist=_min_ped_gap(world),
            ttc=ttc,
            risk=risk,
            brake_flag=int(cmd.brake_flag),
            collision=int(world.collision is not None),
            n_detections=n_detections,
            loc_error=0.0,
            cross_track=cross_track,
            cycle_time=cycle_time,
            uc01_margin=uc01_margin,
            path_clearance_margin=margin,
            aeb_due=aeb_due,
            brake_source=cmd.source,
        ))

        if world.collision is not None:
            break
        if at_goal:
            trace.events.append({"type": "goal_reached", "t": t})
            break
        if k == n_steps:
            trace.events.append({"type": "timeout", "t": t})
            break

        for i, p in enumerate(world.pedestrians):
            world.pedestrians[i] = pedestrian_step(p, world.ego, ped_params[i], cfg.dt)
            if ped_slack[i] > 0.0:
                ped_slack[i] -= ped_params[i].walk_speed * cfg.dt
        world.ego = ego_step(world.ego, cmd, cfg.dt, odd)
        world.time = (k + 1) * cfg.dt
        if not all(math.isfinite(v) for v in
                   (world.ego.x, world.ego.y, world.ego.theta, world.ego.v)):
            raise SimulationFault(f"non-finite ego state at t={world.time:.3f}", trace)

        event = collision_check(world)
        if event is not None:
            world.collision = event
            trace.events.append({
                "type": "collision",
                "t": world.time,
                "actor_id": event.actor_id,
                "ego_v_at_impact": event.ego_v_at_impact,
            })

    return trace
