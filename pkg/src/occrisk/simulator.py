"""Closed-loop episodes: replan, integrate, detect collisions, score outcomes."""

from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from occrisk.geometry import OrientedBox, box_overlap
from occrisk.planner import PlannerParams, plan
from occrisk.risk import MODES, OCCLUSION_AWARE, OBSERVED_ONLY, RiskConfig, assess
from occrisk.scene import (IntersectionMap, SaturationError, Scenario,
                           generate_scenario)

GOAL_REACHED = "goal_reached"
COLLISION = "collision"
TIMEOUT = "timeout"


@dataclass(frozen=True)
class EpisodeConfig:
    replan_period: float = 0.1
    substeps: int = 5                 # integration steps per replan block
    horizon: float = 30.0             # wall-clock cap per episode, s
    vehicle_length: float = 4.88
    vehicle_width: float = 1.86
    risk: RiskConfig = field(default_factory=RiskConfig)
    planner: PlannerParams = field(default_factory=PlannerParams)


@dataclass(eq=False)
class EpisodeResult:
    outcome: str
    duration: float
    t: np.ndarray            # substep times, strictly increasing
    s: np.ndarray            # ego arc position
    v: np.ndarray            # ego speed
    a: np.ndarray            # commanded acceleration, constant per replan block
    x: np.ndarray
    y: np.ndarray
    n_particles: np.ndarray  # risk-distribution size behind each command
    plan_wall: np.ndarray    # assess+plan wall time per block, s


@dataclass(eq=False)
class EpisodeRecord:
    scenario_id: int
    mode: str
    result: EpisodeResult | None = None
    error: str | None = None


class _OtherTrack:
    """Ground-truth motion of one scripted vehicle on the substep grid."""

    def __init__(self, imap: IntersectionMap, state, times: np.ndarray,
                 length: float, width: float):
        route = imap.route(state.route_id)
        s = state.s + state.v * times
        self.active = s <= route.length + 1e-9
        s = np.clip(s, 0.0, route.length)
        self.xy = route.spline.eval(s)
        tang = route.spline.tangent(s)
        self.heading = np.arctan2(tang[:, 1], tang[:, 0])
        self.length = length
        self.width = width
        self.reach = 0.5 * float(np.hypot(length, width))

    def box(self, i: int) -> OrientedBox:
        return OrientedBox(self.xy[i], float(self.heading[i]),
                           self.length, self.width)


def _advance(s: float, v: float, a: float, dt: float,
             v_min: float, v_max: float) -> tuple[float, float]:
    """Constant-acceleration step with an exact stop at the speed bounds."""
    v_end = v + a * dt
    if a > 0.0 and v_end > v_max:
        t_hit = (v_max - v) / a
        return s + v * t_hit + 0.5 * a * t_hit * t_hit + v_max * (dt - t_hit), v_max
    if a < 0.0 and v_end < v_min:
        t_hit = (v_min - v) / a
        return s + v * t_hit + 0.5 * a * t_hit * t_hit + v_min * (dt - t_hit), v_min
    return s + v * dt + 0.5 * a * dt * dt, v_end


def run_episode(scenario: Scenario, mode: str,
                config: EpisodeConfig | None = None,
                particle_sink: Callable | None = None) -> EpisodeResult:
    """Drive the ego down its route once; others follow scripted speeds.

    The trace records one row per integration substep.  `particle_sink`,
    when given, receives (block time, RiskDistribution) at every replan.
    """
    if mode not in MODES:
        raise ValueError(f"unknown risk mode '{mode}'")
    config = config or EpisodeConfig()
    imap = scenario.map
    route = imap.route(scenario.ego.route_id)
    dt = config.replan_period / config.substeps
    n_blocks = int(round(config.horizon / config.replan_period))
    times = np.arange(n_blocks * config.substeps + 1) * dt
    tracks = [_OtherTrack(imap, o, times, config.vehicle_length,
                          config.vehicle_width) for o in scenario.others]

    s = float(scenario.ego.s)
    v = float(scenario.ego.v)
    ego_reach = 0.5 * float(np.hypot(config.vehicle_length, config.vehicle_width))
    rows: list[tuple] = []
    outcome, duration = TIMEOUT, config.horizon

    if s >= scenario.goal_s:
        outcome, duration = GOAL_REACHED, 0.0
        n_blocks = 0

    for k in range(n_blocks):
        idx = k * config.substeps
        t_block = float(times[idx])
        xy = route.spline.eval(s)
        tang = route.spline.tangent(s)
        heading = float(np.arctan2(tang[1], tang[0]))
        boxes = [tr.box(idx) for tr in tracks if tr.active[idx]]
        rng = np.random.default_rng(
            np.random.Philox(np.random.SeedSequence([scenario.seed, k])))
        t0 = time.perf_counter()
        dist = assess(imap, xy, heading, boxes, mode, config.risk, rng)
        a = plan(imap, route, s, v, dist, config.planner).accel
        wall = time.perf_counter() - t0
        if particle_sink is not None:
            particle_sink(t_block, dist)
        rows.append((t_block, s, v, a, float(xy[0]), float(xy[1]),
                     dist.total, wall))

        done = False
        for j in range(1, config.substeps + 1):
            s, v = _advance(s, v, a, dt, config.planner.v_min,
                            config.planner.v_max)
            s = min(s, route.length)
            t_now = float(times[idx + j])
            exy = route.spline.eval(s)
            etang = route.spline.tangent(s)
            ebox = None
            hit = False
            for tr in tracks:
                i = idx + j
                if not tr.active[i]:
                    continue
                gap = float(np.hypot(*(tr.xy[i] - exy)))
                if gap > tr.reach + ego_reach:
                    continue
                if ebox is None:
                    ebox = OrientedBox(exy, float(np.arctan2(etang[1], etang[0])),
                                       config.vehicle_length, config.vehicle_width)
                if box_overlap(ebox, tr.box(i)):
                    hit = True
                    break
            reached = not hit and s >= scenario.goal_s - 1e-12
            # The block-boundary state is recorded by the next block's replan
            # row; emit it here only when the episode ends at this substep.
            terminal = hit or reached
            if j < config.substeps or terminal or k == n_blocks - 1:
                rows.append((t_now, s, v, a, float(exy[0]), float(exy[1]),
                             dist.total, wall))
            if hit:
                outcome, duration, done = COLLISION, t_now, True
                break
            if reached:
                outcome, duration, done = GOAL_REACHED, t_now, True
                break
        if done:
            break

    arr = np.array(rows, dtype=float).reshape(-1, 8)
    return EpisodeResult(outcome, duration, arr[:, 0], arr[:, 1], arr[:, 2],
                         arr[:, 3], arr[:, 4], arr[:, 5],
                         arr[:, 6].astype(int), arr[:, 7])


def _scenario_seed(base_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([base_seed, index])
               .generate_state(1, np.uint64)[0])


_WORKER_STATE: dict = {}


def _worker_init(imap_pickle: bytes, config: EpisodeConfig,
                 ego_route_id: str, n_others: int) -> None:
    import pickle

    _WORKER_STATE["imap"] = pickle.loads(imap_pickle)
    _WORKER_STATE["config"] = config
    _WORKER_STATE["ego_route_id"] = ego_route_id
    _WORKER_STATE["n_others"] = n_others


def _run_one(imap: IntersectionMap, config: EpisodeConfig, ego_route_id: str,
             n_others: int, scenario_id: int, seed: int,
             mode: str) -> EpisodeRecord:
    try:
        scenario = generate_scenario(
            imap, ego_route_id, n_others, seed, scenario_id,
            vehicle_length=config.vehicle_length,
            vehicle_width=config.vehicle_width, horizon=config.horizon)
        return EpisodeRecord(scenario_id, mode,
                             result=run_episode(scenario, mode, config))
    except SaturationError as exc:
        return EpisodeRecord(scenario_id, mode, error=str(exc))


def _worker_run(task: tuple[int, int, str]) -> EpisodeRecord:
    scenario_id, seed, mode = task
    return _run_one(_WORKER_STATE["imap"], _WORKER_STATE["config"],
                    _WORKER_STATE["ego_route_id"], _WORKER_STATE["n_others"],
                    scenario_id, seed, mode)


def run_batch(imap: IntersectionMap, ego_route_id: str, n_scenarios: int,
              n_others: int, modes: tuple[str, ...] = (OCCLUSION_AWARE,
                                                       OBSERVED_ONLY),
              base_seed: int = 0, parallelism: int = 1,
              config: EpisodeConfig | None = None) -> list[EpisodeRecord]:
    """Run every (scenario, mode) episode; results sort by scenario then mode.

    Scenarios are regenerated from per-index seeds inside each worker, so the
    record list is identical for any parallelism level.
    """
    config = config or EpisodeConfig()
    for mode in modes:
        if mode not in MODES:
            raise ValueError(f"unknown risk mode '{mode}'")
    tasks = [(i, _scenario_seed(base_seed, i), mode)
             for i in range(n_scenarios) for mode in modes]
    if parallelism <= 1:
        records = [_run_one(imap, config, ego_route_id, n_others, *task)
                   for task in tasks]
    else:
        import pickle

        with ProcessPoolExecutor(
                max_workers=parallelism, initializer=_worker_init,
                initargs=(pickle.dumps(imap), config, ego_route_id,
                          n_others)) as pool:
            records = list(pool.map(_worker_run, tasks, chunksize=8))
    order = {mode: i for i, mode in enumerate(modes)}
    records.sort(key=lambda r: (r.scenario_id, order[r.mode]))
    return records
