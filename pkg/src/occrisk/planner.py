"""Longitudinal planning: pick one acceleration against the risk field."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from occrisk.geometry import _runs_to_intervals
from occrisk.risk import RiskDistribution
from occrisk.scene import IntersectionMap, Route


class InfeasiblePlanError(RuntimeError):
    """No acceleration keeps the speed at or below its upper bound."""


@dataclass(frozen=True)
class PlannerParams:
    horizon: float = 1.5          # lookahead shared with the risk field, s
    sigma: float = 2.44           # risk kernel width, m
    lateral_bound: float = 1.395  # path proximity gate, m
    risk_weight: float = 1.0
    speed_weight: float = 0.016384
    v_des: float = 10.0
    v_min: float = 0.0
    v_max: float = 12.0
    a_min: float = -8.0
    a_max: float = 2.5
    accel_step: float = 0.005     # zero-anchored candidate spacing

    @property
    def discard_radius(self) -> float:
        """Particles at least this far from a candidate position are ignored."""
        return 2.0 * self.sigma


@dataclass(eq=False)
class EgoPrediction:
    """Candidate accelerations with the ego positions they reach at the horizon."""

    accels: np.ndarray
    s_hat: np.ndarray
    points: np.ndarray


@dataclass(eq=False)
class PlanResult:
    accel: float
    total_cost: float
    safety: float
    speed: float
    n_gated: int        # particles that survived the path and radius gates
    s_hat: float


def feasible_accel_interval(v: float, params: PlannerParams) -> tuple[float, float]:
    """Candidate bounds: braking saturates at v_min, so only v_max filters.

    A commanded deceleration stronger than (v_min - v) / horizon just parks
    the vehicle early (the rollout clamps speed), so any a >= a_min is
    admissible.  Exceeding v_max is not: those candidates are cut.
    """
    v = min(max(v, params.v_min), params.v_max)  # absorb integration round-off
    lo = params.a_min
    hi = min(params.a_max, (params.v_max - v) / params.horizon)
    if lo > hi:
        raise InfeasiblePlanError(
            f"no feasible acceleration at v={v:.3f} "
            f"(interval [{lo:.3f}, {hi:.3f}])")
    return lo, hi


def candidate_accels(v: float, params: PlannerParams) -> np.ndarray:
    """Multiples of the step inside the feasible interval, plus its endpoints."""
    lo, hi = feasible_accel_interval(v, params)
    h = params.accel_step
    k0 = int(np.ceil(lo / h - 1e-9))
    k1 = int(np.floor(hi / h + 1e-9))
    grid = np.arange(k0, k1 + 1) * h if k1 >= k0 else np.empty(0)
    cands = [grid]
    if len(grid) == 0 or lo < grid[0] - 1e-12:
        cands.insert(0, [lo])
    if len(grid) == 0 or hi > grid[-1] + 1e-12:
        cands.append([hi])
    return np.concatenate(cands)


def rollout_distance(v: float, accels: np.ndarray,
                     params: PlannerParams) -> np.ndarray:
    """Distance covered over the horizon with speed clamped at v_min."""
    a = np.asarray(accels, dtype=float)
    T = params.horizon
    dv = params.v_min - v
    with np.errstate(divide="ignore", invalid="ignore"):
        t_c = np.where(a * T < dv, dv / a, T)  # divides only where a < dv/T < 0
    return v * t_c + 0.5 * a * t_c * t_c + params.v_min * (T - t_c)


def predict_ego(route: Route, s: float, v: float,
                params: PlannerParams) -> EgoPrediction:
    accels = candidate_accels(v, params)
    s_hat = np.clip(s + rollout_distance(v, accels, params), 0.0, route.length)
    return EgoPrediction(accels, s_hat, route.spline.eval(s_hat))


def _route_proximity(imap: IntersectionMap, route: Route):
    key = ("prox", route.route_id)
    cached = imap._cache.get(key)
    if cached is None:
        s, pts = route.spline.sample_grid(0.1)
        cached = (s, pts, cKDTree(pts))
        imap._cache[key] = cached
    return cached


def min_distance_to_route(imap: IntersectionMap, route: Route,
                          points: np.ndarray) -> np.ndarray:
    """Distance from each point to the route centerline, within about 1e-3."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    _, pts, tree = _route_proximity(imap, route)
    _, idx = tree.query(points)
    best = np.full(len(points), np.inf)
    last = len(pts) - 2
    for start in (idx - 1, idx):
        i = np.clip(start, 0, last)
        a = pts[i]
        ab = pts[i + 1] - a
        denom = np.maximum(np.einsum("ij,ij->i", ab, ab), 1e-300)
        u = np.clip(np.einsum("ij,ij->i", points - a, ab) / denom, 0.0, 1.0)
        d = np.hypot(*(points - (a + u[:, None] * ab)).T)
        best = np.minimum(best, d)
    return best


def _lane_windows(imap: IntersectionMap, route: Route, lane,
                  bound: float) -> np.ndarray:
    """Arc spans of the lane close enough to the route to matter, flattened."""
    key = ("win", route.route_id, lane.lane_id, round(bound, 9))
    flat = imap._cache.get(key)
    if flat is None:
        s, pts = lane.sample_grid(0.5)
        # pass everything within twice the gate plus sampling slack
        reach = 2.0 * bound + 0.75
        mask = min_distance_to_route(imap, route, pts) <= reach
        flat = _runs_to_intervals(s, mask, 0.5, lane.length).ravel()
        imap._cache[key] = flat
    return flat


def _offset_points(lane, s: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Lane-frame offsets via linear interpolation on the cached sample grid."""
    cached = lane._cache.get("offset_interp")
    if cached is None:
        sg, pts = lane.sample_grid(0.25)
        per = lane.perpendicular(sg)
        cached = (sg, pts[:, 0].copy(), pts[:, 1].copy(),
                  per[:, 0].copy(), per[:, 1].copy())
        lane._cache["offset_interp"] = cached
    sg, px, py, nx, ny = cached
    x = np.interp(s, sg, px) + b * np.interp(s, sg, nx)
    y = np.interp(s, sg, py) + b * np.interp(s, sg, ny)
    return np.stack([x, y], axis=1)


def gated_particles(imap: IntersectionMap, route: Route,
                    dist: RiskDistribution, params: PlannerParams,
                    bounds: tuple[np.ndarray, np.ndarray] | None = None
                    ) -> np.ndarray:
    """Cartesian hypotheses within the lateral gate of the route, (n, 2).

    An optional (lo, hi) axis-aligned box drops points before the exact
    route-distance gate; both gates are pure filters, so the survivors do
    not depend on the order they run in.
    """
    chunks = []
    for g in dist.groups:
        flat = _lane_windows(imap, route, g.lane, params.lateral_bound)
        if len(flat) == 0:
            continue
        inside = np.searchsorted(flat, g.s, side="right") % 2 == 1
        if not inside.any():
            continue
        pts = _offset_points(g.lane, g.s[inside], g.b[inside])
        if bounds is not None:
            lo, hi = bounds
            pts = pts[np.all((pts >= lo) & (pts <= hi), axis=1)]
        if len(pts):
            chunks.append(pts)
    if not chunks:
        return np.empty((0, 2))
    pts = np.vstack(chunks)
    return pts[min_distance_to_route(imap, route, pts) <= params.lateral_bound]


def safety_cost(ego_points: np.ndarray, particles: np.ndarray,
                params: PlannerParams) -> np.ndarray:
    """Truncated Gaussian risk sum at each candidate position."""
    ego_points = np.atleast_2d(ego_points)
    if len(particles) == 0:
        return np.zeros(len(ego_points))
    dx = ego_points[:, 0][:, None] - particles[:, 0][None, :]
    dy = ego_points[:, 1][:, None] - particles[:, 1][None, :]
    r2 = dx * dx + dy * dy
    keep = r2 < params.discard_radius ** 2
    w = np.zeros_like(r2)
    w[keep] = np.exp(-r2[keep] / (params.sigma * params.sigma))
    return w.sum(axis=1)


def speed_cost(v: float, accels: np.ndarray, params: PlannerParams) -> np.ndarray:
    """Distance from the desired speed at the end of the horizon."""
    return np.abs(v + np.asarray(accels) * params.horizon - params.v_des)


def plan(imap: IntersectionMap, route: Route, s: float, v: float,
         dist: RiskDistribution, params: PlannerParams | None = None) -> PlanResult:
    """Choose the cheapest feasible acceleration; ties go to the smallest."""
    params = params or PlannerParams()
    pred = predict_ego(route, s, v, params)
    # positions beyond the discard radius of every candidate cannot score
    pad = params.discard_radius
    bounds = (pred.points.min(axis=0) - pad, pred.points.max(axis=0) + pad)
    particles = gated_particles(imap, route, dist, params, bounds)
    j1 = safety_cost(pred.points, particles, params)
    j2 = speed_cost(v, pred.accels, params)
    total = params.risk_weight * j1 + params.speed_weight * j2
    k = int(np.argmin(total))
    return PlanResult(float(pred.accels[k]), float(total[k]), float(j1[k]),
                      float(j2[k]), len(particles), float(pred.s_hat[k]))
