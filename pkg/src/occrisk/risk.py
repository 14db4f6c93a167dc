"""Collision-risk hypotheses: particles on unobserved road and around traffic."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from occrisk.geometry import (LaneSpline, OrientedBox, Polygon, SensorModel,
                              VisibilityPolygon, _runs_to_intervals,
                              stack_edges, unobserved_intervals,
                              visibility_polygon)
from occrisk.scene import IntersectionMap

OCCLUSION_AWARE = "occlusion_aware"
OBSERVED_ONLY = "observed_only"
MODES = (OCCLUSION_AWARE, OBSERVED_ONLY)


@dataclass(frozen=True)
class RiskConfig:
    horizon: float = 1.5                        # prediction lookahead, s
    lateral_bound: float = 1.395                # particle offset half-range, m
    particles_per_meter: float = 2.0 ** 15 / 100.0
    max_particles_per_lane: int = 2 ** 15
    sample_step: float = 0.25                   # lane discretization, m
    sensor: SensorModel = field(default_factory=SensorModel)


@dataclass(eq=False)
class LaneParticles:
    """Hypothesis samples on one lane: arc position, speed, lateral offset."""

    lane: LaneSpline
    s: np.ndarray
    v: np.ndarray
    b: np.ndarray

    @property
    def count(self) -> int:
        return len(self.s)


@dataclass(eq=False)
class RiskGroup:
    """Propagated particles resolved onto their effective lane."""

    source_lane_id: str
    lane: LaneSpline
    s: np.ndarray       # effective arc positions, clamped to the lane
    v: np.ndarray
    b: np.ndarray
    s0: np.ndarray      # arc positions at sampling time, on the source lane

    @property
    def count(self) -> int:
        return len(self.s)


@dataclass(eq=False)
class RiskDistribution:
    """All propagated hypotheses for one planning step."""

    mode: str
    horizon: float
    visibility: VisibilityPolygon
    intervals: dict[str, np.ndarray]
    groups: list[RiskGroup]

    @property
    def total(self) -> int:
        return sum(g.count for g in self.groups)

    @cached_property
    def points(self) -> np.ndarray:
        """Cartesian particle positions at the prediction horizon, (N, 2)."""
        if not self.groups:
            return np.empty((0, 2))
        return np.vstack([to_cartesian(g.lane, g.s, g.b) for g in self.groups])


def merge_intervals(intervals: np.ndarray) -> np.ndarray:
    """Union of [start, end] rows; touching rows coalesce."""
    intervals = np.asarray(intervals, dtype=float).reshape(-1, 2)
    if len(intervals) == 0:
        return intervals
    order = np.argsort(intervals[:, 0])
    merged = [intervals[order[0]].copy()]
    for a, b in intervals[order[1:]]:
        if a <= merged[-1][1] + 1e-12:
            merged[-1][1] = max(merged[-1][1], b)
        else:
            merged.append(np.array([a, b]))
    return np.array(merged)


def particle_count(total_length: float, config: RiskConfig) -> int:
    if total_length <= 0.0:
        return 0
    return min(config.max_particles_per_lane,
               int(round(config.particles_per_meter * total_length)))


def sample_particles(lane: LaneSpline, intervals: np.ndarray,
                     config: RiskConfig, rng: np.random.Generator) -> LaneParticles:
    """Uniform hypotheses over the interval union: s by length, v and b uniform."""
    intervals = np.asarray(intervals, dtype=float).reshape(-1, 2)
    lengths = np.maximum(intervals[:, 1] - intervals[:, 0], 0.0) \
        if len(intervals) else np.empty(0)
    total = float(lengths.sum())
    n = particle_count(total, config)
    if n == 0:
        empty = np.empty(0)
        return LaneParticles(lane, empty, empty.copy(), empty.copy())
    u = rng.uniform(0.0, total, n)
    cum = np.cumsum(lengths)
    idx = np.searchsorted(cum, u, side="right")
    idx = np.minimum(idx, len(lengths) - 1)
    s = intervals[idx, 0] + (u - (cum[idx] - lengths[idx]))
    v = rng.uniform(lane.v_min, lane.v_max, n)
    b = rng.uniform(-config.lateral_bound, config.lateral_bound, n)
    return LaneParticles(lane, s, v, b)


def propagate(particles: LaneParticles, horizon: float) -> np.ndarray:
    """Constant-speed arc positions at the prediction horizon."""
    return particles.s + particles.v * horizon


def to_cartesian(lane: LaneSpline, s: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Map (s, lateral offset) to the plane; s clamps to the lane extent."""
    s = np.clip(np.asarray(s, dtype=float), 0.0, lane.length)
    return lane.offset_point(s, b)


def _box_probe_points(box: OrientedBox, spacing: float = 0.5) -> np.ndarray:
    corners = box.corners()
    pts = [box.center[None, :], corners]
    for a, b in zip(corners, np.roll(corners, -1, axis=0)):
        n = max(int(np.ceil(np.hypot(*(b - a)) / spacing)), 1)
        t = np.arange(1, n) / n
        pts.append(a + t[:, None] * (b - a))
    return np.vstack(pts)


def observed_vehicle_intervals(lane: LaneSpline, boxes: list[OrientedBox],
                               step: float = 0.25) -> np.ndarray:
    """Arc spans of the lane centerline covered by observed vehicle bodies."""
    if not boxes:
        return np.empty((0, 2))
    s, pts = lane.sample_grid(step)
    mask = np.zeros(len(s), dtype=bool)
    for box in boxes:
        reach = 0.5 * np.hypot(box.length, box.width) + step
        near = np.hypot(*(pts - box.center).T) <= reach
        if near.any():
            mask[near] |= box.contains_points(pts[near])
    return _runs_to_intervals(s, mask, step, lane.length)


def split_at_lane_end(imap: IntersectionMap, lane: LaneSpline,
                      s_hat: np.ndarray) -> list[tuple[LaneSpline, np.ndarray, np.ndarray]]:
    """Resolve propagated positions past the lane end onto the successor lane.

    Returns (effective lane, clamped s, index array) pieces; without a
    successor, overflowing positions clamp at the lane end.
    """
    over = s_hat > lane.length
    succ = imap.successor(lane.lane_id) if over.any() else None
    idx_all = np.arange(len(s_hat))
    if succ is None:
        return [(lane, np.minimum(s_hat, lane.length), idx_all)]
    pieces = [(lane, s_hat[~over], idx_all[~over])]
    carried = np.minimum(s_hat[over] - lane.length, succ.length)
    pieces.append((succ, carried, idx_all[over]))
    return [(ln, s, idx) for ln, s, idx in pieces if len(idx)]


def assess(imap: IntersectionMap, ego_xy, ego_heading: float,
           others: list[OrientedBox], mode: str = OCCLUSION_AWARE,
           config: RiskConfig | None = None,
           rng: np.random.Generator | None = None) -> RiskDistribution:
    """Build the propagated risk distribution seen from the ego pose.

    Buildings and other vehicles both block line of sight.  Occlusion-aware
    mode fills every unobserved lane stretch with hypotheses and adds the
    footprints of observed vehicles; observed-only mode uses the footprints
    alone.  Observed vehicles are those whose body intersects the visibility
    polygon; their speed hypotheses span the lane bounds.
    """
    if mode not in MODES:
        raise ValueError(f"unknown risk mode '{mode}'")
    config = config or RiskConfig()
    rng = rng or np.random.default_rng()
    edges = imap._cache.get("building_edges")
    if edges is None:
        edges = stack_edges(imap.buildings)
        imap._cache["building_edges"] = edges
    occluders = list(imap.buildings)
    if others:
        # Vehicle bodies block line of sight too.  Each box shrinks by a
        # hair so its own near face stays strictly visible to the sensor.
        shrunk = [box.center + (box.corners() - box.center) * (1.0 - 1e-6)
                  for box in others]
        occluders += [Polygon(c) for c in shrunk]
        a = np.concatenate([edges[0]] + shrunk)
        b = np.concatenate([edges[1]] + [np.roll(c, -1, axis=0) - c
                                         for c in shrunk])
        edges = a, b
    vis = visibility_polygon(ego_xy, ego_heading, occluders, config.sensor,
                             edges=edges)
    observed = [box for box in others
                if vis.contains_points(_box_probe_points(box)).any()]

    intervals: dict[str, np.ndarray] = {}
    groups: list[RiskGroup] = []
    for lane in imap.lanes:
        foot = observed_vehicle_intervals(lane, observed, config.sample_step)
        if mode == OCCLUSION_AWARE:
            hidden = unobserved_intervals(lane, vis, config.sample_step)
            spans = merge_intervals(np.vstack([hidden, foot]))
        else:
            spans = merge_intervals(foot)
        intervals[lane.lane_id] = spans
        part = sample_particles(lane, spans, config, rng)
        if part.count == 0:
            continue
        s_hat = propagate(part, config.horizon)
        for eff_lane, s_eff, idx in split_at_lane_end(imap, lane, s_hat):
            groups.append(RiskGroup(lane.lane_id, eff_lane, s_eff,
                                    part.v[idx], part.b[idx], part.s[idx]))
    return RiskDistribution(mode, config.horizon, vis, intervals, groups)
