"""Intersection maps, the synthetic four-way, and random traffic scenarios."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from occrisk.geometry import LaneSpline, OrientedBox, Polygon, box_overlap

BUILDING_BUFFER = 2.0       # clearance between buildings and the driving surface
STOPLINE_SETBACK = 3.0      # stop bar painted this far before the conflict zone
VEHICLE_LENGTH = 4.88
VEHICLE_WIDTH = 1.86
OTHER_SPEED_RANGE = (4.0, 12.0)
EGO_STOPLINE_SETBACK = 15.0
EGO_START_SPEED = 10.0
GOAL_PAST_EXIT = 15.0
EPISODE_HORIZON = 30.0
SATURATION_LIMIT = 10_000


class MapLoadError(ValueError):
    """Raised when an intersection document violates the schema or geometry rules."""


class SaturationError(RuntimeError):
    """Raised when scenario rejection sampling cannot place the requested traffic."""


@dataclass(eq=False)
class Route:
    """Drivable route: ordered lane traversal plus its merged centerline spline."""

    route_id: str
    lane_ids: tuple[str, ...]
    spline: LaneSpline
    stopline_s: float
    waypoints: np.ndarray | None = None  # explicit geometry when lanes do not chain

    @property
    def length(self) -> float:
        return self.spline.length


@dataclass(frozen=True)
class VehicleState:
    """A vehicle pinned to a route at arc position s with longitudinal speed v."""

    route_id: str
    s: float
    v: float


@dataclass(eq=False)
class IntersectionMap:
    name: str
    lanes: list[LaneSpline]
    routes: list[Route]
    buildings: list[Polygon]
    origin: tuple[float, float] | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self._lane_index = {ln.lane_id: ln for ln in self.lanes}
        self._route_index = {rt.route_id: rt for rt in self.routes}
        if len(self._lane_index) != len(self.lanes):
            raise MapLoadError("duplicate lane id")
        if len(self._route_index) != len(self.routes):
            raise MapLoadError("duplicate route id")

    def lane(self, lane_id: str) -> LaneSpline:
        return self._lane_index[lane_id]

    def route(self, route_id: str) -> Route:
        return self._route_index[route_id]

    def successor(self, lane_id: str) -> LaneSpline | None:
        """Lane whose start coincides with this lane's end, if any."""
        table = self._cache.get("successors")
        if table is None:
            table = {}
            for ln in self.lanes:
                end = ln.eval(ln.length)
                for other in self.lanes:
                    if other is ln:
                        continue
                    if np.hypot(*(other.eval(0.0) - end)) <= 1e-3:
                        table[ln.lane_id] = other.lane_id
                        break
            self._cache["successors"] = table
        next_id = table.get(lane_id)
        return self._lane_index[next_id] if next_id else None

    def bounds(self) -> tuple[float, float, float, float]:
        """(xmin, ymin, xmax, ymax) over lane samples and building vertices."""
        pts = [ln.sample_grid(1.0)[1] for ln in self.lanes]
        pts += [bld.vertices for bld in self.buildings]
        allp = np.vstack(pts)
        lo = allp.min(axis=0)
        hi = allp.max(axis=0)
        return float(lo[0]), float(lo[1]), float(hi[0]), float(hi[1])

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_cache"] = {}
        return state

    def __setstate__(self, state):
        self.__dict__.update(state)


def _point_polygon_distance(pts: np.ndarray, poly: Polygon) -> np.ndarray:
    """Distance from each point to the polygon (zero inside)."""
    v = poly.vertices
    a, b = v, np.roll(v, -1, axis=0)
    ab = b - a
    ap = pts[:, None, :] - a[None, :, :]
    denom = np.maximum(np.einsum("ej,ej->e", ab, ab), 1e-300)
    u = np.clip(np.einsum("pej,ej->pe", ap, ab) / denom, 0.0, 1.0)
    foot = a[None, :, :] + u[:, :, None] * ab[None, :, :]
    d = np.sqrt(np.min(np.sum((pts[:, None, :] - foot) ** 2, axis=2), axis=1))
    d[poly.contains_points(pts)] = 0.0
    return d


def _polygon_is_simple(poly: Polygon) -> bool:
    v = poly.vertices
    n = len(v)
    segs = [(v[i], v[(i + 1) % n]) for i in range(n)]

    def xprod(a, b):
        return a[0] * b[1] - a[1] * b[0]

    def crosses(p1, p2, p3, p4):
        d1 = xprod(p2 - p1, p3 - p1)
        d2 = xprod(p2 - p1, p4 - p1)
        d3 = xprod(p4 - p3, p1 - p3)
        d4 = xprod(p4 - p3, p2 - p3)
        return (d1 * d2 < -1e-18) and (d3 * d4 < -1e-18)

    for i in range(n):
        for j in range(i + 2, n):
            if i == 0 and j == n - 1:
                continue
            if crosses(*segs[i], *segs[j]):
                return False
    return True


def validate_map(imap: IntersectionMap) -> None:
    """Geometry rules shared by the generator and the loader."""
    for idx, bld in enumerate(imap.buildings):
        if not _polygon_is_simple(bld):
            raise MapLoadError(f"building {idx} is self-intersecting")
        for ln in imap.lanes:
            s, pts = ln.sample_grid(0.5)
            clearance = _point_polygon_distance(pts, bld) - 0.5 * ln.width
            if np.min(clearance) < BUILDING_BUFFER - 1e-6:
                raise MapLoadError(
                    f"building {idx} violates the {BUILDING_BUFFER} m buffer "
                    f"near lane '{ln.lane_id}'")


def _rot90(pts: np.ndarray, quarter_turns: int) -> np.ndarray:
    c = [1.0, 0.0, -1.0, 0.0][quarter_turns % 4]
    s = [0.0, 1.0, 0.0, -1.0][quarter_turns % 4]
    x, y = np.asarray(pts, float).T
    return np.stack([c * x - s * y, s * x + c * y], axis=1)


def _arc_points(center, radius, a0, a1, n=9):
    ang = np.linspace(a0, a1, n)
    return np.stack([center[0] + radius * np.cos(ang),
                     center[1] + radius * np.sin(ang)], axis=1)


def _line_points(p0, p1, step=2.0):
    """Collinear fill so straight stretches stay straight next to arc knots."""
    p0 = np.asarray(p0, float)
    p1 = np.asarray(p1, float)
    n = max(int(math.ceil(np.hypot(*(p1 - p0)) / step)), 1)
    t = np.linspace(0.0, 1.0, n + 1)
    return p0 + t[:, None] * (p1 - p0)


def _box_entry_s(spline: LaneSpline, half: float) -> float:
    """First arc length at which the curve enters the axis-aligned box [-half, half]^2."""
    s, pts = spline.sample_grid(0.1)
    inside = np.max(np.abs(pts), axis=1) <= half
    if not inside.any():
        return spline.length
    i = int(np.argmax(inside))
    if i == 0:
        return 0.0
    lo, hi = s[i - 1], s[i]
    for _ in range(40):
        mid = 0.5 * (lo + hi)
        if max(abs(float(v)) for v in spline.eval(mid)) <= half:
            hi = mid
        else:
            lo = mid
    return float(hi)


def synthetic_fourway(lane_width: float = 3.5, arm_length: float = 60.0,
                      turn_radius: float = 6.0,
                      name: str = "synthetic_fourway") -> IntersectionMap:
    """Four-way intersection: two lanes per road, twelve routes, corner buildings.

    Inbound lanes run from the arm's outer end straight through the crossing to
    its far side, so straight routes chain whole lanes exactly.  Turn routes
    carry explicit waypoints: approach prefix, tangent arc, exit lane.
    """
    w = lane_width            # crossing half-width (two lanes per road)
    hw = 0.5 * lane_width
    arm = arm_length
    r_left = turn_radius
    r_right = turn_radius - lane_width
    if r_right <= 0.0:
        raise ValueError("turn_radius must exceed lane_width")
    if r_left - hw < w:
        raise ValueError("turn_radius too small to reach the exit lane")
    if r_left - hw >= arm:
        raise ValueError("turn_radius too large for the arm length")

    arms = ["n", "e", "s", "w"]
    # base arm is north (outward +y); arm k is the base rotated by -90 deg k times
    # (n, e, s, w order), i.e. rotated +90 deg (4 - k) times
    lanes = []
    for k, tag in enumerate(arms):
        q = (4 - k) % 4
        lane_in = _rot90(np.array([(-hw, w + arm), (-hw, 0.0), (-hw, -w)]), q)
        lane_out = _rot90(np.array([(hw, w), (hw, 0.5 * (2 * w + arm)), (hw, w + arm)]), q)
        lanes.append(LaneSpline(lane_in, lane_id=f"in_{tag}", width=lane_width))
        lanes.append(LaneSpline(lane_out, lane_id=f"out_{tag}", width=lane_width))

    right_of = {"n": "w", "w": "s", "s": "e", "e": "n"}
    left_of = {v: k for k, v in right_of.items()}
    opposite = {"n": "s", "s": "n", "e": "w", "w": "e"}

    routes = []
    for k, tag in enumerate(arms):
        q = (4 - k) % 4
        # straight: whole inbound lane chained with the opposite outbound lane
        straight_wp = _rot90(np.array([
            (-hw, w + arm), (-hw, -w), (-hw, -w - arm)]), q)
        routes.append((f"{tag}_straight",
                       (f"in_{tag}", f"out_{opposite[tag]}"), straight_wp))
        # left turn: depart the approach at y0, quarter arc, join the exit lane
        y0 = r_left - hw
        arc = _arc_points((r_left - hw, y0), r_left, math.pi, 1.5 * math.pi)
        left_wp = np.vstack([_line_points((-hw, w + arm), (-hw, y0)), arc,
                             _line_points((r_left - hw, -hw), (w + arm, -hw))])
        routes.append((f"{tag}_left",
                       (f"in_{tag}", f"out_{left_of[tag]}"), _rot90(left_wp, q)))
        # right turn: tighter arc onto the near exit lane
        arc = _arc_points((-hw - r_right, y0), r_right, 0.0, -0.5 * math.pi)
        right_wp = np.vstack([_line_points((-hw, w + arm), (-hw, y0)), arc,
                              _line_points((-hw - r_right, hw), (-w - arm, hw))])
        routes.append((f"{tag}_right",
                       (f"in_{tag}", f"out_{right_of[tag]}"), _rot90(right_wp, q)))

    route_objs = []
    for route_id, lane_ids, wp in routes:
        wp = _dedupe_waypoints(wp)
        sp = LaneSpline(wp, lane_id=route_id, width=lane_width)
        stop = max(_box_entry_s(sp, w) - STOPLINE_SETBACK, 0.0)
        route_objs.append(Route(route_id, tuple(lane_ids), sp, stop, waypoints=wp))

    b = w + BUILDING_BUFFER
    e = w + arm
    base = np.array([(b, b), (e, b), (e, e), (b, e)])
    buildings = [Polygon(_rot90(base, q)) for q in range(4)]

    imap = IntersectionMap(name, lanes, route_objs, buildings)
    validate_map(imap)
    return imap


def _dedupe_waypoints(wp: np.ndarray) -> np.ndarray:
    keep = [wp[0]]
    for p in wp[1:]:
        if np.hypot(*(p - keep[-1])) > 1e-9:
            keep.append(p)
    return np.array(keep)


def save_intersection(imap: IntersectionMap, path: str) -> None:
    """Write the map as a JSON document (schema mirrored by load_intersection)."""
    doc = {
        "meta": {"name": imap.name,
                 "origin": None if imap.origin is None else
                 {"lat": imap.origin[0], "lon": imap.origin[1]}},
        "lanes": [{"id": ln.lane_id, "waypoints": ln.waypoints.tolist(),
                   "v_min": ln.v_min, "v_max": ln.v_max, "width": ln.width}
                  for ln in imap.lanes],
        "routes": [{"id": rt.route_id, "lane_ids": list(rt.lane_ids),
                    "stopline_s": rt.stopline_s,
                    **({"waypoints": rt.waypoints.tolist()}
                       if rt.waypoints is not None else {})}
                   for rt in imap.routes],
        "buildings": [{"vertices": bld.vertices.tolist()} for bld in imap.buildings],
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1)


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise MapLoadError(msg)


def load_intersection(path: str) -> IntersectionMap:
    """Parse, validate, and build an intersection from a JSON document."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise MapLoadError(f"cannot read intersection file: {exc}") from exc

    _require(isinstance(doc, dict), "top level must be an object")
    for key in ("meta", "lanes", "routes", "buildings"):
        _require(key in doc, f"missing top-level key '{key}'")
    meta = doc["meta"]
    _require(isinstance(meta, dict) and "name" in meta, "meta.name is required")
    origin = None
    if meta.get("origin") is not None:
        o = meta["origin"]
        _require(isinstance(o, dict) and "lat" in o and "lon" in o,
                 "meta.origin needs lat and lon")
        origin = (float(o["lat"]), float(o["lon"]))

    lanes = []
    for entry in doc["lanes"]:
        _require(isinstance(entry, dict) and "id" in entry,
                 "every lane needs an id")
        lid = str(entry["id"])
        for key in ("waypoints", "v_min", "v_max", "width"):
            _require(key in entry, f"lane '{lid}' missing '{key}'")
        wp = np.asarray(entry["waypoints"], dtype=float)
        _require(wp.ndim == 2 and wp.shape[1] == 2 and len(wp) >= 2,
                 f"lane '{lid}' waypoints must be an (n>=2, 2) array")
        _require(bool(np.all(np.isfinite(wp))),
                 f"lane '{lid}' has a non-finite waypoint")
        _require(0.0 <= float(entry["v_min"]) <= float(entry["v_max"]),
                 f"lane '{lid}' speed bounds out of order")
        _require(float(entry["width"]) > 0.0, f"lane '{lid}' width must be positive")
        try:
            lanes.append(LaneSpline(wp, lane_id=lid, v_min=float(entry["v_min"]),
                                    v_max=float(entry["v_max"]),
                                    width=float(entry["width"])))
        except ValueError as exc:
            raise MapLoadError(f"lane '{lid}': {exc}") from exc
    lane_ids = {ln.lane_id for ln in lanes}
    lane_map = {ln.lane_id: ln for ln in lanes}

    routes = []
    for entry in doc["routes"]:
        _require(isinstance(entry, dict) and "id" in entry,
                 "every route needs an id")
        rid = str(entry["id"])
        _require("lane_ids" in entry and len(entry["lane_ids"]) >= 1,
                 f"route '{rid}' needs lane_ids")
        ids = tuple(str(x) for x in entry["lane_ids"])
        for lid in ids:
            _require(lid in lane_ids,
                     f"route '{rid}' references missing lane '{lid}'")
        if "waypoints" in entry:
            wp = np.asarray(entry["waypoints"], dtype=float)
            _require(wp.ndim == 2 and wp.shape[1] == 2 and len(wp) >= 2,
                     f"route '{rid}' waypoints must be an (n>=2, 2) array")
            explicit = wp
        else:
            # chained geometry: consecutive lanes must touch end to start
            parts = []
            for a, b_ in zip(ids[:-1], ids[1:]):
                gap = float(np.hypot(*(lane_map[b_].eval(0.0)
                                       - lane_map[a].eval(lane_map[a].length))))
                _require(gap <= 1e-3,
                         f"route '{rid}' discontinuous between lanes "
                         f"'{a}' and '{b_}' (gap {gap:.6f} m)")
            for i, lid in enumerate(ids):
                wp = lane_map[lid].waypoints
                parts.append(wp if i == 0 else wp[1:])
            wp = _dedupe_waypoints(np.vstack(parts))
            explicit = None
        try:
            sp = LaneSpline(wp, lane_id=rid,
                            width=float(lane_map[ids[0]].width))
        except ValueError as exc:
            raise MapLoadError(f"route '{rid}': {exc}") from exc
        stop = entry.get("stopline_s")
        stop = float(stop) if stop is not None else None
        if stop is not None:
            _require(0.0 <= stop <= sp.length,
                     f"route '{rid}' stopline_s outside the route")
        routes.append(Route(rid, ids, sp,
                            stop if stop is not None else _infer_stopline(sp, lanes),
                            waypoints=explicit))

    buildings = []
    for i, entry in enumerate(doc["buildings"]):
        _require(isinstance(entry, dict) and "vertices" in entry,
                 f"building {i} needs vertices")
        v = np.asarray(entry["vertices"], dtype=float)
        _require(v.ndim == 2 and v.shape[1] == 2 and len(v) >= 3,
                 f"building {i} vertices must be an (n>=3, 2) array")
        _require(bool(np.all(np.isfinite(v))), f"building {i} has a non-finite vertex")
        poly = Polygon(v)
        if poly.area() < 0.0:
            poly = Polygon(v[::-1])
        buildings.append(poly)

    imap = IntersectionMap(str(meta["name"]), lanes, routes, buildings, origin)
    validate_map(imap)
    return imap


def transversal_crossings(route: Route, lanes: list[LaneSpline],
                          min_angle_deg: float = 20.0) -> np.ndarray:
    """Arc positions along the route where a lane centerline crosses it at an angle."""
    s_a, pa = route.spline.sample_grid(0.5)
    a1, a2 = pa[:-1], pa[1:]
    d1 = a2 - a1
    out = []
    sin_min = math.sin(math.radians(min_angle_deg))
    for ln in lanes:
        _, pb = ln.sample_grid(0.5)
        b1, b2 = pb[:-1], pb[1:]
        d2 = b2 - b1
        r = b1[None, :, :] - a1[:, None, :]
        denom = d1[:, None, 0] * d2[None, :, 1] - d1[:, None, 1] * d2[None, :, 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (r[:, :, 0] * d2[None, :, 1] - r[:, :, 1] * d2[None, :, 0]) / denom
            u = (r[:, :, 0] * d1[:, None, 1] - r[:, :, 1] * d1[:, None, 0]) / denom
        norm = (np.hypot(d1[:, None, 0], d1[:, None, 1])
                * np.hypot(d2[None, :, 0], d2[None, :, 1]))
        hit = (np.abs(denom) > sin_min * norm) & \
              (t >= 0.0) & (t < 1.0) & (u >= 0.0) & (u < 1.0)
        ii, jj = np.nonzero(hit)
        for i, j in zip(ii, jj):
            out.append(s_a[i] + t[i, j] * (s_a[i + 1] - s_a[i]))
    return np.sort(np.array(out)) if out else np.empty(0)


def _infer_stopline(route_spline: LaneSpline, lanes: list[LaneSpline]) -> float:
    """Fallback stopline: a stop bar's setback before the first lane crossing."""
    stub = Route("_tmp", (), route_spline, 0.0)
    s_cross = transversal_crossings(stub, lanes)
    if len(s_cross) == 0:
        return route_spline.length
    return max(0.0, float(s_cross[0]) - 0.5 * route_spline.width
               - STOPLINE_SETBACK)


@dataclass(eq=False)
class Scenario:
    """One traffic episode setup; identical across planner modes."""

    map: IntersectionMap
    ego: VehicleState
    others: list[VehicleState]
    seed: int
    goal_s: float
    scenario_id: int = 0


def _route_goal(imap: IntersectionMap, route: Route) -> float:
    key = ("goal", route.route_id)
    goal = imap._cache.get(key)
    if goal is None:
        crossings = transversal_crossings(route, imap.lanes)
        base = float(crossings[-1]) if len(crossings) else route.stopline_s
        goal = min(route.length - 0.5, base + GOAL_PAST_EXIT)
        imap._cache[key] = goal
    return goal


class _Trajectory:
    """Constant-speed rollout of one vehicle, sampled on the rejection grid."""

    def __init__(self, route: Route, s0: float, v: float, times: np.ndarray,
                 length: float, width: float):
        s = s0 + v * times
        self.active = s <= route.length + 1e-9
        s_valid = np.clip(s, 0.0, route.length)
        self.xy = route.spline.eval(s_valid)
        tang = route.spline.tangent(s_valid)
        self.heading = np.arctan2(tang[:, 1], tang[:, 0])
        self.length = length
        self.width = width
        self.reach = 0.5 * math.hypot(length, width)

    def collides_with(self, other: "_Trajectory") -> bool:
        both = self.active & other.active
        if not both.any():
            return False
        gap = np.hypot(*(self.xy - other.xy).T)
        close = both & (gap <= self.reach + other.reach)
        for i in np.nonzero(close)[0]:
            a = OrientedBox(self.xy[i], self.heading[i], self.length, self.width)
            b = OrientedBox(other.xy[i], other.heading[i], other.length, other.width)
            if box_overlap(a, b):
                return True
        return False


def generate_scenario(imap: IntersectionMap, ego_route_id: str, n_others: int,
                      seed: int, scenario_id: int = 0,
                      vehicle_length: float = VEHICLE_LENGTH,
                      vehicle_width: float = VEHICLE_WIDTH,
                      horizon: float = EPISODE_HORIZON) -> Scenario:
    """Place the ego and n_others by rejection sampling.

    Other vehicles get uniform routes, uniform speeds in [4, 12] m/s, and
    uniform start positions; candidates are rejected while they overlap
    anything at t=0 or collide with an already placed vehicle during a
    constant-speed rollout of the horizon at 0.1 s steps.
    """
    rng = np.random.default_rng(np.random.Philox(np.random.SeedSequence([seed])))
    ego_route = imap.route(ego_route_id)
    ego_s = max(0.0, ego_route.stopline_s - EGO_STOPLINE_SETBACK)
    ego = VehicleState(ego_route_id, ego_s, EGO_START_SPEED)
    times = np.arange(0.0, horizon + 1e-9, 0.1)

    ego_traj = _Trajectory(ego_route, ego_s, 0.0, np.zeros(1),
                           vehicle_length, vehicle_width)
    ego_box = OrientedBox(ego_traj.xy[0], ego_traj.heading[0],
                          vehicle_length, vehicle_width)
    placed: list[_Trajectory] = []
    start_boxes: list[OrientedBox] = []
    others: list[VehicleState] = []
    rejections = 0
    while len(others) < n_others:
        route = imap.routes[int(rng.integers(len(imap.routes)))]
        v = float(rng.uniform(*OTHER_SPEED_RANGE))
        s0 = float(rng.uniform(0.0, max(route.length - vehicle_length, 1e-6)))
        # a constant-speed vehicle on the ego's own approach lane dooms every
        # policy when it spawns behind the ego, or ahead but too close for a
        # full-braking ego to stay off its tail, so that stretch stays clear
        closing = max(0.0, EGO_START_SPEED - v)
        margin = vehicle_length + 0.2 * closing + closing * closing / 16.0
        bad = (route.lane_ids[0] == ego_route.lane_ids[0]
               and s0 <= ego_s + margin)
        if not bad:
            cand = _Trajectory(route, s0, v, times, vehicle_length, vehicle_width)
            start_box = OrientedBox(cand.xy[0], cand.heading[0],
                                    vehicle_length, vehicle_width)
            bad = box_overlap(start_box, ego_box) or any(
                box_overlap(start_box, bx) for bx in start_boxes)
            if not bad:
                bad = any(cand.collides_with(tr) for tr in placed)
        if bad:
            rejections += 1
            if rejections >= SATURATION_LIMIT:
                raise SaturationError(
                    f"scenario saturated after {rejections} consecutive "
                    f"rejections ({len(others)}/{n_others} vehicles placed)")
            continue
        rejections = 0
        placed.append(cand)
        start_boxes.append(start_box)
        others.append(VehicleState(route.route_id, s0, v))

    return Scenario(imap, ego, others, seed, _route_goal(imap, ego_route),
                    scenario_id)
