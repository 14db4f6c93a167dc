"""Planar geometry: arc-length lane splines, visibility polygons, oriented boxes."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline, PchipInterpolator

TWO_PI = 2.0 * math.pi

# Subintervals per waypoint segment in the arc-length table.
_ARC_SUBDIV = 64


def _as_points(pts) -> np.ndarray:
    arr = np.asarray(pts, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise ValueError("expected an (n, 2) array of planar points")
    return arr


class LaneSpline:
    """Natural cubic spline through waypoints, reparameterized by arc length.

    eval/tangent/perpendicular accept a scalar s or an array of s values and
    return shapes (2,) / (n, 2) accordingly.  s is clamped only within a 1e-9
    tolerance; values outside [0, length] raise.
    """

    def __init__(self, waypoints, lane_id: str | None = None,
                 v_min: float = 0.0, v_max: float = 12.0, width: float = 3.5):
        pts = _as_points(waypoints)
        if len(pts) < 2:
            raise ValueError("degenerate spline: need at least two waypoints")
        chord = np.hypot(*np.diff(pts, axis=0).T)
        if np.any(chord <= 1e-9):
            raise ValueError("degenerate spline: repeated consecutive waypoints")
        if len(pts) == 2:
            # natural cubic needs three knots; a collinear midpoint keeps the line exact
            pts = np.vstack([pts[0], 0.5 * (pts[0] + pts[1]), pts[1]])
            chord = np.hypot(*np.diff(pts, axis=0).T)
        t = np.concatenate([[0.0], np.cumsum(chord)])
        self.waypoints = _as_points(waypoints)
        self.lane_id = lane_id
        self.v_min = float(v_min)
        self.v_max = float(v_max)
        self.width = float(width)
        self._curve = CubicSpline(t, pts, bc_type="natural")
        self._dcurve = self._curve.derivative()
        t_grid, s_grid = self._arc_table(t)
        if np.any(np.diff(s_grid) <= 0.0):
            raise ValueError("degenerate spline: arc length not increasing")
        self.length = float(s_grid[-1])
        self._t_of_s = PchipInterpolator(s_grid, t_grid)
        self._cache: dict = {}

    def _speed(self, t) -> np.ndarray:
        d = np.atleast_2d(self._dcurve(t))
        return np.hypot(d[:, 0], d[:, 1])

    def _arc_table(self, knots: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        # Simpson cumulative arc length, starting at 64 subintervals per waypoint
        # segment and doubling per segment until the table inverts to <= 1e-8 m
        nseg = len(knots) - 1
        subdiv = np.full(nseg, _ARC_SUBDIV, dtype=int)
        t_grid = s_grid = None
        for _ in range(7):
            parts = [np.array([knots[0]])]
            for i in range(nseg):
                parts.append(np.linspace(knots[i], knots[i + 1], subdiv[i] + 1)[1:])
            t_grid = np.concatenate(parts)
            mids = 0.5 * (t_grid[:-1] + t_grid[1:])
            spd_g = self._speed(t_grid)
            spd_m = self._speed(mids)
            h = np.diff(t_grid)
            s_grid = np.concatenate([[0.0], np.cumsum(h / 6.0 * (
                spd_g[:-1] + 4.0 * spd_m + spd_g[1:]))])
            if np.any(np.diff(s_grid) <= 0.0):
                break
            inv = PchipInterpolator(s_grid, t_grid)
            s_mid = 0.5 * (s_grid[:-1] + s_grid[1:])
            t_cand = np.clip(inv(s_mid), t_grid[:-1], t_grid[1:])
            dh = t_cand - t_grid[:-1]
            arc = s_grid[:-1] + dh / 6.0 * (
                spd_g[:-1] + 4.0 * self._speed(t_grid[:-1] + 0.5 * dh)
                + self._speed(t_cand))
            resid = np.abs(arc - s_mid)
            if resid.max() <= 1e-8 or np.all(subdiv >= 4096):
                break
            seg_of = np.repeat(np.arange(nseg), subdiv)
            bad = np.unique(seg_of[resid > 1e-8])
            subdiv[bad] = np.minimum(subdiv[bad] * 2, 4096)
        return t_grid, s_grid

    def _params(self, s) -> np.ndarray:
        s_arr = np.asarray(s, dtype=float)
        if np.any(s_arr < -1e-9) or np.any(s_arr > self.length + 1e-9):
            raise ValueError(f"s outside [0, {self.length:.6f}]")
        return self._t_of_s(np.clip(s_arr, 0.0, self.length))

    def eval(self, s):
        """Point on the centerline at arc length s."""
        pos = self._curve(self._params(s))
        return pos if np.ndim(s) else pos.reshape(2)

    def tangent(self, s):
        """Unit tangent at arc length s."""
        d = self._dcurve(self._params(s))
        d = np.atleast_2d(d)
        u = d / np.linalg.norm(d, axis=1, keepdims=True)
        return u if np.ndim(s) else u.reshape(2)

    def perpendicular(self, s):
        """Unit left normal at arc length s (tangent rotated +90 degrees)."""
        tang = np.atleast_2d(self.tangent(s))
        perp = np.stack([-tang[:, 1], tang[:, 0]], axis=1)
        return perp if np.ndim(s) else perp.reshape(2)

    def offset_point(self, s, b):
        """Centerline point displaced b along the left normal."""
        s_arr = np.asarray(s, dtype=float)
        t = self._params(s_arr)
        pos = np.atleast_2d(self._curve(t))
        d = np.atleast_2d(self._dcurve(t))
        d = d / np.linalg.norm(d, axis=1, keepdims=True)
        perp = np.stack([-d[:, 1], d[:, 0]], axis=1)
        out = pos + np.asarray(b, dtype=float).reshape(-1, 1) * perp
        return out if np.ndim(s) else out.reshape(2)

    def sample_grid(self, step: float) -> tuple[np.ndarray, np.ndarray]:
        """Cached (s values, points) at the given spacing, endpoints included."""
        key = ("grid", round(step, 9))
        hit = self._cache.get(key)
        if hit is None:
            n = int(math.floor(self.length / step + 1e-9))
            s = np.arange(n + 1) * step
            if s[-1] < self.length - 1e-9:
                s = np.append(s, self.length)
            else:
                s[-1] = self.length
            hit = (s, self.eval(s))
            self._cache[key] = hit
        return hit

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_cache"] = {}
        return state

    def __repr__(self):
        return f"LaneSpline(id={self.lane_id!r}, length={self.length:.3f})"


def spline_from_waypoints(waypoints, **meta) -> LaneSpline:
    """Build an arc-length parameterized natural cubic spline through waypoints."""
    return LaneSpline(waypoints, **meta)


@dataclass(eq=False)
class Polygon:
    """Simple planar polygon; vertices counterclockwise for positive area."""

    vertices: np.ndarray

    def __post_init__(self):
        self.vertices = _as_points(self.vertices)
        if len(self.vertices) < 3:
            raise ValueError("polygon needs at least three vertices")
        self._lo = self.vertices.min(axis=0) - 1e-9
        self._hi = self.vertices.max(axis=0) + 1e-9

    def area(self) -> float:
        """Signed shoelace area (positive when counterclockwise)."""
        x, y = self.vertices.T
        return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))

    def contains_points(self, pts) -> np.ndarray:
        """Even-odd containment test, boundary counted as inside."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        out = np.zeros(len(pts), dtype=bool)
        near = np.all((pts >= self._lo) & (pts <= self._hi), axis=1)
        if not near.any():
            return out
        sub = pts[near]
        v = self.vertices
        a, b = v, np.roll(v, -1, axis=0)
        px = sub[:, 0][:, None]
        py = sub[:, 1][:, None]
        cond = (a[None, :, 1] > py) != (b[None, :, 1] > py)
        with np.errstate(divide="ignore", invalid="ignore"):
            x_cross = a[None, :, 0] + (py - a[None, :, 1]) / (b[None, :, 1] - a[None, :, 1]) * (
                b[None, :, 0] - a[None, :, 0])
        inside = np.sum(cond & (px < x_cross), axis=1) % 2 == 1
        out[near] = inside | self._on_boundary(sub)
        return out

    def _on_boundary(self, pts, tol: float = 1e-9) -> np.ndarray:
        v = self.vertices
        a, b = v, np.roll(v, -1, axis=0)
        ab = b - a
        ap = pts[:, None, :] - a[None, :, :]
        denom = np.maximum(np.einsum("ej,ej->e", ab, ab), 1e-300)
        u = np.clip(np.einsum("pej,ej->pe", ap, ab) / denom, 0.0, 1.0)
        foot = a[None, :, :] + u[:, :, None] * ab[None, :, :]
        d2 = np.sum((pts[:, None, :] - foot) ** 2, axis=2)
        return np.any(d2 <= tol * tol, axis=1)

    def contains_point(self, pt) -> bool:
        return bool(self.contains_points(np.asarray(pt, dtype=float))[0])


class VisibilityPolygon(Polygon):
    """Star-shaped visibility region with an O(1) membership test per point."""

    def __init__(self, vertices, origin, start_angle: float, dangle: float,
                 radii: np.ndarray, full_circle: bool):
        super().__init__(vertices)
        self.origin = np.asarray(origin, dtype=float)
        self.start_angle = float(start_angle)
        self.dangle = float(dangle)
        self.radii = np.asarray(radii, dtype=float)
        self.full_circle = bool(full_circle)
        th = self.start_angle + self.dangle * np.arange(len(self.radii))
        self._fan = np.stack([self.radii * np.cos(th),
                              self.radii * np.sin(th)], axis=1)
        self._rmax = float(self.radii.max()) if len(self.radii) else 0.0

    def contains_points(self, pts) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        out = np.zeros(len(pts), dtype=bool)
        rel_all = pts - self.origin
        r2 = rel_all[:, 0] ** 2 + rel_all[:, 1] ** 2
        near = r2 <= (self._rmax + 1e-9) ** 2
        if not near.any():
            return out
        rel = rel_all[near]
        ang = (np.arctan2(rel[:, 1], rel[:, 0]) - self.start_angle) % TWO_PI
        n = len(self.radii)
        if self.full_circle:
            k = np.minimum((ang / self.dangle).astype(int), n - 1)
            k2 = (k + 1) % n
            ok = np.ones(len(rel), dtype=bool)
        else:
            span = (n - 1) * self.dangle
            ok = ang <= span + 1e-12
            k = np.minimum((np.minimum(ang, span) / self.dangle).astype(int), n - 2)
            k2 = k + 1
        v1 = self._fan[k]
        v2 = self._fan[k2]
        # inside the fan triangle iff on the origin side of chord v1->v2
        chord = v2 - v1
        cross = chord[:, 0] * (rel[:, 1] - v1[:, 1]) - chord[:, 1] * (rel[:, 0] - v1[:, 0])
        out[near] = ok & (cross >= -1e-9)
        return out


@dataclass(frozen=True)
class SensorModel:
    """Idealized range sensor: field of view swept at fixed angular resolution."""

    max_range: float = 50.0
    fov: float = TWO_PI
    angular_resolution: float = math.radians(0.25)


def stack_edges(occluders: list[Polygon]) -> tuple[np.ndarray, np.ndarray]:
    """Concatenated (start, direction) edge arrays, reusable across casts."""
    if not occluders:
        return np.empty((0, 2)), np.empty((0, 2))
    a = np.concatenate([occ.vertices for occ in occluders])
    b = np.concatenate([np.roll(occ.vertices, -1, axis=0) for occ in occluders])
    return a, b - a


def visibility_polygon(origin, heading: float, occluders: list[Polygon],
                       sensor: SensorModel,
                       edges: tuple[np.ndarray, np.ndarray] | None = None
                       ) -> VisibilityPolygon:
    """Observable region from origin: one ray per angular step, clipped by occluders.

    Raises ValueError if the origin lies inside (or on) an occluder.
    Pass a stack_edges result as `edges` to reuse it across casts.
    """
    origin = np.asarray(origin, dtype=float)
    for i, occ in enumerate(occluders):
        if occ.contains_point(origin):
            raise ValueError(f"sensor origin inside occluder {i}")
    full = abs(sensor.fov - TWO_PI) <= 1e-12
    if full:
        n = max(3, int(round(TWO_PI / sensor.angular_resolution)))
        start = heading
    else:
        n = max(2, int(round(sensor.fov / sensor.angular_resolution)) + 1)
        start = heading - 0.5 * sensor.fov
    dangle = (TWO_PI / n) if full else sensor.fov / (n - 1)
    ang = start + dangle * np.arange(n)
    dirs = np.stack([np.cos(ang), np.sin(ang)], axis=1)

    radii = np.full(n, float(sensor.max_range))
    if occluders:
        a, ab = edges if edges is not None else stack_edges(occluders)
        ao = a - origin
        denom = dirs[:, 0][:, None] * ab[None, :, 1] - dirs[:, 1][:, None] * ab[None, :, 0]
        t_num = ao[None, :, 0] * ab[None, :, 1] - ao[None, :, 1] * ab[None, :, 0]
        u_num = ao[None, :, 0] * dirs[:, 1][:, None] - ao[None, :, 1] * dirs[:, 0][:, None]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = t_num / denom
            u = u_num / denom
        valid = (np.abs(denom) > 1e-14) & (u >= -1e-12) & (u <= 1.0 + 1e-12) & (t > 1e-12)
        t = np.where(valid, t, np.inf)
        radii = np.minimum(radii, t.min(axis=1))

    hits = origin + radii[:, None] * dirs
    vertices = hits if full else np.vstack([origin, hits])
    return VisibilityPolygon(vertices, origin, start, dangle, radii, full)


def _runs_to_intervals(s: np.ndarray, mask: np.ndarray, step: float,
                       length: float) -> np.ndarray:
    """Maximal True runs of mask over grid s, padded half a step and merged."""
    if not mask.any():
        return np.empty((0, 2))
    idx = np.flatnonzero(mask)
    breaks = np.flatnonzero(np.diff(idx) > 1)
    starts = np.concatenate([[idx[0]], idx[breaks + 1]])
    ends = np.concatenate([idx[breaks], [idx[-1]]])
    lo = np.maximum(s[starts] - 0.5 * step, 0.0)
    hi = np.minimum(s[ends] + 0.5 * step, length)
    # enforce the minimum interval length where the domain allows it
    short = hi - lo < step
    lo[short] = np.maximum(hi[short] - step, 0.0)
    hi[short] = np.minimum(lo[short] + step, length)
    merged = [[lo[0], hi[0]]]
    for lo_i, hi_i in zip(lo[1:], hi[1:]):
        if lo_i <= merged[-1][1] + 1e-12:
            merged[-1][1] = max(merged[-1][1], hi_i)
        else:
            merged.append([lo_i, hi_i])
    return np.array(merged)


def unobserved_intervals(spline: LaneSpline, visible: Polygon,
                         step: float = 0.25) -> np.ndarray:
    """Arc-length intervals of the centerline that fall outside the visible region.

    Returns an (k, 2) array of [s_lo, s_hi] rows, sorted and non-overlapping;
    endpoint resolution is the sampling step.
    """
    if step <= 0.0:
        raise ValueError("step must be positive")
    s, pts = spline.sample_grid(step)
    mask = ~visible.contains_points(pts)
    return _runs_to_intervals(s, mask, step, spline.length)


@dataclass(eq=False)
class OrientedBox:
    """Rectangle with center, heading of the length axis, and extents."""

    center: np.ndarray
    heading: float
    length: float
    width: float

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float).reshape(2)
        if self.length <= 0.0 or self.width <= 0.0:
            raise ValueError("box extents must be positive")

    def corners(self) -> np.ndarray:
        """Corner vertices in counterclockwise order."""
        c, s = math.cos(self.heading), math.sin(self.heading)
        hl, hw = 0.5 * self.length, 0.5 * self.width
        local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
        rot = np.array([[c, -s], [s, c]])
        return self.center + local @ rot.T

    def polygon(self) -> Polygon:
        return Polygon(self.corners())

    def contains_points(self, pts) -> np.ndarray:
        """Box-frame containment test, boundary inclusive."""
        pts = np.atleast_2d(np.asarray(pts, dtype=float))
        rel = pts - self.center
        c, s = math.cos(self.heading), math.sin(self.heading)
        lx = rel[:, 0] * c + rel[:, 1] * s
        ly = -rel[:, 0] * s + rel[:, 1] * c
        return (np.abs(lx) <= 0.5 * self.length + 1e-12) & \
               (np.abs(ly) <= 0.5 * self.width + 1e-12)


def box_overlap(a: OrientedBox, b: OrientedBox) -> bool:
    """Exact rectangle intersection via the separating axis theorem."""
    delta = b.center - a.center
    gap = math.hypot(*delta)
    reach = 0.5 * (math.hypot(a.length, a.width) + math.hypot(b.length, b.width))
    if gap > reach:
        return False
    ca = a.corners()
    cb = b.corners()
    for box in (a, b):
        c, s = math.cos(box.heading), math.sin(box.heading)
        for ax, ay in ((c, s), (-s, c)):
            pa = ca[:, 0] * ax + ca[:, 1] * ay
            pb = cb[:, 0] * ax + cb[:, 1] * ay
            if pa.max() < pb.min() or pb.max() < pa.min():
                return False
    return True
