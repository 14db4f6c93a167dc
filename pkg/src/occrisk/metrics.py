"""Aggregate episode traces into rates, discomfort scores, bands, and CDFs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from occrisk.simulator import COLLISION, TIMEOUT, EpisodeRecord, EpisodeResult

ACCEL_THRESHOLD = 4.0  # m/s^2, half the braking floor magnitude
BAND_PERCENTILES = (5.0, 20.0, 35.0, 50.0, 65.0, 80.0, 95.0)
SUMMARY_COLUMNS = ("name", "mode", "n", "collision_rate_pct",
                   "discomfort_median", "discomfort_p95", "timeout_count")


def collision_rate(results: list[EpisodeResult]) -> float:
    """Percent of episodes that ended in a collision; timeouts count only
    toward the denominator."""
    if len(results) == 0:
        raise ValueError("collision_rate needs at least one episode")
    hits = sum(1 for r in results if r.outcome == COLLISION)
    return 100.0 * hits / len(results)


def discomfort(t: np.ndarray, a: np.ndarray,
               a_thresh: float = ACCEL_THRESHOLD,
               duration: float | None = None) -> float:
    """Time-averaged positive excess of |a| over a_thresh (trapezoid rule).

    `duration` defaults to the trace span; pass the episode duration when the
    grid does not land exactly on it.
    """
    t = np.asarray(t, dtype=float)
    a = np.asarray(a, dtype=float)
    T = float(t[-1] - t[0]) if duration is None else float(duration)
    if T <= 0.0:
        raise ValueError("discomfort needs a positive duration")
    excess = np.maximum(0.0, np.abs(a) - a_thresh)
    return float(np.trapezoid(excess, t) / T)


@dataclass(eq=False)
class ProfileBands:
    """Percentile ribbons of speed and acceleration on a common time grid."""

    bin_centers: np.ndarray        # (n_bins,)
    percentiles: tuple[float, ...]
    v: np.ndarray                  # (len(percentiles), n_bins)
    a: np.ndarray
    n_active: np.ndarray           # episodes contributing to each bin


def profile_bands(results: list[EpisodeResult],
                  bin_width: float = 0.5) -> ProfileBands:
    """Per-bin percentiles over the episodes whose trace reaches the bin center.

    Traces are sampled at each center by linear interpolation; percentiles use
    the linear-interpolation definition.  Bins past every trace are dropped.
    """
    if bin_width <= 0.0:
        raise ValueError("bin width must be positive")
    if len(results) == 0:
        raise ValueError("profile_bands needs at least one episode")
    ends = np.array([r.t[-1] for r in results])
    n_bins = int(np.ceil(ends.max() / bin_width))
    centers = (np.arange(n_bins) + 0.5) * bin_width
    keep = np.array([np.any(ends >= c) for c in centers])
    centers = centers[keep]
    ranks = np.asarray(BAND_PERCENTILES)
    v_out = np.empty((len(ranks), len(centers)))
    a_out = np.empty_like(v_out)
    n_act = np.empty(len(centers), dtype=int)
    for j, c in enumerate(centers):
        live = [r for r in results if r.t[-1] >= c]
        n_act[j] = len(live)
        v_out[:, j] = np.percentile([np.interp(c, r.t, r.v) for r in live], ranks)
        a_out[:, j] = np.percentile([np.interp(c, r.t, r.a) for r in live], ranks)
    return ProfileBands(centers, tuple(BAND_PERCENTILES), v_out, a_out, n_act)


def cdf(values) -> np.ndarray:
    """Empirical CDF as an (n, 2) array of (sorted value, cumulative fraction)."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise ValueError("cdf needs at least one value")
    ordered = np.sort(values)
    frac = np.arange(1, ordered.size + 1) / ordered.size
    return np.stack([ordered, frac], axis=1)


def summarize(records: list[EpisodeRecord], name: str = "batch") -> list[dict]:
    """One row per mode over the completed episodes (error records skipped).

    Discomfort aggregates skip timeouts: a capped trace never finished its
    maneuver, so its time average is not comparable.  Collision episodes score
    their trace up to the impact, which is where the recording stops.
    """
    rows = []
    for mode in sorted({r.mode for r in records}):
        done = [r.result for r in records
                if r.mode == mode and r.result is not None]
        if not done:
            continue
        scored = [res for res in done if res.outcome != TIMEOUT]
        scores = np.array([discomfort(res.t, res.a, duration=res.duration)
                           for res in scored])
        med, p95 = (float("nan"), float("nan")) if scores.size == 0 else (
            float(np.percentile(scores, 50.0)),
            float(np.percentile(scores, 95.0)))
        rows.append({
            "name": name,
            "mode": mode,
            "n": len(done),
            "collision_rate_pct": collision_rate(done),
            "discomfort_median": med,
            "discomfort_p95": p95,
            "timeout_count": sum(res.outcome == TIMEOUT for res in done),
        })
    return rows


def format_summary(rows: list[dict]) -> str:
    """Render summary rows as CSV text; floats use repr for exact round-trip."""
    def cell(v):
        return repr(v) if isinstance(v, float) else str(v)

    lines = [",".join(SUMMARY_COLUMNS)]
    lines += [",".join(cell(row[c]) for c in SUMMARY_COLUMNS) for row in rows]
    return "\n".join(lines) + "\n"


def write_summary(rows: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(format_summary(rows))


def write_cdf(values, path) -> None:
    table = cdf(values)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("value,cum_fraction\n")
        for val, frac in table:
            fh.write(f"{val!r},{frac!r}\n")


def write_bands(bands: ProfileBands, path) -> None:
    cols = ["bin_center", "n_active"]
    cols += [f"v_p{p:g}" for p in bands.percentiles]
    cols += [f"a_p{p:g}" for p in bands.percentiles]
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(",".join(cols) + "\n")
        for j in range(len(bands.bin_centers)):
            vals = [repr(float(bands.bin_centers[j])), str(int(bands.n_active[j]))]
            vals += [repr(float(x)) for x in bands.v[:, j]]
            vals += [repr(float(x)) for x in bands.a[:, j]]
            fh.write(",".join(vals) + "\n")
