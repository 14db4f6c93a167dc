"""Figure rendering for batch results (separate from the table-only metrics)."""
from __future__ import annotations

import numpy as np

from .metrics import ACCEL_THRESHOLD, ProfileBands
from .scene import IntersectionMap, Scenario

MODE_COLORS = {"occlusion_aware": "tab:blue", "observed_only": "tab:orange"}
_FALLBACK_COLORS = ("tab:green", "tab:red", "tab:purple", "tab:brown")


def _plt():
    # imported lazily so table-only workflows never pay for matplotlib
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _mode_color(mode: str, index: int) -> str:
    return MODE_COLORS.get(mode, _FALLBACK_COLORS[index % len(_FALLBACK_COLORS)])


def band_figure(bands: dict[str, ProfileBands], path: str) -> None:
    """Speed and acceleration percentile fans over time, one column per mode."""
    if not bands:
        raise ValueError("band_figure needs at least one mode")
    plt = _plt()
    modes = list(bands)
    fig, axes = plt.subplots(2, len(modes), figsize=(4.6 * len(modes), 5.6),
                             sharex=True, sharey="row", squeeze=False)
    for col, mode in enumerate(modes):
        b = bands[mode]
        color = _mode_color(mode, col)
        pairs = len(b.percentiles) // 2
        for ax, series, label in ((axes[0][col], b.v, "speed (m/s)"),
                                  (axes[1][col], b.a, "acceleration (m/s^2)")):
            for k in range(pairs):
                ax.fill_between(b.bin_centers, series[k], series[-1 - k],
                                color=color, alpha=0.18, linewidth=0.0)
            ax.plot(b.bin_centers, series[pairs], color=color, linewidth=1.6)
            ax.set_ylabel(label)
            ax.grid(True, alpha=0.3)
        axes[1][col].axhline(-ACCEL_THRESHOLD, color="black", linestyle="--",
                             linewidth=0.8)
        axes[0][col].set_title(mode)
        axes[1][col].set_xlabel("time (s)")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def cdf_figure(curves: dict[str, np.ndarray], path: str,
               xlabel: str = "discomfort score") -> None:
    """Empirical CDF step curves, one per mode, on shared axes."""
    if not curves:
        raise ValueError("cdf_figure needs at least one curve")
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5.2, 3.6))
    for i, (mode, table) in enumerate(curves.items()):
        table = np.asarray(table, dtype=float)
        ax.step(table[:, 0], table[:, 1], where="post", label=mode,
                color=_mode_color(mode, i), linewidth=1.6)
    ax.set_xlabel(xlabel)
    ax.set_ylabel("cumulative fraction")
    ax.set_ylim(0.0, 1.02)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def map_figure(imap: IntersectionMap, path: str,
               scenario: Scenario | None = None) -> None:
    """Top-down map render: buildings, lane centerlines, optional vehicles."""
    plt = _plt()
    fig, ax = plt.subplots(figsize=(5.6, 5.6))
    for bld in imap.buildings:
        ax.fill(bld.vertices[:, 0], bld.vertices[:, 1], color="0.82",
                edgecolor="0.55", linewidth=0.8, zorder=1)
    for lane in imap.lanes:
        s, pts = lane.sample_grid(0.5)
        ax.plot(pts[:, 0], pts[:, 1], color="0.45", linewidth=1.0, zorder=2)
    if scenario is not None:
        boxes = [(scenario.ego, "tab:blue")]
        boxes += [(o, "tab:red") for o in scenario.others]
        for state, color in boxes:
            route = imap.route(state.route_id)
            xy = route.spline.eval(np.array([state.s]))[0]
            tang = route.spline.tangent(np.array([state.s]))[0]
            ax.add_patch(_vehicle_patch(ax, xy, np.arctan2(tang[1], tang[0]),
                                        color))
        goal = imap.route(scenario.ego.route_id).spline.eval(
            np.array([scenario.goal_s]))[0]
        ax.plot(*goal, marker="*", color="gold", markersize=14,
                markeredgecolor="0.3", zorder=5)
    ax.set_aspect("equal")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.grid(True, alpha=0.25)
    fig.tight_layout()
    fig.savefig(path, dpi=130)
    plt.close(fig)


def _vehicle_patch(ax, center: np.ndarray, heading: float, color: str,
                   length: float = 4.88, width: float = 1.86):
    from matplotlib.patches import Rectangle
    from matplotlib.transforms import Affine2D

    rect = Rectangle((center[0] - length / 2.0, center[1] - width / 2.0),
                     length, width, facecolor=color, edgecolor="black",
                     linewidth=0.7, alpha=0.9, zorder=4)
    rect.set_transform(Affine2D().rotate_around(center[0], center[1], heading)
                       + ax.transData)
    return rect
