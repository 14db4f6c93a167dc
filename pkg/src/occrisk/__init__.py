"""Occlusion-aware collision risk assessment and longitudinal planning."""

from occrisk.geometry import (
    LaneSpline,
    OrientedBox,
    Polygon,
    SensorModel,
    box_overlap,
    spline_from_waypoints,
    unobserved_intervals,
    visibility_polygon,
)
from occrisk.metrics import (
    cdf,
    collision_rate,
    discomfort,
    profile_bands,
    summarize,
)
from occrisk.planner import PlannerParams, PlanResult, plan
from occrisk.risk import (
    MODES,
    OBSERVED_ONLY,
    OCCLUSION_AWARE,
    RiskConfig,
    RiskDistribution,
    assess,
)
from occrisk.scene import (
    IntersectionMap,
    Route,
    Scenario,
    VehicleState,
    generate_scenario,
    load_intersection,
    save_intersection,
    synthetic_fourway,
)
from occrisk.simulator import (
    EpisodeConfig,
    EpisodeRecord,
    EpisodeResult,
    run_batch,
    run_episode,
)

__version__ = "0.1.0"
