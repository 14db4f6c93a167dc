"""Command-line entry point: run batches, validate maps, merge summaries."""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .geometry import SensorModel
from .metrics import cdf, discomfort, profile_bands, summarize, write_bands, \
    write_cdf, write_summary
from .planner import PlannerParams
from .risk import MODES, OBSERVED_ONLY, OCCLUSION_AWARE, RiskConfig
from .scene import IntersectionMap, MapLoadError, generate_scenario, \
    load_intersection, synthetic_fourway
from .simulator import TIMEOUT, EpisodeConfig, run_batch, run_episode

OUT_DIR_ENV = "OCCRISK_OUT"
DEFAULT_MODES = (OCCLUSION_AWARE, OBSERVED_ONLY)

# overridable parameters: canonical name -> (section, field, type); sections
# name the owning config ("risk", "planner", "episode", "sensor", "both"
# spans risk and planner fields that must move together)
PARAM_TABLE: dict[str, tuple[str, str, type]] = {
    "forecast_horizon": ("both", "horizon", float),
    "replan_period": ("episode", "replan_period", float),
    "episode_horizon": ("episode", "horizon", float),
    "vehicle_length": ("episode", "vehicle_length", float),
    "vehicle_width": ("episode", "vehicle_width", float),
    "particle_density": ("risk", "particles_per_meter", float),
    "max_particles": ("risk", "max_particles_per_lane", int),
    "sample_step": ("risk", "sample_step", float),
    "lateral_bound": ("both", "lateral_bound", float),
    "kernel_bandwidth": ("planner", "sigma", float),
    "risk_weight": ("planner", "risk_weight", float),
    "speed_weight": ("planner", "speed_weight", float),
    "speed_desired": ("planner", "v_des", float),
    "speed_min": ("planner", "v_min", float),
    "speed_max": ("planner", "v_max", float),
    "accel_min": ("planner", "a_min", float),
    "accel_max": ("planner", "a_max", float),
    "accel_step": ("planner", "accel_step", float),
    "sensor_range": ("sensor", "max_range", float),
    "sensor_fov": ("sensor", "fov", float),
    "sensor_resolution": ("sensor", "angular_resolution", float),
}

# accepted shorthand spellings for the same keys
PARAM_ALIASES = {
    "T_f": "forecast_horizon",
    "T_p": "replan_period",
    "lambda": "speed_weight",
    "sigma": "kernel_bandwidth",
    "density": "particle_density",
    "v_des": "speed_desired",
    "v_min": "speed_min",
    "v_max": "speed_max",
    "a_min": "accel_min",
    "a_max": "accel_max",
    "b_max": "lateral_bound",
}

# particle_density is spoken per 100 m of lane, the configs store per meter
DENSITY_SCALE = 1.0 / 100.0


@dataclass
class RunConfig:
    map: str = "synthetic"
    map_dir: str | None = None
    scenarios: int = 100
    others: int = 5
    modes: tuple[str, ...] = DEFAULT_MODES
    seed: int = 0
    parallelism: int = 1
    out: str | None = None
    ego_route: str | None = None
    export_traces: bool = False
    export_particles: bool = False
    export_profiles: bool = True
    export_cdfs: bool = True
    overrides: dict[str, float] = field(default_factory=dict)

    def validate(self) -> None:
        if self.scenarios < 1:
            raise ValueError("scenarios must be >= 1")
        if self.others < 0:
            raise ValueError("others must be >= 0")
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        if not self.modes:
            raise ValueError("at least one mode is required")
        for mode in self.modes:
            if mode not in MODES:
                raise ValueError(f"unknown mode '{mode}'")
        for key in self.overrides:
            if canonical_key(key) is None:
                raise ValueError(f"unknown parameter '{key}'")


def canonical_key(key: str) -> str | None:
    key = PARAM_ALIASES.get(key, key)
    return key if key in PARAM_TABLE else None


def build_episode_config(overrides: dict[str, float]) -> EpisodeConfig:
    """Fold validated overrides into the nested episode configuration."""
    sections: dict[str, dict] = {"risk": {}, "planner": {}, "episode": {},
                                 "sensor": {}}
    for raw_key, raw_val in overrides.items():
        key = canonical_key(raw_key)
        section, attr, kind = PARAM_TABLE[key]
        val = kind(raw_val)
        if key == "particle_density":
            val *= DENSITY_SCALE
        if section == "both":
            sections["risk"][attr] = val
            sections["planner"][attr] = val
        else:
            sections[section][attr] = val
    sensor = SensorModel(**sections["sensor"])
    risk = RiskConfig(sensor=sensor, **sections["risk"])
    planner = PlannerParams(**sections["planner"])
    return EpisodeConfig(risk=risk, planner=planner, **sections["episode"])


def effective_params(config: EpisodeConfig) -> dict[str, float | int]:
    """The full overridable parameter set as it will actually run."""
    owners = {"risk": config.risk, "planner": config.planner,
              "episode": config, "sensor": config.risk.sensor,
              "both": config.risk}
    out: dict[str, float | int] = {}
    for key, (section, attr, _) in PARAM_TABLE.items():
        val = getattr(owners[section], attr)
        if key == "particle_density":
            val = val / DENSITY_SCALE
        out[key] = val
    return out


def _load_run_config(path: str) -> dict:
    import json

    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ValueError("config document must be an object")
    known = {f.name for f in fields(RunConfig)}
    unknown = set(doc) - known
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    if "modes" in doc:
        doc["modes"] = tuple(doc["modes"])
    return doc


def _resolve_maps(config: RunConfig) -> list[IntersectionMap]:
    if config.map_dir is not None:
        names = sorted(n for n in os.listdir(config.map_dir)
                       if n.endswith(".json"))
        if not names:
            raise MapLoadError(f"no .json maps in {config.map_dir}")
        return [load_intersection(os.path.join(config.map_dir, n))
                for n in names]
    if config.map == "synthetic":
        return [synthetic_fourway()]
    return [load_intersection(config.map)]


def _default_ego_route(imap: IntersectionMap) -> str:
    ids = [rt.route_id for rt in imap.routes]
    # the reference experiment drives the unprotected left from the north arm
    if "n_left" in ids:
        return "n_left"
    with_stop = [rt.route_id for rt in imap.routes if rt.stopline_s > 0.0]
    return sorted(with_stop)[0] if with_stop else sorted(ids)[0]


def _safe_name(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "_" for c in name)


def _write_traces(records, out_dir: str, map_name: str) -> None:
    tdir = os.path.join(out_dir, "traces")
    os.makedirs(tdir, exist_ok=True)
    for rec in records:
        if rec.result is None:
            continue
        res = rec.result
        path = os.path.join(
            tdir, f"{map_name}_{rec.mode}_{rec.scenario_id:04d}.csv")
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write("t,s_ego,v_ego,a_ego,x,y,outcome\n")
            for i in range(len(res.t)):
                fh.write(f"{res.t[i]!r},{res.s[i]!r},{res.v[i]!r},"
                         f"{res.a[i]!r},{res.x[i]!r},{res.y[i]!r},"
                         f"{res.outcome}\n")


def _write_particles(imap: IntersectionMap, config: RunConfig,
                     episode_config: EpisodeConfig, out_dir: str,
                     map_name: str, ego_route: str) -> None:
    """Replay scenario 0 per mode, streaming each replan's risk points."""
    pdir = os.path.join(out_dir, "particles")
    os.makedirs(pdir, exist_ok=True)
    from .simulator import _scenario_seed

    seed = _scenario_seed(config.seed, 0)
    scenario = generate_scenario(imap, ego_route, config.others, seed, 0,
                                 vehicle_length=episode_config.vehicle_length,
                                 vehicle_width=episode_config.vehicle_width,
                                 horizon=episode_config.horizon)
    for mode in config.modes:
        path = os.path.join(pdir, f"{map_name}_{mode}.csv")
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write("t,lane_id,x,y\n")

            def sink(t: float, dist) -> None:
                pts = dist.points
                lane_ids = np.concatenate([
                    np.repeat(g.lane.lane_id, g.count) for g in dist.groups
                ]) if dist.groups else np.empty(0, dtype=object)
                for lane_id, (x, y) in zip(lane_ids, pts):
                    fh.write(f"{t!r},{lane_id},{x!r},{y!r}\n")

            run_episode(scenario, mode, episode_config, particle_sink=sink)


def _figures(out_dir: str, map_name: str, imap: IntersectionMap,
             bands_by_mode: dict, cdf_by_mode: dict) -> None:
    from . import report

    if bands_by_mode:
        report.band_figure(bands_by_mode,
                           os.path.join(out_dir, f"{map_name}_bands.png"))
    if cdf_by_mode:
        report.cdf_figure(cdf_by_mode,
                          os.path.join(out_dir, f"{map_name}_cdf.png"))
    report.map_figure(imap, os.path.join(out_dir, f"{map_name}_map.png"))


def cmd_run(config: RunConfig) -> int:
    episode_config = build_episode_config(config.overrides)
    out_dir = config.out or os.environ.get(OUT_DIR_ENV) or "."
    os.makedirs(out_dir, exist_ok=True)
    maps = _resolve_maps(config)

    all_rows: list[dict] = []
    for imap in maps:
        map_name = _safe_name(imap.name)
        ego_route = config.ego_route or _default_ego_route(imap)
        records = run_batch(imap, ego_route, config.scenarios, config.others,
                            config.modes, base_seed=config.seed,
                            parallelism=config.parallelism,
                            config=episode_config)
        rows = summarize(records, name=imap.name)
        all_rows.extend(rows)
        for row in rows:
            print(f"{row['name']} {row['mode']}: collision_rate="
                  f"{row['collision_rate_pct']:.2f}% discomfort_median="
                  f"{row['discomfort_median']:.4f} "
                  f"discomfort_p95={row['discomfort_p95']:.4f}")

        bands_by_mode: dict = {}
        cdf_by_mode: dict = {}
        for mode in config.modes:
            done = [r.result for r in records
                    if r.mode == mode and r.result is not None]
            scored = [res for res in done if res.outcome != TIMEOUT]
            if config.export_profiles and done:
                bands = profile_bands(done)
                bands_by_mode[mode] = bands
                write_bands(bands, os.path.join(
                    out_dir, f"{map_name}_{mode}_bands.csv"))
            if config.export_cdfs and scored:
                scores = [discomfort(res.t, res.a, duration=res.duration)
                          for res in scored]
                cdf_by_mode[mode] = cdf(scores)
                write_cdf(scores, os.path.join(
                    out_dir, f"{map_name}_{mode}_cdf.csv"))
        if config.export_profiles or config.export_cdfs:
            _figures(out_dir, map_name, imap, bands_by_mode, cdf_by_mode)
        if config.export_traces:
            _write_traces(records, out_dir, map_name)
        if config.export_particles:
            _write_particles(imap, config, episode_config, out_dir, map_name,
                             ego_route)

    write_summary(all_rows, os.path.join(out_dir, "summary.csv"))
    return 0


def cmd_validate(path: str) -> int:
    try:
        imap = load_intersection(path)
    except MapLoadError as exc:
        print(f"INVALID: {exc}")
        return 1
    print(f"OK: {imap.name} ({len(imap.lanes)} lanes, {len(imap.routes)} "
          f"routes, {len(imap.buildings)} buildings)")
    return 0


class MergeError(ValueError):
    pass


def _read_summary(path: str) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise MergeError(f"empty summary {path}")
    header = lines[0].split(",")
    rows = []
    for line in lines[1:]:
        rows.append(dict(zip(header, line.split(","))))
    return rows


def merge_summaries(paths: list[str],
                    origins: dict[str, tuple[float, float]] | None = None
                    ) -> list[dict]:
    """Fold per-run summaries into one rate table keyed by intersection."""
    merged: dict[str, dict[str, str]] = {}
    for path in paths:
        for row in _read_summary(path):
            name, mode = row["name"], row["mode"]
            rates = merged.setdefault(name, {})
            rate = row["collision_rate_pct"]
            if mode in rates and rates[mode] != rate:
                raise MergeError(
                    f"conflicting rates for {name}/{mode}: "
                    f"{rates[mode]} vs {rate}")
            rates[mode] = rate
    origins = origins or {}
    out = []
    for name in sorted(merged):
        lat, lon = origins.get(name, ("", ""))
        row = {"name": name, "lat": str(lat), "lon": str(lon)}
        row.update({f"rate_{m}": r for m, r in sorted(merged[name].items())})
        out.append(row)
    return out


def cmd_overlay(paths: list[str], map_dir: str | None,
                out: str | None) -> int:
    origins: dict[str, tuple[float, float]] = {}
    if map_dir:
        for name in sorted(os.listdir(map_dir)):
            if not name.endswith(".json"):
                continue
            imap = load_intersection(os.path.join(map_dir, name))
            if imap.origin is not None:
                origins[imap.name] = imap.origin
    rows = merge_summaries(paths, origins)
    modes = sorted({k for row in rows for k in row if k.startswith("rate_")})
    header = ["name", "lat", "lon"] + modes
    lines = [",".join(header)]
    lines += [",".join(row.get(c, "") for c in header) for row in rows]
    text = "\n".join(lines) + "\n"
    print(text, end="")
    if out:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, "overlay.csv"), "w", encoding="utf-8",
                  newline="") as fh:
            fh.write(text)
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="occrisk",
        description="Occlusion-aware intersection risk: batch simulation, "
                    "map validation, and summary merging.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="simulate batches and write summaries")
    run.add_argument("config", nargs="?", default=None,
                     help="optional JSON config mirroring RunConfig; "
                          "flags override file values")
    run.add_argument("--map", default=None,
                     help="'synthetic' or a map JSON path")
    run.add_argument("--map-dir", default=None,
                     help="directory of map JSON files (overrides --map)")
    run.add_argument("--scenarios", type=int, default=None)
    run.add_argument("--others", type=int, default=None)
    run.add_argument("--modes", default=None,
                     help="comma-separated subset of: " + ", ".join(MODES))
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--parallelism", type=int, default=None)
    run.add_argument("--out", default=None,
                     help=f"output directory (falls back to ${OUT_DIR_ENV})")
    run.add_argument("--export-traces", action="store_true", default=None,
                     help="write per-episode trace CSVs")
    run.add_argument("--export-particles", action="store_true", default=None,
                     help="replay scenario 0 per mode and dump risk points")
    run.add_argument("--set", dest="overrides", action="append", default=[],
                     metavar="KEY=VALUE",
                     help="override a model parameter (repeatable); keys: "
                          + ", ".join(PARAM_TABLE))
    run.add_argument("--print-params", action="store_true",
                     help="echo the effective parameter set and exit")

    val = sub.add_parser("validate", help="check a map file's invariants")
    val.add_argument("map", help="map JSON path")

    ovl = sub.add_parser("overlay",
                         help="merge summaries into a per-intersection table")
    ovl.add_argument("summaries", nargs="+", help="summary CSV paths")
    ovl.add_argument("--map-dir", default=None,
                     help="map directory used to look up intersection origins")
    ovl.add_argument("--out", default=None,
                     help="also write overlay.csv into this directory")
    return parser


def _parse_overrides(pairs: list[str], parser: argparse.ArgumentParser) -> dict:
    overrides = {}
    for pair in pairs:
        key, sep, value = pair.partition("=")
        if not sep or not key:
            parser.error(f"--set expects KEY=VALUE, got '{pair}'")
        if canonical_key(key) is None:
            parser.error(f"unknown parameter '{key}'")
        try:
            overrides[key] = float(value)
        except ValueError:
            parser.error(f"parameter '{key}' needs a numeric value")
    return overrides


def _run_config_from_args(args, parser: argparse.ArgumentParser) -> RunConfig:
    file_values: dict = {}
    if args.config is not None:
        try:
            file_values = _load_run_config(args.config)
        except ValueError as exc:
            parser.error(str(exc))
    config = RunConfig(**file_values)
    flag_values = {
        "map": args.map, "map_dir": args.map_dir,
        "scenarios": args.scenarios, "others": args.others,
        "seed": args.seed, "parallelism": args.parallelism, "out": args.out,
        "export_traces": args.export_traces,
        "export_particles": args.export_particles,
    }
    if args.modes is not None:
        flag_values["modes"] = tuple(m for m in args.modes.split(",") if m)
    updates = {k: v for k, v in flag_values.items() if v is not None}
    flag_overrides = _parse_overrides(args.overrides, parser)
    if flag_overrides:
        merged = dict(config.overrides)
        merged.update(flag_overrides)
        updates["overrides"] = merged
    config = replace(config, **updates)
    try:
        config.validate()
    except ValueError as exc:
        parser.error(str(exc))
    return config


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.command == "run":
        config = _run_config_from_args(args, parser)
        if args.print_params:
            for key, val in sorted(
                    effective_params(
                        build_episode_config(config.overrides)).items()):
                print(f"{key}={val}")
            return 0
        try:
            return cmd_run(config)
        except MapLoadError as exc:
            print(f"map load failed: {exc}", file=sys.stderr)
            return 1
    if args.command == "validate":
        return cmd_validate(args.map)
    if args.command == "overlay":
        try:
            return cmd_overlay(args.summaries, args.map_dir, args.out)
        except (MergeError, OSError, MapLoadError) as exc:
            print(f"overlay failed: {exc}", file=sys.stderr)
            return 1
    raise AssertionError("unreachable")


if __name__ == "__main__":
    raise SystemExit(main())
