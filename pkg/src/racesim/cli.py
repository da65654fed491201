"""Command-line pipeline: prepare, fit, simulate, counterfactual, profiles, ratings, synth.

Every command reads one YAML config (``--config``); relative paths in it are
resolved against the config file's directory. Tables are written as CSV with
a leading ``#`` provenance line (command, config digest, seed); structured
results are JSON; figures are PNG files under ``figures/``.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
import yaml

from . import plotting
from .covariates import AssemblyError, build_design_table
from .drafting import DragTable, DragTableError
from .geometry import GeoPoint, GeometryError, TrackConfigError, build_track_from_geo, read_outline, write_outline
from .inference import FitConfig, FittedParams, ParamsVersionError, PriorConfig, fit_models, jockey_ratings
from .ingest import SchemaError, parse_tracking, prepare_tracking
from .optim import OptimizationError
from .profiles import ClusteringInputError, cluster_profiles, export_dendrogram, profile_vectors
from .simulator import (
    Engine,
    PlacementMatrix,
    RaceState,
    SimulationError,
    counterfactual_lane_experiment,
    lane_offsets,
    posterior_predictive,
    start_from_frames,
)
from .spline import SplineSpec, SplineSpecError

log = logging.getLogger("racesim")

DEFAULTS = {
    "seed": 0,
    "workers": 1,
    "output_dir": "racesim_out",
    "figures": True,
    "data": {"tracking": None, "prepared": None, "params": None, "tracks": {}},
    "prepare": {"freeze_eps": 0.05, "v_max": 20.0, "guard_frames": 40, "frame_period": None},
    "spline": SplineSpec().to_dict(),
    "prior": PriorConfig().to_dict(),
    "drag": DragTable().to_dict(),
    "fit": {"max_iter": 2000, "rel_tol": 1e-8, "grad_tol": 1e-5, "memory": 20, "truncate": True},
    "simulate": {"race_id": None, "start_frames": None, "n_draws": 2000, "grid": None, "batch_size": 1000,
                 "frame_cap": 1200},
    "counterfactual": {"competitors": None, "jockeys": None, "context": None, "sims_per_assignment": 100,
                       "lane_width": 1.0, "race_distance": None},
    "profiles": {"k": 3, "min_races": 5},
    "synth": {},
}
# keys that never change results and so stay out of the digest
_NON_SEMANTIC = ("workers", "output_dir")


class ConfigError(ValueError):
    pass


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (over or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "tracks":
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class RunConfig:
    raw: dict
    base_dir: Path
    output_dir: Path

    @property
    def seed(self) -> int:
        return int(self.raw["seed"])

    @property
    def workers(self) -> int:
        return max(1, int(self.raw["workers"]))

    @property
    def digest(self) -> str:
        sem = {k: v for k, v in self.raw.items() if k not in _NON_SEMANTIC}
        text = json.dumps(sem, sort_keys=True, default=str)
        return hashlib.sha256(text.encode()).hexdigest()[:16]

    def path(self, value) -> Path | None:
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def data_path(self, key: str, default_name: str | None = None) -> Path:
        p = self.path(self.raw["data"].get(key))
        if p is None and default_name is not None:
            p = self.output_dir / default_name
        if p is None:
            raise ConfigError(f"config needs data.{key}")
        return p

    def provenance(self, command: str) -> dict:
        return {"command": command, "config_digest": self.digest, "seed": self.seed}


def load_config(path, overrides: dict | None = None) -> RunConfig:
    raw = {}
    base = Path.cwd()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        with open(path, encoding="utf-8") as fh:
            raw = yaml.safe_load(fh) or {}
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a mapping")
        base = path.resolve().parent
    cfg = _merge(DEFAULTS, raw)
    for k, v in (overrides or {}).items():
        if v is not None:
            cfg[k] = v
    out = Path(cfg["output_dir"])
    if overrides and overrides.get("output_dir") is not None:
        out = Path(overrides["output_dir"])
    elif not out.is_absolute():
        out = base / out
    return RunConfig(cfg, base, out)


# --------------------------------------------------------------------------
# io helpers


def write_table(df: pd.DataFrame, path: Path, cfg: RunConfig, command: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# racesim {command} config_digest={cfg.digest} seed={cfg.seed}\n")
        df.to_csv(fh, index=False, float_format="%.10g", lineterminator="\n")
    return path


def write_json(obj: dict, path: Path, cfg: RunConfig, command: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"provenance": cfg.provenance(command), **obj}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True, default=_json_default)
        fh.write("\n")
    return path


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o).__name__)


def read_table(path: Path) -> pd.DataFrame:
    if not path.exists():
        raise FileNotFoundError(f"missing input file: {path}")
    return pd.read_csv(path, comment="#")


def build_tracks(cfg: RunConfig) -> dict:
    specs = cfg.raw["data"].get("tracks") or {}
    if not specs:
        raise ConfigError("config needs data.tracks with at least one track outline")
    tracks = {}
    for tid, spec in specs.items():
        if not isinstance(spec, dict) or "outline" not in spec or "start" not in spec:
            raise ConfigError(f"track {tid}: needs 'outline' and 'start' entries")
        outline = cfg.path(spec["outline"])
        if not outline.exists():
            raise FileNotFoundError(f"track {tid}: outline file not found: {outline}")
        lat, lon = spec["start"]
        tracks[str(tid)] = build_track_from_geo(
            read_outline(outline),
            GeoPoint(float(lat), float(lon)).validate(),
            race_distance=float(spec.get("race_distance", 1609.34)),
            chutes=tuple(tuple(c) for c in spec.get("chutes", ()) or ()),
            closed=bool(spec.get("closed", True)),
            track_id=str(tid),
        )
    return tracks


def _drag(cfg: RunConfig) -> DragTable:
    return DragTable.from_dict(cfg.raw["drag"])


def _figures(cfg: RunConfig) -> Path | None:
    if not cfg.raw.get("figures", True):
        return None
    d = cfg.output_dir / "figures"
    d.mkdir(parents=True, exist_ok=True)
    return d


def _load_params(cfg: RunConfig) -> FittedParams:
    path = cfg.data_path("params", "params.json")
    if not path.exists():
        raise FileNotFoundError(f"parameter file not found: {path}")
    return FittedParams.load(path)


def _load_prepared(cfg: RunConfig):
    path = cfg.data_path("prepared", "prepared.csv")
    if not path.exists():
        raise FileNotFoundError(f"prepared table not found: {path} (run 'prepare' first)")
    return parse_tracking(path, cfg.raw["prepare"].get("frame_period"))


# --------------------------------------------------------------------------
# commands


def cmd_prepare(cfg: RunConfig) -> dict:
    tracking = cfg.data_path("tracking")
    if not tracking.exists():
        raise FileNotFoundError(f"tracking file not found: {tracking}")
    tracks = build_tracks(cfg)
    p = cfg.raw["prepare"]
    table = parse_tracking(tracking, p.get("frame_period"))
    unknown = sorted(set(table.frames["track_id"]) - set(tracks))
    if unknown:
        raise ConfigError(f"no outline configured for track(s): {', '.join(unknown)}")
    prepared, report = prepare_tracking(table, tracks, freeze_eps=float(p["freeze_eps"]),
                                        v_max=float(p["v_max"]), guard_frames=int(p["guard_frames"]))
    out = cfg.output_dir
    cols = [c for c in prepared.frames.columns]
    write_table(prepared.frames[cols], out / "prepared.csv", cfg, "prepare")
    rows = build_design_table(prepared.frames, tracks, _drag(cfg), prepared.frame_period)
    write_table(rows, out / "design_rows.csv", cfg, "prepare")
    rep = report.to_dict()
    rep["frame_period"] = prepared.frame_period
    rep["n_design_rows"] = int(len(rows))
    write_json({"report": rep}, out / "preparation_report.json", cfg, "prepare")
    log.info("prepared %d rows from %d races; %d anomaly span(s), imputed fraction %.4f",
             len(prepared), rep["n_races"], rep["n_spans"], rep["imputed_fraction"])
    return rep


def cmd_fit(cfg: RunConfig) -> dict:
    prepared = _load_prepared(cfg)
    tracks = build_tracks(cfg)
    rows = build_design_table(prepared.frames, tracks, _drag(cfg), prepared.frame_period)
    f = cfg.raw["fit"]
    fit_cfg = FitConfig(int(f["max_iter"]), float(f["rel_tol"]), float(f["grad_tol"]), int(f["memory"]),
                        bool(f["truncate"]))
    race_counts = rows.groupby("horse_id")["race_id"].nunique()
    provenance = {**cfg.provenance("fit"), "race_counts": {str(k): int(v) for k, v in race_counts.items()}}
    diag_path = cfg.output_dir / "fit_diagnostics.json"
    try:
        params = fit_models(rows, SplineSpec.from_dict(cfg.raw["spline"]), PriorConfig.from_dict(cfg.raw["prior"]),
                            fit_cfg, cfg.raw["drag"], prepared.frame_period, provenance)
    except OptimizationError as exc:
        write_json({"status": "failed", "error": str(exc), "diagnostics": exc.diagnostics}, diag_path, cfg, "fit")
        raise
    cfg.output_dir.mkdir(parents=True, exist_ok=True)
    params.save(cfg.output_dir / "params.json")
    diag = {"status": "ok", "forward": params.forward.diagnostics, "lateral": params.lateral.diagnostics}
    write_json(diag, diag_path, cfg, "fit")
    for kind in ("forward", "lateral"):
        d = diag[kind]
        log.info("%s model: %d iterations, converged=%s, gradient max-norm %.3g", kind, d["iterations"],
                 d["converged"], d["grad_max_norm"])
    return diag


def _write_placement(pm: PlacementMatrix, stem: str, cfg: RunConfig, command: str, label: str = "competitor"):
    write_table(pm.to_frame(label), cfg.output_dir / f"{stem}.csv", cfg, command)
    write_json({"placement": pm.to_dict()}, cfg.output_dir / f"{stem}.json", cfg, command)


def cmd_simulate(cfg: RunConfig) -> dict:
    params = _load_params(cfg)
    tracks = build_tracks(cfg)
    s = cfg.raw["simulate"]
    n_draws = int(s["n_draws"])
    grid = s.get("grid")
    drag = DragTable.from_dict(params.drag) if params.drag else _drag(cfg)
    results = []
    if grid:
        tid = str(grid.get("track_id", next(iter(tracks))))
        track = tracks[tid]
        horses = [str(h) for h in grid["horses"]]
        jockeys = [str(j) for j in grid.get("jockeys") or ["none"] * len(horses)]
        lateral = grid.get("lateral") or lane_offsets(len(horses), float(grid.get("lane_width", 1.0))).tolist()
        context = str(grid.get("context") or params.forward.contexts[0])
        starts = [RaceState.grid(horses, jockeys, context, lateral, track.race_distance, params.frame_period)]
    else:
        race_id = s.get("race_id")
        if race_id is None:
            raise ConfigError("simulate needs simulate.race_id (or simulate.grid)")
        prepared = _load_prepared(cfg)
        race = prepared.frames[prepared.frames["race_id"].astype(str) == str(race_id)]
        if race.empty:
            raise KeyError(f"unknown race id '{race_id}'")
        track = tracks[str(race["track_id"].iloc[0])]
        frames = s.get("start_frames")
        if frames is None:
            frames = [int(race["frame"].min())]
        elif isinstance(frames, (int, str)):
            frames = [int(v) for v in str(frames).split(",")]
        starts = [start_from_frames(prepared.frames, str(race_id), int(f), track, drag, prepared.frame_period)
                  for f in frames]
    engine = Engine(track, params, drag, frame_cap=int(s["frame_cap"]))
    series = []
    for st in starts:
        # common random numbers across start frames keep the series smooth
        pm = posterior_predictive(st, engine, n_draws, cfg.seed, cfg.workers, int(s["batch_size"]))
        results.append(pm)
        df = pm.to_frame()
        df.insert(0, "start_frame", st.frame)
        series.append(df)
    table = pd.concat(series, ignore_index=True)
    write_table(table, cfg.output_dir / "placement.csv", cfg, "simulate")
    write_json({"series": [pm.to_dict() for pm in results], "n_draws": n_draws}, cfg.output_dir / "placement.json",
               cfg, "simulate")
    figs = _figures(cfg)
    if figs is not None:
        plotting.placement_heatmap(results[-1], figs / "placement_heatmap.png",
                                   f"Placement probabilities from frame {starts[-1].frame}")
        plotting.finish_time_intervals(results[-1], figs / "finish_times.png")
        if len(results) > 1:
            plotting.win_probability_series(table, figs / "win_probability.png")
    return {"start_frames": [st.frame for st in starts], "win_probability": [pm.win_probability.tolist() for pm in results]}


def cmd_counterfactual(cfg: RunConfig) -> dict:
    params = _load_params(cfg)
    tracks = build_tracks(cfg)
    c = cfg.raw["counterfactual"]
    comps = c.get("competitors")
    if not comps:
        raise ConfigError("counterfactual needs counterfactual.competitors")
    comps = [str(h) for h in comps]
    jockeys = [str(j) for j in (c.get("jockeys") or ["none"] * len(comps))]
    context = str(c.get("context") or params.forward.contexts[0])
    track = tracks[str(c.get("track_id", next(iter(tracks))))]
    drag = DragTable.from_dict(params.drag) if params.drag else _drag(cfg)
    engine = Engine(track, params, drag, frame_cap=int(cfg.raw["simulate"]["frame_cap"]))
    exp = counterfactual_lane_experiment(
        comps, jockeys, context, engine, int(c["sims_per_assignment"]), cfg.seed, float(c["lane_width"]),
        workers=cfg.workers, race_distance=c.get("race_distance"),
    )
    _write_placement(exp.lanes, "lanes", cfg, "counterfactual", "lane")
    _write_placement(exp.competitors, "lane_competitors", cfg, "counterfactual")
    figs = _figures(cfg)
    if figs is not None:
        plotting.lane_heatmap(exp.lanes, figs / "lane_heatmap.png")
        plotting.finish_time_intervals(exp.lanes, figs / "lane_finish_times.png")
    return {"n_assignments": exp.n_assignments, "sims_per_assignment": exp.sims_per_assignment,
            "expected_rank": exp.lanes.expected_rank.tolist()}


def cmd_profiles(cfg: RunConfig) -> dict:
    params = _load_params(cfg)
    p = cfg.raw["profiles"]
    counts = params.provenance.get("race_counts", {})
    vecs = profile_vectors(params.forward.values["theta"], params.forward.horses, counts)
    res = cluster_profiles(vecs, int(p["k"]), int(p["min_races"]))
    tree, curves = export_dendrogram(res)
    write_table(res.assignments(), cfg.output_dir / "clusters.csv", cfg, "profiles")
    write_table(tree, cfg.output_dir / "tree.csv", cfg, "profiles")
    write_table(curves, cfg.output_dir / "curves.csv", cfg, "profiles")
    figs = _figures(cfg)
    if figs is not None:
        plotting.profile_curves(curves, figs / "profiles.png")
        plotting.dendrogram_plot(res, figs / "dendrogram.png")
    return {"n_horses": len(res.horse_ids), "k": res.k}


def cmd_ratings(cfg: RunConfig) -> dict:
    params = _load_params(cfg)
    table = jockey_ratings(params.forward)
    write_table(table, cfg.output_dir / "ratings.csv", cfg, "ratings")
    figs = _figures(cfg)
    if figs is not None:
        plotting.ratings_plot(table, figs / "ratings.png")
    return {"top": table["jockey_id"].head(5).tolist()}


def cmd_synth(cfg: RunConfig) -> dict:
    from .synth import StadiumSpec, SynthConfig, generate

    sc = SynthConfig.from_dict({**cfg.raw.get("synth", {}), "seed": cfg.seed})
    data = generate(sc, StadiumSpec())
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    write_table(data.tracking, out / "tracking.csv", cfg, "synth")
    write_outline(out / "track_outline.csv", data.outlines)
    data.truth.params.save(out / "truth_params.json")
    config = {
        "seed": cfg.seed,
        "output_dir": "results",
        "data": {
            "tracking": "tracking.csv",
            "tracks": {data.track.track_id: {"outline": "track_outline.csv",
                                             "start": [data.start_gate.latitude, data.start_gate.longitude],
                                             "race_distance": data.track.race_distance}},
        },
        "simulate": {"race_id": data.plans[0].race_id, "n_draws": 200},
        "counterfactual": {"competitors": list(data.plans[0].horses[:6]), "jockeys": list(data.plans[0].jockeys[:6]),
                           "context": data.plans[0].context, "sims_per_assignment": 10},
    }
    with open(out / "config.yaml", "w", encoding="utf-8") as fh:
        yaml.safe_dump(config, fh, sort_keys=True)
    return {"n_rows": int(len(data.tracking)), "races": len(data.plans), "anomalies": data.anomalies}


COMMANDS = {
    "prepare": cmd_prepare,
    "fit": cmd_fit,
    "simulate": cmd_simulate,
    "counterfactual": cmd_counterfactual,
    "profiles": cmd_profiles,
    "ratings": cmd_ratings,
    "synth": cmd_synth,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration")
    common.add_argument("--seed", type=int, help="base random seed (overrides the config)")
    common.add_argument("--workers", type=int, help="maximum worker processes for simulation")
    common.add_argument("--output-dir", dest="output_dir", help="directory for results (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="racesim", description="Horse-race movement models and simulation.",
                                     parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="project, clean and impute tracking data")
    sub.add_parser("fit", parents=[common], help="fit the forward and lateral models")
    sim = sub.add_parser("simulate", parents=[common], help="placement probabilities from a race state")
    sim.add_argument("--race-id", dest="race_id")
    sim.add_argument("--start-frame", dest="start_frames", help="start frame(s), comma separated")
    sim.add_argument("--draws", dest="n_draws", type=int)
    cf = sub.add_parser("counterfactual", parents=[common], help="lane-assignment experiment")
    cf.add_argument("--sims", dest="sims_per_assignment", type=int, help="simulations per assignment")
    cf.add_argument("--competitors", help="comma-separated horse ids")
    pr = sub.add_parser("profiles", parents=[common], help="cluster speed profiles")
    pr.add_argument("-k", dest="k", type=int, help="number of clusters")
    sub.add_parser("ratings", parents=[common], help="jockey ratings table")
    sy = sub.add_parser("synth", parents=[common], help="write a synthetic fixture and its config")
    sy.add_argument("--races", dest="n_races", type=int)
    sy.add_argument("--horses", dest="n_horses", type=int)
    sy.add_argument("--jockeys", dest="n_jockeys", type=int)
    sy.add_argument("--anomaly", action="store_true", default=None, help="inject one freeze-then-jump glitch")
    return parser


def _section_overrides(args) -> dict:
    sec = {}
    if args.command == "simulate":
        sec["simulate"] = {k: getattr(args, k) for k in ("race_id", "start_frames", "n_draws")}
    elif args.command == "counterfactual":
        comps = args.competitors.split(",") if args.competitors else None
        sec["counterfactual"] = {"sims_per_assignment": args.sims_per_assignment, "competitors": comps}
    elif args.command == "profiles":
        sec["profiles"] = {"k": args.k}
    elif args.command == "synth":
        sec["synth"] = {k: getattr(args, k) for k in ("n_races", "n_horses", "n_jockeys", "anomaly")}
    return {s: {k: v for k, v in d.items() if v is not None} for s, d in sec.items()}


EXIT_ERROR = 2
EXIT_OPTIMIZATION = 3


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, {"seed": args.seed, "workers": args.workers, "output_dir": args.output_dir})
        for section, vals in _section_overrides(args).items():
            cfg.raw[section] = _merge(cfg.raw.get(section) or {}, vals)
        result = COMMANDS[args.command](cfg)
    except OptimizationError as exc:
        print(f"racesim {args.command}: optimisation failed: {exc}", file=sys.stderr)
        return EXIT_OPTIMIZATION
    except (ConfigError, SchemaError, FileNotFoundError, KeyError, IndexError, ParamsVersionError, SimulationError,
            GeometryError, TrackConfigError, DragTableError, SplineSpecError, ClusteringInputError, AssemblyError,
            ValueError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"racesim {args.command}: error: {msg}", file=sys.stderr)
        return EXIT_ERROR
    print(json.dumps({"command": args.command, "output_dir": str(cfg.output_dir), **result},
                     default=_json_default, sort_keys=True))
    return 0


if __name__ == "__main__":
    sys.exit(main())
