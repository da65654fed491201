"""Synthetic tracks, known "true" parameters and races simulated from them.

The synthetic track is a counter-clockwise stadium oval. Races start on the
top straight, run through the left turn and finish on the bottom straight
(the home stretch). Generated races go through the same simulator used for
prediction and are written out as geographic tracking rows.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .covariates import FORWARD_COLUMNS, LATERAL_COLUMNS
from .geometry import GeoPoint, TrackModel, build_track_from_geo, plane_to_geo
from .inference import FittedParams, Layout, ModelFit, PriorConfig, Standardizer
from .simulator import Engine, RaceState, lane_offsets
from .spline import SplineSpec

log = logging.getLogger(__name__)

SYNTH_ORIGIN = GeoPoint(40.715, -73.725)

# fast-start/fade, steady, slow-start/kick (m/frame)
ARCHETYPES = {
    "front": (3.0, 4.15, 4.45, 4.35, 4.15, 3.95, 3.85, 3.75, 3.75),
    "steady": (2.8, 3.85, 4.15, 4.15, 4.12, 4.08, 4.05, 4.05, 4.05),
    "closer": (2.6, 3.55, 3.85, 3.95, 4.05, 4.2, 4.35, 4.35, 4.35),
}
CONTEXTS = ("dirt_fast", "dirt_muddy", "turf_good")


@dataclass(frozen=True)
class StadiumSpec:
    straight: float = 800.0
    radius: float = 100.0
    width: float = 30.0
    finish_into_home: float = 600.0
    race_distance: float = 1609.34
    rotation: float = 0.4
    origin: GeoPoint = SYNTH_ORIGIN
    spacing: float = 1.0

    @property
    def start_x(self) -> float:
        """Start gate position on the top straight so the finish falls at ``race_distance``."""
        top = self.race_distance - math.pi * self.radius - self.finish_into_home
        if not 0 < top <= self.straight:
            raise ValueError("race distance does not fit the stadium layout")
        return top


def _stadium(spec: StadiumSpec, radius: float) -> np.ndarray:
    """Counter-clockwise loop starting at the west end of the bottom straight."""
    S, h = spec.straight, spec.spacing
    pts = []
    n = max(int(S / h), 1)
    pts += [(S * k / n, -radius) for k in range(n)]
    m = max(int(math.pi * radius / h), 8)
    pts += [(S + radius * math.sin(math.pi * k / m), -radius * math.cos(math.pi * k / m)) for k in range(m)]
    pts += [(S - S * k / n, radius) for k in range(n)]
    pts += [(-radius * math.sin(math.pi * k / m), radius * math.cos(math.pi * k / m)) for k in range(m)]
    return np.array(pts)


def synthetic_outlines(spec: StadiumSpec = StadiumSpec()) -> tuple[dict, GeoPoint]:
    """Geographic ``inner``/``outer``/``finish`` outlines and the start gate."""
    R, W = spec.radius, spec.width
    inner = _stadium(spec, R)
    outer = _stadium(spec, R + W)
    finish = np.array([[spec.finish_into_home, -R], [spec.finish_into_home, -(R + W)]])
    start = np.array([spec.start_x, R])
    c, s = math.cos(spec.rotation), math.sin(spec.rotation)
    rot = np.array([[c, -s], [s, c]])

    def geo(xy):
        xy = np.atleast_2d(xy) @ rot.T
        lat, lon = plane_to_geo(xy[:, 0], xy[:, 1], spec.origin)
        return np.column_stack([lat, lon])

    g = geo(start)[0]
    return {"inner": geo(inner), "outer": geo(outer), "finish": geo(finish)}, GeoPoint(float(g[0]), float(g[1]))


def synthetic_track(spec: StadiumSpec = StadiumSpec(), track_id: str = "SYN") -> TrackModel:
    outlines, start = synthetic_outlines(spec)
    return build_track_from_geo(outlines, start, race_distance=spec.race_distance, track_id=track_id)


# --------------------------------------------------------------------------
# true parameters


@dataclass
class SynthConfig:
    n_horses: int = 20
    n_jockeys: int = 10
    n_races: int = 30
    field_size: tuple[int, int] = (6, 8)
    sigma_f: float = 0.25
    sigma_l: float = 0.002
    beta_plm: float = 0.7
    horse_spread: float = 0.05
    jockey_spread: float = 0.2
    forward_psi: dict = field(default_factory=lambda: {"nearest_forward": 0.02, "is_drafting": 0.02,
                                                        "prop_energy_saved": 0.02})
    lateral_psi: dict = field(default_factory=lambda: {"is_turn": 0.008, "is_home_stretch": -0.006})
    context_effects: dict = field(default_factory=lambda: {"dirt_fast": 0.05, "dirt_muddy": -0.08, "turf_good": 0.03})
    lane_width: float = 1.0
    anomaly: bool = False
    seed: int = 0

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["field_size"] = list(self.field_size)
        return d

    @classmethod
    def from_dict(cls, d: dict | None) -> "SynthConfig":
        d = dict(d or {})
        if "field_size" in d:
            d["field_size"] = tuple(int(v) for v in d["field_size"])
        return cls(**d)


@dataclass
class SynthTruth:
    params: FittedParams
    archetype: dict[str, str]
    horse_ids: tuple[str, ...]
    jockey_ids: tuple[str, ...]


def _identity_std(names) -> Standardizer:
    return Standardizer(tuple(names), np.zeros(len(names)), np.ones(len(names)))


def truth_params(cfg: SynthConfig, std_f: Standardizer | None = None, std_l: Standardizer | None = None,
                 covariate_effects: bool = True) -> SynthTruth:
    """Known parameters for a synthetic field.

    Horses cycle through the three archetypes with small individual
    perturbations; jockey effects are evenly spread and centred on zero.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 7919]))
    horses = tuple(f"H{k + 1:02d}" for k in range(cfg.n_horses))
    jockeys = tuple(f"J{k + 1:02d}" for k in range(cfg.n_jockeys))
    names = list(ARCHETYPES)
    arche = {h: names[k % len(names)] for k, h in enumerate(horses)}
    theta = np.array([np.asarray(ARCHETYPES[arche[h]]) + rng.normal(0, cfg.horse_spread, 9) for h in horses])
    jeff = np.linspace(-cfg.jockey_spread, cfg.jockey_spread, cfg.n_jockeys) if cfg.n_jockeys > 1 else np.zeros(1)
    jeff = jeff[rng.permutation(cfg.n_jockeys)]
    ctx = np.array([cfg.context_effects.get(c, 0.0) for c in CONTEXTS])

    psi_f = np.array([cfg.forward_psi.get(c, 0.0) if covariate_effects else 0.0 for c in FORWARD_COLUMNS])
    psi_l = np.array([cfg.lateral_psi.get(c, 0.0) if covariate_effects else 0.0 for c in LATERAL_COLUMNS])
    lay_f = Layout.for_model("forward", len(horses), 9, len(jockeys), len(CONTEXTS), len(FORWARD_COLUMNS))
    lay_l = Layout.for_model("lateral", 0, 0, len(jockeys), len(CONTEXTS), len(LATERAL_COLUMNS))
    pf = lay_f.pack({"theta": theta, "mu": theta.mean(axis=0), "jockey": jeff, "context": ctx, "psi": psi_f,
                     "sigma": cfg.sigma_f})
    pl = lay_l.pack({"beta": cfg.beta_plm, "jockey": np.zeros(len(jockeys)), "context": np.zeros(len(CONTEXTS)),
                     "psi": psi_l, "sigma": cfg.sigma_l})

    def fit(kind, lay, p, std, names):
        return ModelFit(kind, lay, p, horses if kind == "forward" else (), jockeys, CONTEXTS, tuple(names),
                        std or _identity_std(names), kind == "forward", None, np.zeros(lay.size), {})

    params = FittedParams(fit("forward", lay_f, pf, std_f, FORWARD_COLUMNS),
                          fit("lateral", lay_l, pl, std_l, LATERAL_COLUMNS),
                          SplineSpec(), PriorConfig(), {}, 0.25, {"synthetic": True, "seed": cfg.seed})
    return SynthTruth(params, arche, horses, jockeys)


# --------------------------------------------------------------------------
# races


@dataclass
class RacePlan:
    race_id: str
    horses: tuple[str, ...]
    jockeys: tuple[str, ...]
    lanes: tuple[int, ...]
    context: str


def plan_races(cfg: SynthConfig, truth: SynthTruth) -> list[RacePlan]:
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 104729]))
    plans = []
    lo, hi = cfg.field_size
    for r in range(cfg.n_races):
        n = int(rng.integers(lo, hi + 1))
        n = min(n, len(truth.horse_ids))
        horses = tuple(sorted(str(h) for h in rng.choice(truth.horse_ids, size=n, replace=False)))
        jockeys = tuple(str(j) for j in rng.choice(truth.jockey_ids, size=n, replace=len(truth.jockey_ids) < n))
        lanes = tuple(int(v) for v in rng.permutation(n) + 1)
        ctx = CONTEXTS[int(rng.integers(len(CONTEXTS)))]
        plans.append(RacePlan(f"R{r + 1:03d}", horses, jockeys, lanes, ctx))
    return plans


def simulate_plans(plans: list[RacePlan], truth: SynthTruth, track: TrackModel, cfg: SynthConfig):
    """Trajectories ``(frames, competitors, 2)`` for each planned race, cut at each finish."""
    engine = Engine(track, truth.params)
    out = []
    for k, plan in enumerate(plans):
        start = RaceState.grid(plan.horses, plan.jockeys, plan.context,
                               lane_offsets(len(plan.horses), cfg.lane_width)[np.array(plan.lanes) - 1],
                               track.race_distance, truth.params.frame_period)
        _, _, _, traj = engine.run([start], cfg.seed, np.array([k]), trajectory=True)
        out.append(traj[0])
    return out


def trajectories_to_rows(plan: RacePlan, traj: np.ndarray, track: TrackModel, frame_period: float = 0.25) -> pd.DataFrame:
    """Tracking rows for one race; each competitor stops at its first frame past the line."""
    course, cond = plan.context.split("_")
    D = track.race_distance
    rows = []
    for h, horse in enumerate(plan.horses):
        F, L = traj[:, h, 0], traj[:, h, 1]
        past = np.flatnonzero(F >= D)
        last = int(past[0]) if past.size else len(F) - 1
        xy = track.to_plane(F[: last + 1], L[: last + 1], side=1.0)
        xy = track.rotation.invert(xy)
        lat, lon = plane_to_geo(xy[:, 0], xy[:, 1], track.origin)
        frames = np.arange(last + 1)
        rows.append(pd.DataFrame({
            "race_id": plan.race_id, "track_id": track.track_id, "course_type": course, "track_condition": cond,
            "frame": frames, "timestamp_s": np.round(frames * frame_period, 6), "horse_id": horse,
            "jockey_id": plan.jockeys[h], "starting_lane": plan.lanes[h], "latitude": lat, "longitude": lon,
        }))
    return pd.concat(rows, ignore_index=True)


def inject_freeze(rows: pd.DataFrame, race_id: str, horse_id: str, start: int, length: int) -> pd.DataFrame:
    """Freeze a competitor's reported position for ``length`` frames after ``start``.

    The position jumps back to the true track at frame ``start + length + 1``,
    producing a freeze-then-jump glitch. Detection reports it from the frame
    before ``start`` (the last one it can trust) to ``start + length + 1``.
    """
    out = rows.copy()
    sel = (out["race_id"] == race_id) & (out["horse_id"] == horse_id)
    mine = out[sel].set_index("frame")
    lat0, lon0 = mine.at[start, "latitude"], mine.at[start, "longitude"]
    frozen = sel & (out["frame"] > start) & (out["frame"] <= start + length)
    out.loc[frozen, "latitude"] = lat0
    out.loc[frozen, "longitude"] = lon0
    return out


@dataclass
class SynthData:
    track: TrackModel
    outlines: dict
    start_gate: GeoPoint
    truth: SynthTruth
    plans: list[RacePlan]
    trajectories: list[np.ndarray]
    tracking: pd.DataFrame
    anomalies: list[tuple[str, str, int, int]] = field(default_factory=list)


def pilot_standardizers(cfg: SynthConfig, track: TrackModel, n_races: int = 6):
    """Covariate means/scales from races simulated without covariate effects.

    The true parameters are stated on standardised covariates, like fitted
    ones, so the generator needs constants close to what a fit will see.
    """
    from .covariates import build_design_table  # local: avoids a cycle at import time

    pilot_cfg = SynthConfig.from_dict({**cfg.to_dict(), "n_races": n_races, "anomaly": False})
    truth = truth_params(pilot_cfg, covariate_effects=False)
    plans = plan_races(pilot_cfg, truth)
    trajs = simulate_plans(plans, truth, track, pilot_cfg)
    rows = build_design_table(_frames_from_trajectories(plans, trajs, track), {track.track_id: track})
    return (Standardizer.fit(rows[list(FORWARD_COLUMNS)].to_numpy(), FORWARD_COLUMNS),
            Standardizer.fit(rows[list(LATERAL_COLUMNS)].to_numpy(), LATERAL_COLUMNS))


def _frames_from_trajectories(plans, trajs, track) -> pd.DataFrame:
    """Track-frame table straight from simulated positions (no geographic round trip)."""
    parts = []
    D = track.race_distance
    for plan, traj in zip(plans, trajs):
        course, cond = plan.context.split("_")
        for h, horse in enumerate(plan.horses):
            F, L = traj[:, h, 0], traj[:, h, 1]
            past = np.flatnonzero(F >= D)
            last = int(past[0]) if past.size else len(F) - 1
            parts.append(pd.DataFrame({
                "race_id": plan.race_id, "track_id": track.track_id, "course_type": course,
                "track_condition": cond, "frame": np.arange(last + 1), "horse_id": horse,
                "jockey_id": plan.jockeys[h], "forward": F[: last + 1], "lateral": L[: last + 1],
            }))
    return pd.concat(parts, ignore_index=True).sort_values(["race_id", "frame", "horse_id"], kind="mergesort")


def generate(cfg: SynthConfig = SynthConfig(), spec: StadiumSpec = StadiumSpec()) -> SynthData:
    """Simulate a synthetic field of races on the synthetic track."""
    track = synthetic_track(spec)
    outlines, gate = synthetic_outlines(spec)
    std_f, std_l = pilot_standardizers(cfg, track)
    truth = truth_params(cfg, std_f, std_l)
    plans = plan_races(cfg, truth)
    trajs = simulate_plans(plans, truth, track, cfg)
    tracking = pd.concat([trajectories_to_rows(p, t, track) for p, t in zip(plans, trajs)], ignore_index=True)
    anomalies = []
    if cfg.anomaly:
        plan = plans[0]
        horse = plan.horses[0]
        tracking = inject_freeze(tracking, plan.race_id, horse, 10, 6)
        anomalies.append((plan.race_id, horse, 9, 17))
    tracking = tracking.sort_values(["race_id", "frame", "horse_id"], kind="mergesort").reset_index(drop=True)
    return SynthData(track, outlines, gate, truth, plans, trajs, tracking, anomalies)


def frames_from_trajectories(data: SynthData) -> pd.DataFrame:
    return _frames_from_trajectories(data.plans, data.trajectories, data.track)
