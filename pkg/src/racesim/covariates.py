"""Per-frame dynamic covariates for the forward and lateral movement models.

The vectorised core (:func:`spatial_block`) works on arrays of shape
``(..., n)`` -- frames of one race during data preparation, or parameter draws
during simulation -- so both paths compute covariates identically.
"""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Mapping

import numpy as np
import pandas as pd

from .drafting import DragTable, drag_coefficient, drag_force, prop_saved
from .geometry import RAIL_SPACING_M, Segment, TrackModel, TrackPosition

DISTANCE_CAP_M = 50.0
HOME_STRETCH_WINDOW_M = 10.0

SPATIAL_COLUMNS = (
    "n_horses_inside",
    "n_horses_outside",
    "n_horses_forward",
    "n_horses_backward",
    "nearest_inside",
    "nearest_outside",
    "nearest_inside_euclid",
    "nearest_outside_euclid",
    "nearest_forward",
)
SHARED_COLUMNS = SPATIAL_COLUMNS + ("is_drafting", "prop_energy_saved", "is_turn")
# lateral-model-only indicators; prev_lat_movement enters the lateral model
# through its own coefficient rather than the standardised design
LATERAL_ONLY_COLUMNS = ("is_home_stretch", "turn_to_home_stretch")
FORWARD_COLUMNS = SHARED_COLUMNS
LATERAL_COLUMNS = SHARED_COLUMNS + LATERAL_ONLY_COLUMNS


class AssemblyError(ValueError):
    pass


def spatial_block(forward, lateral, active=None, cap: float = DISTANCE_CAP_M, drag: DragTable | None = None):
    """Spatial covariates for every competitor against the others in its frame.

    Parameters
    ----------
    forward, lateral : array_like, shape (..., n)
        Track positions; the last axis indexes competitors.
    active : array_like of bool, optional
        Competitors taking part in the frame (present and unfinished).
        Inactive competitors neither count nor receive meaningful values.
    drag : DragTable, optional
        When given, also returns ``c_d`` and ``is_drafting`` relative to the
        nearest (Euclidean) competitor strictly ahead.

    Returns
    -------
    dict of ndarray, each shape (..., n)
    """
    F = np.asarray(forward, dtype=float)
    L = np.asarray(lateral, dtype=float)
    if active is None:
        active = np.isfinite(F) & np.isfinite(L)
    active = np.asarray(active, dtype=bool)
    n = F.shape[-1]
    Fs = np.where(active, F, 0.0)
    Ls = np.where(active, L, 0.0)
    dF = Fs[..., None, :] - Fs[..., :, None]  # [..., self, other]
    dL = Ls[..., None, :] - Ls[..., :, None]
    pair = active[..., :, None] & active[..., None, :] & ~np.eye(n, dtype=bool)
    ahead = pair & (dF > 0)
    behind = pair & (dF < 0)
    inside = pair & (dL < 0)
    outside = pair & (dL > 0)
    euclid = np.hypot(dF, dL)
    absdl = np.abs(dL)

    def nearest(mask, dist):
        return np.minimum(np.where(mask, dist, np.inf).min(axis=-1), cap)

    out = {
        "n_horses_inside": inside.sum(-1).astype(float),
        "n_horses_outside": outside.sum(-1).astype(float),
        "n_horses_forward": ahead.sum(-1).astype(float),
        "n_horses_backward": behind.sum(-1).astype(float),
        "nearest_inside": nearest(inside, absdl),
        "nearest_outside": nearest(outside, absdl),
        "nearest_inside_euclid": nearest(inside, euclid),
        "nearest_outside_euclid": nearest(outside, euclid),
        "nearest_forward": nearest(ahead, dF),
    }
    if drag is not None:
        dist = np.where(ahead, euclid, np.inf)
        lead = dist.argmin(axis=-1)
        has_lead = np.isfinite(np.take_along_axis(dist, lead[..., None], -1)[..., 0])
        rel_behind = np.take_along_axis(dF, lead[..., None], -1)[..., 0]
        rel_lateral = -np.take_along_axis(dL, lead[..., None], -1)[..., 0]
        cd = drag_coefficient(np.where(has_lead, rel_behind, np.nan), rel_lateral, drag)
        cd = np.asarray(cd, dtype=float)
        out["c_d"] = cd
        out["is_drafting"] = (cd < drag.clean_air).astype(float)
    return out


def spatial_covariates(positions: Mapping[str, TrackPosition], me: str, cap: float = DISTANCE_CAP_M) -> dict:
    """Spatial covariates of competitor ``me`` given everyone's position."""
    ids = list(positions)
    if me not in positions:
        raise KeyError(me)
    F = np.array([positions[k][0] for k in ids], dtype=float)
    L = np.array([positions[k][1] for k in ids], dtype=float)
    block = spatial_block(F, L, cap=cap)
    i = ids.index(me)
    return {k: float(v[i]) for k, v in block.items()}


@dataclass(frozen=True)
class SegmentLookup:
    """Rail labels plus the start of the home stretch that follows a turn."""

    labels: np.ndarray
    home_start: float | None

    @classmethod
    def from_track(cls, track: TrackModel) -> "SegmentLookup":
        labels = np.asarray(track.segment_labels)
        home = np.flatnonzero(labels == Segment.HOME_STRETCH)
        start = None
        if home.size:
            k = int(home[0])
            if k > 0 and labels[k - 1] in (Segment.LEFT_TURN, Segment.RIGHT_TURN):
                start = k * RAIL_SPACING_M
        return cls(labels, start)

    def indicators(self, forward, clip: bool = False) -> dict:
        s = np.asarray(forward, dtype=float)
        hi = (len(self.labels) - 1) * RAIL_SPACING_M
        if clip:
            s = np.clip(np.nan_to_num(s, nan=0.0), 0.0, hi)
        elif np.any(s < -1e-9) or np.any(s > hi + 1e-9):
            raise ValueError(f"forward position outside the rail range [0, {hi:.1f}]")
        idx = np.clip(np.rint(s / RAIL_SPACING_M).astype(int), 0, len(self.labels) - 1)
        lab = self.labels[idx]
        is_turn = (lab == Segment.LEFT_TURN) | (lab == Segment.RIGHT_TURN)
        is_home = lab == Segment.HOME_STRETCH
        if self.home_start is None:
            t2h = np.zeros_like(is_home)
        else:
            t2h = is_home & (s >= self.home_start - 1e-9) & (s < self.home_start + HOME_STRETCH_WINDOW_M)
        return {
            "is_turn": is_turn.astype(float),
            "is_home_stretch": is_home.astype(float),
            "turn_to_home_stretch": t2h.astype(float),
        }


def segment_indicators(pos: TrackPosition, track: TrackModel) -> dict:
    return {k: float(v) for k, v in SegmentLookup.from_track(track).indicators(pos[0]).items()}


@dataclass(frozen=True)
class DesignRow:
    n_horses_inside: float
    n_horses_outside: float
    n_horses_forward: float
    n_horses_backward: float
    nearest_inside: float
    nearest_outside: float
    nearest_inside_euclid: float
    nearest_outside_euclid: float
    nearest_forward: float
    prev_lat_movement: float
    is_drafting: float
    prop_energy_saved: float
    is_turn: float
    is_home_stretch: float
    turn_to_home_stretch: float
    race_context: str
    jockey_id: str
    horse_id: str
    cumulative_forward: float

    def forward_features(self) -> dict:
        return {k: getattr(self, k) for k in FORWARD_COLUMNS}

    def lateral_features(self) -> dict:
        return {k: getattr(self, k) for k in LATERAL_COLUMNS}


def assemble_design_row(spatial: Mapping, segments: Mapping, ledger, metadata: Mapping, prev_lat_movement=None) -> DesignRow:
    """Merge partial covariates into a :class:`DesignRow`.

    ``ledger`` is an :class:`~racesim.drafting.EnergyLedger` (or mapping with
    ``is_drafting`` and ``prop_energy_saved``). ``prev_lat_movement`` of
    ``None`` marks the first frame and becomes 0.
    """
    merged: dict = {}
    merged.update(spatial)
    merged.update(segments)
    if ledger is not None:
        if isinstance(ledger, Mapping):
            merged.update({k: ledger[k] for k in ("is_drafting", "prop_energy_saved") if k in ledger})
        else:
            merged["is_drafting"] = float(ledger.is_drafting)
            merged["prop_energy_saved"] = float(ledger.prop_energy_saved)
    merged.update(metadata)
    merged["prev_lat_movement"] = 0.0 if prev_lat_movement is None else float(prev_lat_movement)
    values = {}
    for f in fields(DesignRow):
        if f.name not in merged:
            raise AssemblyError(f"missing design field '{f.name}'")
        v = merged[f.name]
        values[f.name] = v if f.name in ("race_context", "jockey_id", "horse_id") else float(v)
    return DesignRow(**values)


def race_context(course_type: str, condition: str) -> str:
    return f"{course_type}_{condition}"


# --------------------------------------------------------------------------
# training tables


def race_arrays(race: pd.DataFrame) -> dict:
    """Pivot one race's frames into ``(frames, competitors)`` arrays.

    Absent observations are NaN in ``forward``/``lateral``.
    """
    frames = np.sort(race["frame"].unique())
    horses = tuple(sorted(race["horse_id"].astype(str).unique()))
    fi = np.searchsorted(frames, race["frame"].to_numpy())
    hi = np.searchsorted(np.array(horses), race["horse_id"].astype(str).to_numpy())
    F = np.full((len(frames), len(horses)), np.nan)
    L = np.full_like(F, np.nan)
    F[fi, hi] = race["forward"].to_numpy(dtype=float)
    L[fi, hi] = race["lateral"].to_numpy(dtype=float)
    meta = race.drop_duplicates("horse_id").set_index(race.drop_duplicates("horse_id")["horse_id"].astype(str))
    return {
        "frames": frames,
        "horses": horses,
        "forward": F,
        "lateral": L,
        "jockeys": tuple(str(meta.at[h, "jockey_id"]) for h in horses),
        "context": race_context(str(race["course_type"].iloc[0]), str(race["track_condition"].iloc[0])),
        "track_id": str(race["track_id"].iloc[0]),
    }


def replay_covariates(forward, lateral, race_distance: float, segments: SegmentLookup, drag: DragTable,
                      frame_period: float, cap: float = DISTANCE_CAP_M) -> dict:
    """Covariates at every frame of an observed race.

    Arrays are ``(frames, competitors)``. Competitors count in a frame when
    observed and not yet past ``race_distance``. Energy ledgers at frame
    ``i`` accumulate the movements before ``i``, each charged at the drag
    coefficient of the frame it started from; ``prev_lat_movement`` is the
    lateral movement into frame ``i``.
    """
    F = np.asarray(forward, dtype=float)
    L = np.asarray(lateral, dtype=float)
    observed = np.isfinite(F) & np.isfinite(L)
    active = observed & (np.where(observed, F, 0.0) < race_distance)
    out = spatial_block(F, L, active=active, cap=cap, drag=drag)
    out.update(segments.indicators(np.where(observed, F, 0.0), clip=True))
    T = F.shape[0]
    dF = np.diff(F, axis=0)
    dL = np.diff(L, axis=0)
    s = np.hypot(dF, dL)
    moving = active[:-1] & observed[1:]
    s = np.where(moving, s, 0.0)
    v = s / frame_period
    act = np.zeros_like(F)
    clean = np.zeros_like(F)
    act[1:] = np.cumsum(drag_force(v, out["c_d"][:-1], drag) * s, axis=0)
    clean[1:] = np.cumsum(drag_force(v, drag.clean_air, drag) * s, axis=0)
    out["prop_energy_saved"] = prop_saved(act, clean)
    out["energy_actual"] = act
    out["energy_clean"] = clean
    plm = np.zeros_like(F)
    plm[1:] = np.where(observed[1:] & observed[:-1], dL, 0.0)
    out["prev_lat_movement"] = plm
    out["active"] = active
    out["observed"] = observed
    return out


def build_design_table(frames: pd.DataFrame, tracks: Mapping[str, TrackModel], drag: DragTable | None = None,
                       frame_period: float = 0.25) -> pd.DataFrame:
    """Model rows from prepared tracking frames.

    Each row holds the covariates at frame ``i`` and the movement
    ``i -> i + 1`` (``d_forward``, ``d_lateral``). Rows exist only where the
    competitor is still racing at ``i`` and observed at ``i + 1``.
    """
    drag = drag or DragTable()
    parts = []
    for rid, race in frames.groupby("race_id", sort=True):
        arr = race_arrays(race)
        track = tracks[arr["track_id"]]
        cov = replay_covariates(arr["forward"], arr["lateral"], track.race_distance,
                                SegmentLookup.from_track(track), drag, frame_period)
        F, L = arr["forward"], arr["lateral"]
        ok = cov["active"][:-1] & cov["observed"][1:]
        ti, hi = np.nonzero(ok)
        if ti.size == 0:
            continue
        row = {
            "race_id": str(rid),
            "frame": arr["frames"][ti],
            "horse_id": np.array(arr["horses"])[hi],
            "jockey_id": np.array(arr["jockeys"])[hi],
            "race_context": arr["context"],
            "cumulative_forward": F[ti, hi],
            "lateral": L[ti, hi],
        }
        for c in SPATIAL_COLUMNS + ("is_drafting", "prop_energy_saved", "prev_lat_movement") + \
                ("is_turn",) + LATERAL_ONLY_COLUMNS:
            row[c] = cov[c][ti, hi]
        row["d_forward"] = F[ti + 1, hi] - F[ti, hi]
        row["d_lateral"] = L[ti + 1, hi] - L[ti, hi]
        parts.append(pd.DataFrame(row))
    if not parts:
        raise AssemblyError("no usable frames to build model rows from")
    return pd.concat(parts, ignore_index=True)
