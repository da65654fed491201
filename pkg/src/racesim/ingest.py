"""Tracking-data ingestion, anomaly detection and gap imputation."""
from __future__ import annotations

import io
import logging
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import numpy as np
import pandas as pd

from .geometry import TrackModel, track_plane_coords

log = logging.getLogger(__name__)

TRACKING_COLUMNS = (
    "race_id",
    "track_id",
    "course_type",
    "track_condition",
    "frame",
    "timestamp_s",
    "horse_id",
    "jockey_id",
    "starting_lane",
    "latitude",
    "longitude",
)
ENRICHED_COLUMNS = TRACKING_COLUMNS + ("x", "y", "forward", "lateral", "imputed")

COURSE_TYPES = {"dirt": "dirt", "d": "dirt", "turf": "turf", "t": "turf"}
CONDITIONS = {
    "fast": "fast",
    "ft": "fast",
    "good": "good",
    "gd": "good",
    "sloppy": "sloppy",
    "sy": "sloppy",
    "muddy": "muddy",
    "my": "muddy",
}

DEFAULT_FRAME_PERIOD = 0.25


class SchemaError(ValueError):
    pass


class ImputationError(RuntimeError):
    pass


@dataclass
class RaceFrameTable:
    """Frame-level tracking rows, one per (race, frame, competitor).

    ``frames`` is sorted by ``(race_id, frame, horse_id)``. After
    :func:`prepare_tracking` it also carries planar ``x``/``y``, track
    ``forward``/``lateral`` and an ``imputed`` flag.
    """

    frames: pd.DataFrame
    frame_period: float = DEFAULT_FRAME_PERIOD

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def race_ids(self) -> list[str]:
        return list(pd.unique(self.frames["race_id"]))

    def race(self, race_id: str) -> "RaceFrameTable":
        sub = self.frames[self.frames["race_id"] == race_id]
        if sub.empty:
            raise KeyError(f"unknown race id '{race_id}'")
        return RaceFrameTable(sub.reset_index(drop=True), self.frame_period)

    def races(self) -> Iterator[tuple[str, "RaceFrameTable"]]:
        for rid, sub in self.frames.groupby("race_id", sort=True):
            yield str(rid), RaceFrameTable(sub.reset_index(drop=True), self.frame_period)

    def copy(self) -> "RaceFrameTable":
        return RaceFrameTable(self.frames.copy(), self.frame_period)

    def to_csv(self, path_or_buf=None, **kw):
        cols = [c for c in ENRICHED_COLUMNS if c in self.frames.columns]
        return self.frames[cols].to_csv(path_or_buf, index=False, float_format="%.10g", **kw)


@dataclass(frozen=True)
class AnomalySpan:
    race_id: str
    competitor: str
    start_frame: int
    end_frame: int
    kind: str  # "jump" (freeze then jump) or "frozen" (anchored at the first observed frame)

    def __post_init__(self):
        if not self.start_frame < self.end_frame:
            raise ValueError("anomaly span needs start_frame < end_frame")
        if self.kind not in ("frozen", "jump"):
            raise ValueError(f"unknown anomaly kind {self.kind!r}")


# --------------------------------------------------------------------------
# parsing


def _read(source) -> pd.DataFrame:
    if isinstance(source, pd.DataFrame):
        return source.copy()
    if isinstance(source, str) and "\n" in source:
        source = io.StringIO(source)
    # lines starting with '#' carry provenance (config digest, seed)
    return pd.read_csv(source, dtype=str, keep_default_na=False, comment="#")


def parse_tracking(source, frame_period: float | None = None) -> RaceFrameTable:
    """Parse and validate a tracking table (path, text, stream or DataFrame).

    Raises :class:`SchemaError` naming the offending data line (1-based,
    header excluded) for missing columns, unknown vocabulary, duplicate
    ``(race, horse, frame)`` cells, frame gaps and timestamps that do not
    increase with the frame number.
    """
    df = _read(source)
    df.columns = [c.strip() for c in df.columns]
    missing = [c for c in TRACKING_COLUMNS if c not in df.columns]
    if missing:
        raise SchemaError(f"missing required column(s): {', '.join(missing)}")
    extra = [c for c in ("x", "y", "forward", "lateral", "imputed") if c in df.columns]
    df = df[list(TRACKING_COLUMNS) + extra].copy()
    df["_line"] = np.arange(1, len(df) + 1)

    for col in ("race_id", "track_id", "horse_id", "jockey_id"):
        df[col] = df[col].astype(str).str.strip()
        bad = df[df[col] == ""]
        if len(bad):
            raise SchemaError(f"row {int(bad['_line'].iloc[0])}: empty {col}")

    def vocab(col, table):
        norm = df[col].astype(str).str.strip().str.lower().map(table)
        bad = df[norm.isna()]
        if len(bad):
            row = bad.iloc[0]
            raise SchemaError(f"row {int(row['_line'])}: unknown {col} value {row[col]!r}")
        df[col] = norm

    vocab("course_type", COURSE_TYPES)
    vocab("track_condition", CONDITIONS)

    for col, kind in (("frame", "int"), ("starting_lane", "int"), ("timestamp_s", "float"),
                      ("latitude", "float"), ("longitude", "float")) + tuple((c, "float") for c in extra if c != "imputed"):
        vals = pd.to_numeric(df[col], errors="coerce")
        bad = df[vals.isna() | ~np.isfinite(vals.astype(float))]
        if len(bad):
            row = bad.iloc[0]
            raise SchemaError(f"row {int(row['_line'])}: non-numeric {col} value {row[col]!r}")
        if kind == "int":
            if np.any(vals != np.floor(vals)):
                row = df[vals != np.floor(vals)].iloc[0]
                raise SchemaError(f"row {int(row['_line'])}: {col} must be an integer")
            df[col] = vals.astype(np.int64)
        else:
            df[col] = vals.astype(float)
    if "imputed" in extra:
        df["imputed"] = df["imputed"].astype(str).str.strip().str.lower().isin(("1", "true", "yes"))

    bad = df[(df["latitude"].abs() > 90) | (df["longitude"].abs() > 180)]
    if len(bad):
        raise SchemaError(f"row {int(bad['_line'].iloc[0])}: latitude/longitude out of range")

    dup = df.duplicated(["race_id", "horse_id", "frame"], keep="first")
    if dup.any():
        row = df[dup].iloc[0]
        raise SchemaError(
            f"row {int(row['_line'])}: duplicate frame {row['frame']} for horse {row['horse_id']} in race {row['race_id']}"
        )

    for key in ("track_id", "course_type", "track_condition"):
        n = df.groupby("race_id")[key].nunique()
        if (n > 1).any():
            rid = n[n > 1].index[0]
            row = df[df["race_id"] == rid].iloc[0]
            raise SchemaError(f"row {int(row['_line'])}: race {rid} has inconsistent {key}")

    df = df.sort_values(["race_id", "horse_id", "frame"], kind="mergesort")
    g = df.groupby(["race_id", "horse_id"], sort=False)
    step = g["frame"].diff()
    gap = step.notna() & (step != 1)
    if gap.any():
        row = df[gap].iloc[0]
        raise SchemaError(f"row {int(row['_line'])}: frame numbering jumps to {row['frame']} for horse {row['horse_id']}")
    dt = g["timestamp_s"].diff()
    back = dt.notna() & (dt <= 0)
    if back.any():
        row = df[back].iloc[0]
        raise SchemaError(f"row {int(row['_line'])}: timestamp does not increase with frame number")

    if frame_period is None:
        frame_period = float(dt.median()) if dt.notna().any() else DEFAULT_FRAME_PERIOD
        if not np.isfinite(frame_period) or frame_period <= 0:
            frame_period = DEFAULT_FRAME_PERIOD
    if frame_period <= 0:
        raise SchemaError("frame period must be positive")

    df = df.sort_values(["race_id", "frame", "horse_id"], kind="mergesort").drop(columns="_line")
    return RaceFrameTable(df.reset_index(drop=True), float(frame_period))


# --------------------------------------------------------------------------
# projection


def project_table(table: RaceFrameTable, tracks: dict[str, TrackModel]) -> RaceFrameTable:
    """Add planar ``x``/``y`` and track ``forward``/``lateral`` columns."""
    df = table.frames.copy()
    df["x"] = np.nan
    df["y"] = np.nan
    df["forward"] = np.nan
    df["lateral"] = np.nan
    for tid, idx in df.groupby("track_id").groups.items():
        if tid not in tracks:
            raise KeyError(f"no track outline for track '{tid}'")
        tr = tracks[tid]
        sub = df.loc[idx]
        xy = track_plane_coords(tr, sub["latitude"].to_numpy(), sub["longitude"].to_numpy())
        pos = tr.project(xy)
        df.loc[idx, "x"] = xy[:, 0]
        df.loc[idx, "y"] = xy[:, 1]
        df.loc[idx, "forward"] = pos[:, 0]
        df.loc[idx, "lateral"] = pos[:, 1]
    if "imputed" not in df.columns:
        df["imputed"] = False
    return RaceFrameTable(df, table.frame_period)


# --------------------------------------------------------------------------
# anomalies


def _pivot(race: pd.DataFrame, col: str) -> pd.DataFrame:
    return race.pivot(index="frame", columns="horse_id", values=col).sort_index()


def detect_anomalies(
    table: RaceFrameTable,
    freeze_eps: float = 0.05,
    v_max: float = 20.0,
    min_frozen: int = 2,
) -> list[AnomalySpan]:
    """Find freeze-then-jump tracking glitches.

    A glitch is a run of at least ``min_frozen`` consecutive per-frame
    displacements below ``freeze_eps`` metres followed by one displacement
    above ``v_max * frame_period``. The span runs from the last reliable
    frame before the frozen position to the first frame after the jump. When
    the frozen position is the competitor's first observation the span is
    anchored there (kind ``"frozen"``).
    """
    spans: list[AnomalySpan] = []
    jump = v_max * table.frame_period
    for rid, race in table.frames.groupby("race_id", sort=True):
        for hid, tr in race.groupby("horse_id", sort=True):
            tr = tr.sort_values("frame")
            frames = tr["frame"].to_numpy()
            F = tr["forward"].to_numpy(dtype=float)
            L = tr["lateral"].to_numpy(dtype=float)
            disp = np.hypot(np.diff(F), np.diff(L))  # disp[i]: frame i -> i+1
            i = 0
            while i < len(disp):
                if disp[i] >= freeze_eps:
                    i += 1
                    continue
                j = i
                while j < len(disp) and disp[j] < freeze_eps:
                    j += 1
                # positions at rows i..j are frozen; disp[j] is the move out of the freeze
                if j - i >= min_frozen and j < len(disp) and disp[j] > jump:
                    if i == 0:
                        spans.append(AnomalySpan(str(rid), str(hid), int(frames[0]), int(frames[j + 1]), "frozen"))
                    else:
                        spans.append(AnomalySpan(str(rid), str(hid), int(frames[i - 1]), int(frames[j + 1]), "jump"))
                i = j + 1
    return spans


def reliable_peers(table: RaceFrameTable, span: AnomalySpan, spans: Iterable[AnomalySpan] = ()) -> list[str]:
    """Competitors observed over all of ``[a, b]`` with no anomaly overlapping it."""
    race = table.frames[table.frames["race_id"] == span.race_id]
    need = set(range(span.start_frame, span.end_frame + 1))
    flagged = {
        s.competitor for s in spans
        if s.race_id == span.race_id and s.start_frame <= span.end_frame and s.end_frame >= span.start_frame
    }
    peers = []
    for hid, tr in race.groupby("horse_id", sort=True):
        hid = str(hid)
        if hid == span.competitor or hid in flagged:
            continue
        if need.issubset(set(tr["frame"].tolist())):
            peers.append(hid)
    return peers


def imputed_progress(start: float, end: float, peer_forward: np.ndarray) -> np.ndarray:
    """Interior positions ``start + D * mean peer proportion``.

    ``peer_forward`` has shape ``(frames a..b, peers)``; peers covering no
    distance are ignored.
    """
    P = np.asarray(peer_forward, dtype=float)
    total = P[-1] - P[0]
    ok = total > 0
    if not np.any(ok):
        raise ImputationError("no reliable competitor covered distance over the span")
    prop = (P[:, ok] - P[0, ok]) / total[ok]
    pbar = prop.mean(axis=1)
    return start + (end - start) * pbar


def impute_gap(
    table: RaceFrameTable,
    span: AnomalySpan,
    spans: Iterable[AnomalySpan] = (),
    guard_frames: int = 40,
) -> RaceFrameTable:
    """Replace the interior of ``span`` using peers' mean proportional progress.

    Forward progress over ``(a, b)`` follows the average share of the
    ``[a, b]`` distance that reliable peers had covered by each frame, so the
    endpoints and the mean speed over the span are preserved. Lateral
    positions are linearly interpolated. Returns a new table; interior rows
    get ``imputed = True``.
    """
    df = table.frames.copy()
    if "imputed" not in df.columns:
        df["imputed"] = False
    race = df[df["race_id"] == span.race_id]
    if race.empty:
        raise KeyError(f"unknown race id '{span.race_id}'")
    first = int(race["frame"].min())
    if span.end_frame - first > guard_frames:
        log.warning(
            "imputing %s in race %s beyond the first %d frames (frames %d-%d)",
            span.competitor, span.race_id, guard_frames, span.start_frame, span.end_frame,
        )
    peers = reliable_peers(RaceFrameTable(df, table.frame_period), span, spans)
    if not peers:
        raise ImputationError(
            f"no reliable competitor over frames {span.start_frame}-{span.end_frame} in race {span.race_id}"
        )
    fwd = _pivot(race, "forward").loc[span.start_frame:span.end_frame]
    me = (df["race_id"] == span.race_id) & (df["horse_id"] == span.competitor)
    mine = df[me].set_index("frame")
    a, b = span.start_frame, span.end_frame
    if a not in mine.index or b not in mine.index:
        raise ImputationError("span endpoints are not observed")
    Fa, Fb = float(mine.at[a, "forward"]), float(mine.at[b, "forward"])
    La, Lb = float(mine.at[a, "lateral"]), float(mine.at[b, "lateral"])
    path = imputed_progress(Fa, Fb, fwd[peers].to_numpy())
    frames = np.arange(a, b + 1)
    lat = La + (Lb - La) * (frames - a) / (b - a)
    for k, f in enumerate(frames[1:-1], start=1):
        sel = me & (df["frame"] == f)
        if sel.any():
            df.loc[sel, "forward"] = path[k]
            df.loc[sel, "lateral"] = lat[k]
            df.loc[sel, "imputed"] = True
    return RaceFrameTable(df, table.frame_period)


@dataclass
class PreparationReport:
    n_races: int = 0
    n_competitors: int = 0
    spans: list[AnomalySpan] = field(default_factory=list)
    failed: list[tuple[AnomalySpan, str]] = field(default_factory=list)

    @property
    def n_imputed_competitors(self) -> int:
        done = {(s.race_id, s.competitor) for s in self.spans} - {(s.race_id, s.competitor) for s, _ in self.failed}
        return len(done)

    @property
    def imputed_fraction(self) -> float:
        return self.n_imputed_competitors / self.n_competitors if self.n_competitors else 0.0

    def to_dict(self) -> dict:
        return {
            "n_races": self.n_races,
            "n_competitors": self.n_competitors,
            "n_spans": len(self.spans),
            "n_imputed_competitors": self.n_imputed_competitors,
            "imputed_fraction": self.imputed_fraction,
            "spans": [
                {"race_id": s.race_id, "competitor": s.competitor, "start_frame": s.start_frame,
                 "end_frame": s.end_frame, "kind": s.kind, "method": "peer-proportional"}
                for s in self.spans
            ],
            "failed": [{"race_id": s.race_id, "competitor": s.competitor, "error": e} for s, e in self.failed],
        }


def prepare_tracking(
    table: RaceFrameTable,
    tracks: dict[str, TrackModel],
    freeze_eps: float = 0.05,
    v_max: float = 20.0,
    guard_frames: int = 40,
) -> tuple[RaceFrameTable, PreparationReport]:
    """Project onto the tracks, detect glitches and impute them."""
    out = project_table(table, tracks) if "forward" not in table.frames.columns else table.copy()
    spans = detect_anomalies(out, freeze_eps=freeze_eps, v_max=v_max)
    report = PreparationReport(
        n_races=out.frames["race_id"].nunique(),
        n_competitors=int(out.frames.groupby(["race_id", "horse_id"]).ngroups),
        spans=spans,
    )
    for s in spans:
        try:
            out = impute_gap(out, s, spans, guard_frames=guard_frames)
        except ImputationError as exc:
            log.warning("%s", exc)
            report.failed.append((s, str(exc)))
    return out, report
