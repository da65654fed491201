"""Track geometry: geographic to planar conversion, rail indexing and projection.

Competitor positions are expressed in a track-relative frame: ``forward`` is the
arclength of the closest inside-rail sample and ``lateral`` the distance to it.
The rail is sampled every 0.1 m, so forward positions are quantised to 10 cm.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Sequence

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree

EARTH_RADIUS_M = 6_371_000.0
RAIL_SPACING_M = 0.1


class GeometryError(ValueError):
    """Degenerate or inconsistent track geometry."""


class InvalidCoordinateError(ValueError):
    pass


class TrackConfigError(ValueError):
    pass


class GeoPoint(NamedTuple):
    latitude: float
    longitude: float

    def validate(self) -> "GeoPoint":
        lat, lon = float(self.latitude), float(self.longitude)
        if not (math.isfinite(lat) and math.isfinite(lon)):
            raise InvalidCoordinateError(f"non-finite coordinate {self!r}")
        if not (-90.0 <= lat <= 90.0 and -180.0 <= lon <= 180.0):
            raise InvalidCoordinateError(f"coordinate out of range {self!r}")
        return self


class PlanarPoint(NamedTuple):
    x: float
    y: float


class TrackPosition(NamedTuple):
    forward: float
    lateral: float


class Segment(enum.IntEnum):
    CHUTE = 0
    LEFT_TURN = 1
    RIGHT_TURN = 2
    STRETCH = 3
    HOME_STRETCH = 4


# --------------------------------------------------------------------------
# geographic <-> planar


def _haversine(lat1, lon1, lat2, lon2):
    """Great-circle distance in metres; inputs in radians, broadcastable."""
    a = np.sin((lat2 - lat1) / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_M * np.arcsin(np.sqrt(np.clip(a, 0.0, 1.0)))


def geo_to_plane(lat, lon, origin: GeoPoint):
    """East/north displacement (metres) of ``(lat, lon)`` from ``origin``.

    Each axis is a haversine distance: north along the origin meridian, east
    along the mid-latitude parallel. Over a few kilometres the discrepancy with
    a true local tangent plane stays well under 0.1 m.

    Accepts scalars or arrays; returns ``(x, y)`` with the same shape.
    """
    lat = np.asarray(lat, dtype=float)
    lon = np.asarray(lon, dtype=float)
    origin = GeoPoint(*origin).validate()
    if not (np.all(np.isfinite(lat)) and np.all(np.isfinite(lon))):
        raise InvalidCoordinateError("non-finite latitude/longitude")
    if np.any(np.abs(lat) > 90.0) or np.any(np.abs(lon) > 180.0):
        raise InvalidCoordinateError("latitude/longitude out of range")
    phi0, lam0 = math.radians(origin.latitude), math.radians(origin.longitude)
    phi, lam = np.radians(lat), np.radians(lon)
    phim = 0.5 * (phi + phi0)
    y = np.sign(phi - phi0) * _haversine(phi0, lam0, phi, lam0)
    x = np.sign(lam - lam0) * _haversine(phim, lam0, phim, lam)
    if x.ndim == 0:
        return float(x), float(y)
    return x, y


def plane_to_geo(x, y, origin: GeoPoint):
    """Exact inverse of :func:`geo_to_plane`."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    phi0, lam0 = math.radians(origin[0]), math.radians(origin[1])
    phi = phi0 + y / EARTH_RADIUS_M
    phim = 0.5 * (phi + phi0)
    half = np.sin(np.abs(x) / (2.0 * EARTH_RADIUS_M)) / np.cos(phim)
    dlam = np.sign(x) * 2.0 * np.arcsin(np.clip(half, -1.0, 1.0))
    lat, lon = np.degrees(phi), np.degrees(lam0 + dlam)
    if lat.ndim == 0:
        return float(lat), float(lon)
    return lat, lon


# --------------------------------------------------------------------------
# orientation


@dataclass(frozen=True)
class Rotation:
    """Rigid rotation by ``angle`` radians about ``centre``."""

    angle: float
    centre: tuple[float, float] = (0.0, 0.0)

    def apply(self, xy) -> np.ndarray:
        xy = np.asarray(xy, dtype=float)
        c, s = math.cos(self.angle), math.sin(self.angle)
        d = xy - np.asarray(self.centre)
        out = np.empty_like(d)
        out[..., 0] = c * d[..., 0] - s * d[..., 1]
        out[..., 1] = s * d[..., 0] + c * d[..., 1]
        return out + np.asarray(self.centre)

    def invert(self, xy) -> np.ndarray:
        return Rotation(-self.angle, self.centre).apply(xy)


def _boundary_covariance(xy: np.ndarray) -> np.ndarray:
    """Second central moment of the closed polyline, per unit arclength.

    Each edge is integrated exactly, so the result does not depend on how
    densely the outline is sampled.
    """
    p = xy
    q = np.roll(xy, -1, axis=0)
    w = np.hypot(*(q - p).T)
    total = w.sum()
    if total <= 0:
        raise GeometryError("outline is degenerate (zero spread)")
    mean = (w[:, None] * (p + q) / 2.0).sum(axis=0) / total
    p = p - mean
    q = q - mean
    second = (np.einsum("n,ni,nj->ij", w, p, p) + np.einsum("n,ni,nj->ij", w, q, q)) / 3.0
    second += (np.einsum("n,ni,nj->ij", w, p, q) + np.einsum("n,ni,nj->ij", w, q, p)) / 6.0
    return second / total


def normalize_orientation(outline) -> tuple[np.ndarray, Rotation]:
    """Rotate ``outline`` about its centroid so its longest axis is horizontal.

    The axis is the leading principal component of the outline integrated
    along its arclength, so uneven vertex density does not bias it. The returned
    angle lies in ``(-pi/2, pi/2]``; apply the same :class:`Rotation` to
    competitor points.
    """
    xy = np.asarray(outline, dtype=float)
    if xy.ndim != 2 or xy.shape[0] < 3 or xy.shape[1] != 2:
        raise GeometryError("outline needs at least 3 points")
    if not np.all(np.isfinite(xy)):
        raise GeometryError("outline contains non-finite points")
    cov = _boundary_covariance(xy)
    evals, evecs = np.linalg.eigh(cov)
    if evals[-1] <= 1e-18 or evals[0] <= 1e-12 * evals[-1] or not np.all(np.isfinite(evals)):
        raise GeometryError("outline is degenerate (zero spread or collinear)")
    major = evecs[:, -1]
    theta = math.atan2(major[1], major[0])
    angle = -theta
    # fold into (-pi/2, pi/2]
    angle = (angle + math.pi / 2.0) % math.pi - math.pi / 2.0
    if math.isclose(angle, -math.pi / 2.0, abs_tol=1e-15):
        angle = math.pi / 2.0
    if abs(angle) < 1e-12:
        angle = 0.0
    centre = tuple(xy.mean(axis=0))
    rot = Rotation(angle, centre)
    return rot.apply(xy), rot


# --------------------------------------------------------------------------
# rail index


@dataclass
class TrackModel:
    """Planar track with an inside rail sampled every 0.1 m from the start gate.

    ``rail_xy[k]`` sits at arclength ``k * 0.1`` along the inner outline in the
    race direction; ``segment_labels[k]`` is a :class:`Segment` code.
    """

    inner_outline: np.ndarray
    outer_outline: np.ndarray
    finish_line: np.ndarray
    rail_xy: np.ndarray
    race_distance: float = 1609.34
    segment_labels: np.ndarray | None = None
    track_id: str = ""
    origin: GeoPoint | None = None
    rotation: Rotation = field(default_factory=lambda: Rotation(0.0))
    chutes: tuple[tuple[float, float], ...] = ()
    _tree: cKDTree | None = field(default=None, repr=False, compare=False)

    @property
    def rail_s(self) -> np.ndarray:
        return np.arange(len(self.rail_xy)) * RAIL_SPACING_M

    @property
    def rail_length(self) -> float:
        return (len(self.rail_xy) - 1) * RAIL_SPACING_M

    @property
    def tree(self) -> cKDTree:
        if self._tree is None:
            if len(self.rail_xy) == 0:
                raise GeometryError("empty rail")
            self._tree = cKDTree(self.rail_xy)
        return self._tree

    def finish_arclength(self) -> float:
        ends = self.project(self.finish_line)
        return float(ends[np.argmin(ends[:, 1]), 0])

    def label_at(self, forward) -> np.ndarray:
        if self.segment_labels is None:
            raise GeometryError("segment labels not built")
        idx = rail_index_of(forward, len(self.rail_xy))
        return self.segment_labels[idx]

    def project(self, xy) -> np.ndarray:
        """Vectorised :func:`project_to_track`; returns an ``(n, 2)`` array."""
        return _project_many(np.atleast_2d(np.asarray(xy, dtype=float)), self)

    def to_plane(self, forward, lateral, side: float = 1.0) -> np.ndarray:
        """Planar point ``lateral`` metres off the rail at ``forward``.

        ``side=+1`` offsets to the right of the race direction, which is the
        outside of a counter-clockwise track; use ``-1`` for clockwise tracks.
        """
        s = np.asarray(forward, dtype=float)
        k = np.clip(np.rint(s / RAIL_SPACING_M).astype(int), 0, len(self.rail_xy) - 1)
        tangent = np.gradient(self.rail_xy, axis=0)
        tangent /= np.linalg.norm(tangent, axis=1, keepdims=True)
        normal = np.column_stack([tangent[:, 1], -tangent[:, 0]]) * side
        return self.rail_xy[k] + np.asarray(lateral, dtype=float)[..., None] * normal[k]


def rail_index_of(forward, n_samples: int) -> np.ndarray:
    s = np.asarray(forward, dtype=float)
    if np.any(s < -1e-9) or np.any(s > (n_samples - 1) * RAIL_SPACING_M + 1e-9):
        raise ValueError("forward position outside the rail range")
    return np.clip(np.rint(s / RAIL_SPACING_M).astype(int), 0, n_samples - 1)


def sample_rail(polyline, spacing: float = RAIL_SPACING_M) -> np.ndarray:
    """Points at arclength ``0, spacing, 2*spacing, ...`` along ``polyline``."""
    pts = np.asarray(polyline, dtype=float)
    seg = np.hypot(*np.diff(pts, axis=0).T)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    n = int(math.floor(s[-1] / spacing + 1e-9)) + 1
    t = np.arange(n) * spacing
    return np.column_stack([np.interp(t, s, pts[:, 0]), np.interp(t, s, pts[:, 1])])


def rail_from_outline(inner, start, closed: bool = True, tail_margin: float = 50.0) -> np.ndarray:
    """Inner-outline polyline beginning at the point closest to ``start``.

    The outline order defines the race direction. A closed outline is
    unrolled once and stops ``tail_margin`` metres short of the start gate, so
    competitors standing just behind the gate still project near arclength 0.
    """
    pts = np.asarray(inner, dtype=float)
    loop = np.vstack([pts, pts[:1]]) if closed else pts
    a, b = loop[:-1], loop[1:]
    d = b - a
    denom = np.einsum("ij,ij->i", d, d)
    t = np.clip(np.einsum("ij,ij->i", np.asarray(start) - a, d) / np.where(denom > 0, denom, 1.0), 0.0, 1.0)
    foot = a + t[:, None] * d
    k = int(np.argmin(np.hypot(*(foot - start).T)))
    p0 = foot[k]
    if not closed:
        return np.vstack([p0, loop[k + 1:]])
    path = np.vstack([p0, loop[k + 1:-1], loop[:k + 1], p0])
    seg = np.hypot(*np.diff(path, axis=0).T)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    end = s[-1] - tail_margin
    if end <= 0:
        raise GeometryError("outline shorter than the rail tail margin")
    keep = s < end
    tail = np.array([np.interp(end, s, path[:, 0]), np.interp(end, s, path[:, 1])])
    return np.vstack([path[keep], tail])


def _project_many(xy: np.ndarray, track: TrackModel) -> np.ndarray:
    if len(track.rail_xy) == 0:
        raise GeometryError("empty rail")
    k = min(4, len(track.rail_xy))
    dist, idx = track.tree.query(xy, k=k)
    dist = np.atleast_2d(dist).reshape(len(xy), k)
    idx = np.atleast_2d(idx).reshape(len(xy), k)
    tied = dist <= dist[:, :1] + 1e-9
    best = np.where(tied, idx, np.iinfo(np.int64).max).min(axis=1)
    # lateral is measured to the rail polyline on either side of the sample,
    # so it does not pick up the 0.1 m quantisation of forward
    rail = track.rail_xy
    last = len(rail) - 1
    lateral = np.hypot(*(xy - rail[best]).T)
    for a, b in ((best - 1, best), (best, best + 1)):
        ok = (a >= 0) & (b <= last)
        a = np.clip(a, 0, last)
        b = np.clip(b, 0, last)
        seg = rail[b] - rail[a]
        den = np.einsum("ij,ij->i", seg, seg)
        t = np.clip(np.einsum("ij,ij->i", xy - rail[a], seg) / np.where(den > 0, den, 1.0), 0.0, 1.0)
        d = np.hypot(*(xy - rail[a] - t[:, None] * seg).T)
        lateral = np.where(ok & (den > 0), np.minimum(lateral, d), lateral)
    return np.column_stack([best * RAIL_SPACING_M, lateral])


def project_to_track(point, track: TrackModel) -> TrackPosition:
    """Forward is the arclength of the nearest rail sample (ties go to the
    smaller arclength); lateral is the distance to the rail line itself."""
    fwd, lat = _project_many(np.asarray(point, dtype=float).reshape(1, 2), track)[0]
    return TrackPosition(float(fwd), float(lat))


def motion_delta(prev: TrackPosition, cur: TrackPosition) -> tuple[float, float, float]:
    d_forward = cur[0] - prev[0]
    d_lateral = cur[1] - prev[1]
    return d_forward, d_lateral, math.hypot(d_forward, d_lateral)


# --------------------------------------------------------------------------
# segments


def turn_circles(inner: np.ndarray) -> tuple[float, float, float, float]:
    """``(radius, left_cx, right_cx, cy)`` of the turn-separating circles."""
    xmin, ymin = inner.min(axis=0)
    xmax, ymax = inner.max(axis=0)
    r = 0.5 * (ymax - ymin)
    if r <= 0:
        raise GeometryError("inner outline has no vertical extent")
    return r, xmin + r, xmax - r, 0.5 * (ymax + ymin)


def partition_segments(track: TrackModel, chutes: Iterable[Sequence[float]] | None = None) -> TrackModel:
    """Label every rail sample as chute, turn, stretch or home stretch.

    Samples left of the left circle's centre are ``LEFT_TURN`` and right of
    the mirrored circle's centre ``RIGHT_TURN``; configured chute ranges
    (arclength, inclusive) override; the stretch run holding the finish line
    becomes ``HOME_STRETCH``.
    """
    chutes = tuple(tuple(map(float, c)) for c in (track.chutes if chutes is None else chutes))
    _, cl, cr, _ = turn_circles(np.asarray(track.inner_outline))
    x = track.rail_xy[:, 0]
    labels = np.full(len(x), Segment.STRETCH, dtype=np.int8)
    labels[x < cl] = Segment.LEFT_TURN
    labels[x > cr] = Segment.RIGHT_TURN
    s = track.rail_s
    for a, b in chutes:
        if b < a:
            raise TrackConfigError(f"chute range [{a}, {b}] is reversed")
        labels[(s >= a - 1e-9) & (s <= b + 1e-9)] = Segment.CHUTE

    k = int(rail_index_of(track.finish_arclength(), len(s)))
    if labels[k] != Segment.STRETCH:
        raise TrackConfigError("finish line does not cross a stretch")
    lo = k
    while lo > 0 and labels[lo - 1] == Segment.STRETCH:
        lo -= 1
    hi = k
    while hi + 1 < len(labels) and labels[hi + 1] == Segment.STRETCH:
        hi += 1
    labels[lo:hi + 1] = Segment.HOME_STRETCH
    track.segment_labels = labels
    track.chutes = chutes
    return track


def build_track(
    inner,
    outer,
    finish,
    start,
    race_distance: float = 1609.34,
    chutes: Iterable[Sequence[float]] = (),
    closed: bool = True,
    track_id: str = "",
    origin: GeoPoint | None = None,
    rotation: Rotation | None = None,
) -> TrackModel:
    """Assemble a labelled :class:`TrackModel` from planar outlines."""
    inner = np.asarray(inner, dtype=float)
    rail = sample_rail(rail_from_outline(inner, np.asarray(start, dtype=float), closed=closed))
    track = TrackModel(
        inner_outline=inner,
        outer_outline=np.asarray(outer, dtype=float),
        finish_line=np.asarray(finish, dtype=float).reshape(2, 2),
        rail_xy=rail,
        race_distance=float(race_distance),
        track_id=track_id,
        origin=origin,
        rotation=rotation or Rotation(0.0),
    )
    return partition_segments(track, chutes)


def build_track_from_geo(outlines, start: GeoPoint, **kwargs) -> TrackModel:
    """Build a track from geographic outlines.

    ``outlines`` maps ``inner``/``outer``/``finish`` to ``(n, 2)`` arrays of
    ``(latitude, longitude)``. The planar origin is the mean inner-outline
    coordinate; the rotation making the stretches horizontal is stored on the
    track and must be applied to competitor points too (see
    :func:`track_plane_coords`).
    """
    inner_geo = np.asarray(outlines["inner"], dtype=float)
    origin = GeoPoint(float(inner_geo[:, 0].mean()), float(inner_geo[:, 1].mean()))

    def plane(a):
        a = np.asarray(a, dtype=float)
        return np.column_stack(geo_to_plane(a[:, 0], a[:, 1], origin))

    inner = plane(inner_geo)
    inner_rot, rot = normalize_orientation(inner)
    outer = rot.apply(plane(outlines["outer"]))
    finish = rot.apply(plane(outlines["finish"]))
    start_xy = rot.apply(np.array(geo_to_plane(start[0], start[1], origin)))
    return build_track(inner_rot, outer, finish, start_xy, origin=origin, rotation=rot, **kwargs)


def track_plane_coords(track: TrackModel, lat, lon) -> np.ndarray:
    """Competitor ``(lat, lon)`` arrays to the track's rotated planar frame."""
    if track.origin is None:
        raise GeometryError("track has no geographic origin")
    x, y = geo_to_plane(lat, lon, track.origin)
    return track.rotation.apply(np.column_stack([np.atleast_1d(x), np.atleast_1d(y)]))


# --------------------------------------------------------------------------
# outline files

OUTLINE_COLUMNS = ("boundary", "sequence", "latitude", "longitude")


def read_outline(path) -> dict[str, np.ndarray]:
    """Read an outline table of ``boundary, sequence, latitude, longitude`` rows.

    Returns ``{"inner", "outer", "finish"}`` arrays of ``(latitude, longitude)``
    ordered by ``sequence``.
    """
    df = pd.read_csv(path)
    missing = [c for c in OUTLINE_COLUMNS if c not in df.columns]
    if missing:
        raise TrackConfigError(f"{path}: missing outline column(s) {', '.join(missing)}")
    out = {}
    for name in ("inner", "outer", "finish"):
        sub = df[df["boundary"].astype(str).str.strip().str.lower() == name].sort_values("sequence")
        if sub.empty:
            raise TrackConfigError(f"{path}: no '{name}' boundary rows")
        out[name] = sub[["latitude", "longitude"]].to_numpy(dtype=float)
    if len(out["finish"]) != 2:
        raise TrackConfigError(f"{path}: the finish boundary needs exactly 2 points")
    for name, pts in out.items():
        for lat, lon in pts:
            GeoPoint(lat, lon).validate()
    return out


def write_outline(path, outlines: dict) -> None:
    rows = []
    for name in ("inner", "outer", "finish"):
        for k, (lat, lon) in enumerate(np.asarray(outlines[name], dtype=float)):
            rows.append(f"{name},{k},{lat:.10f},{lon:.10f}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(OUTLINE_COLUMNS) + "\n" + "\n".join(rows) + "\n")
