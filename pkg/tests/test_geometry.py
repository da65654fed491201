import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from racesim.geometry import (
    EARTH_RADIUS_M,
    GeoPoint,
    GeometryError,
    InvalidCoordinateError,
    Rotation,
    Segment,
    TrackConfigError,
    TrackModel,
    TrackPosition,
    build_track,
    geo_to_plane,
    motion_delta,
    normalize_orientation,
    plane_to_geo,
    project_to_track,
    read_outline,
    sample_rail,
    turn_circles,
    write_outline,
)
from racesim.synth import StadiumSpec, synthetic_outlines, synthetic_track


def rail_track(polyline):
    pts = np.asarray(polyline, dtype=float)
    return TrackModel(pts, pts, np.zeros((2, 2)), sample_rail(pts))


def stadium(S=400.0, R=50.0, step=0.5):
    top = [(x, R) for x in np.arange(S, 0, -step)]
    left = [(-R * math.sin(t), R * math.cos(t)) for t in np.arange(0, math.pi, step / R)]
    bottom = [(x, -R) for x in np.arange(0, S, step)]
    right = [(S + R * math.sin(t), -R * math.cos(t)) for t in np.arange(0, math.pi, step / R)]
    return np.array(top + left + bottom + right)


# geo_to_plane -------------------------------------------------------------

def test_geo_to_plane_identity():
    o = GeoPoint(40.0, -73.0)
    assert geo_to_plane(40.0, -73.0, o) == (0.0, 0.0)


def test_geo_to_plane_one_degree_north():
    x, y = geo_to_plane(41.0, -73.0, GeoPoint(40.0, -73.0))
    assert abs(y - EARTH_RADIUS_M * math.radians(1.0)) < 1.0
    assert abs(y - 111_195) < 1.0
    assert abs(x) < 1.0


def test_geo_to_plane_east():
    x, y = geo_to_plane(40.0, -72.99, GeoPoint(40.0, -73.0))
    assert abs(x - 851.7) < 1.0
    assert abs(y) < 1.0
    assert x > 0


def test_geo_to_plane_signs():
    o = GeoPoint(40.0, -73.0)
    x, y = geo_to_plane(39.99, -73.01, o)
    assert x < 0 and y < 0


def test_geo_to_plane_rejects_non_finite():
    with pytest.raises(InvalidCoordinateError):
        geo_to_plane(float("nan"), -73.0, GeoPoint(40.0, -73.0))
    with pytest.raises(InvalidCoordinateError):
        GeoPoint(95.0, 0.0).validate()


@settings(max_examples=60, deadline=None)
@given(st.floats(-1500, 1500), st.floats(-1500, 1500))
def test_plane_to_geo_inverts(x, y):
    o = GeoPoint(40.7, -73.7)
    lat, lon = plane_to_geo(x, y, o)
    x2, y2 = geo_to_plane(lat, lon, o)
    assert abs(x2 - x) < 1e-6 and abs(y2 - y) < 1e-6


# normalize_orientation ----------------------------------------------------

RECT = np.array([[0, 0], [100, 0], [100, 20], [0, 20]], dtype=float)


def test_rectangle_needs_no_rotation():
    out, rot = normalize_orientation(RECT)
    assert math.remainder(rot.angle, math.pi) == pytest.approx(0.0, abs=1e-12)
    assert np.abs(out - RECT).max() < 1e-9


def test_rotated_rectangle_recovers_angle():
    pre = Rotation(0.3, tuple(RECT.mean(axis=0))).apply(RECT)
    _, rot = normalize_orientation(pre)
    assert math.remainder(rot.angle + 0.3, math.pi) == pytest.approx(0.0, abs=1e-9)


def test_normalize_is_idempotent():
    once, _ = normalize_orientation(Rotation(1.1).apply(RECT))
    twice, _ = normalize_orientation(once)
    assert np.abs(twice - once).max() < 1e-9


def test_degenerate_outline():
    with pytest.raises(GeometryError):
        normalize_orientation(np.array([[0, 0], [1, 1], [2, 2]], dtype=float))
    with pytest.raises(GeometryError):
        normalize_orientation(np.zeros((4, 2)))


@settings(max_examples=30, deadline=None)
@given(st.floats(-3, 3), st.integers(0, 2**31 - 1))
def test_rotation_preserves_pairwise_distances(angle, seed):
    rng = np.random.default_rng(seed)
    o = GeoPoint(40.7, -73.7)
    lat = o.latitude + rng.uniform(-0.005, 0.005, 8)
    lon = o.longitude + rng.uniform(-0.005, 0.005, 8)
    xy = np.column_stack(geo_to_plane(lat, lon, o))
    outline = Rotation(angle).apply(RECT * 5)
    _, rot = normalize_orientation(outline)
    moved = rot.apply(xy)
    d0 = np.hypot(*(xy[:, None] - xy[None]).transpose(2, 0, 1))
    d1 = np.hypot(*(moved[:, None] - moved[None]).transpose(2, 0, 1))
    mask = d0 > 0
    assert np.max(np.abs(d1[mask] - d0[mask]) / d0[mask]) < 1e-6


# projection ---------------------------------------------------------------

def test_straight_rail_projection():
    tr = rail_track([[0, 0], [1000, 0]])
    assert project_to_track((250.04, 3.2), tr) == pytest.approx((250.0, 3.2), abs=1e-9)
    assert project_to_track((0, 5), tr) == pytest.approx((0.0, 5.0), abs=1e-9)


def test_semicircle_projection():
    t = np.linspace(0, math.pi, 20001)
    arc = np.column_stack([50 * np.cos(t), 50 * np.sin(t)])
    tr = rail_track(arc)
    pos = project_to_track((0.0, 52.0), tr)
    assert pos.forward == pytest.approx(25 * math.pi, abs=0.1)
    assert pos.lateral == pytest.approx(2.0, abs=0.1)


def test_projection_tie_goes_to_smaller_arclength():
    tr = rail_track([[0, 0], [1, 0]])
    # equidistant from samples at 0.5 and 0.6
    pos = project_to_track((0.55, 0.0), tr)
    assert pos.forward == pytest.approx(0.5)


def test_empty_rail():
    tr = TrackModel(np.zeros((3, 2)), np.zeros((3, 2)), np.zeros((2, 2)), np.zeros((0, 2)))
    with pytest.raises(GeometryError):
        project_to_track((0, 0), tr)


def test_rail_spacing_and_self_projection():
    tr = rail_track(stadium())
    d = np.hypot(*np.diff(tr.rail_xy[:2000], axis=0).T)
    s = tr.rail_s
    assert np.all(np.diff(s) > 0)
    assert np.allclose(np.diff(s), 0.1, atol=1e-9)
    # along a straight part consecutive samples are exactly 0.1 m apart
    assert np.allclose(d[:3000 if len(d) > 3000 else len(d)][:100], 0.1, atol=1e-9)
    idx = np.arange(0, len(tr.rail_xy), 97)
    pos = tr.project(tr.rail_xy[idx])
    assert np.allclose(pos[:, 0], s[idx], atol=1e-9)
    assert np.allclose(pos[:, 1], 0.0, atol=1e-9)


# motion_delta -------------------------------------------------------------

def test_motion_delta_figure_example():
    dF, dL, dT = motion_delta(TrackPosition(0, 5), TrackPosition(5, 6.5))
    assert (dF, dL) == (5.0, 1.5)
    assert dT == pytest.approx(math.sqrt(27.25), abs=1e-12)
    assert dT == pytest.approx(5.2202, abs=1e-4)


def test_motion_delta_zero():
    assert motion_delta(TrackPosition(3, 4), TrackPosition(3, 4)) == (0.0, 0.0, 0.0)


@given(st.lists(st.tuples(st.integers(0, 16000), st.floats(0, 20)), min_size=2, max_size=30))
def test_motion_delta_forward_additive(path):
    pos = [TrackPosition(k * 0.1, lat) for k, lat in path]
    total = sum(motion_delta(a, b)[0] for a, b in zip(pos, pos[1:]))
    assert total == pytest.approx(pos[-1].forward - pos[0].forward, abs=1e-9)


# segments -----------------------------------------------------------------

def test_stadium_segments():
    inner = stadium()
    finish = [[300, -50], [300, -80]]
    start = (380.0, 50.0)
    tr = build_track(inner, inner * 1.2, finish, start, race_distance=700.0, closed=True)
    r, cl, cr, _ = turn_circles(inner)
    assert r == pytest.approx(50.0)
    x = tr.rail_xy[:, 0]
    lab = tr.segment_labels
    assert np.all(lab[x < cl] == Segment.LEFT_TURN)
    assert np.all(lab[x > cr] == Segment.RIGHT_TURN)
    mid = (x > cl + 1) & (x < cr - 1)
    assert set(np.unique(lab[mid])) <= {Segment.STRETCH, Segment.HOME_STRETCH}
    # the home stretch is the bottom straight holding the finish
    home = lab == Segment.HOME_STRETCH
    assert np.allclose(tr.rail_xy[home, 1], -50.0, atol=1e-6)
    assert np.all(tr.rail_xy[lab == Segment.STRETCH, 1] > 0)
    # runs are contiguous: label changes at most 4 times over this rail
    assert np.count_nonzero(np.diff(lab.astype(int))) <= 4


def test_chute_override():
    inner = stadium()
    tr = build_track(inner, inner * 1.2, [[300, -50], [300, -80]], (380.0, 50.0), chutes=[(10.0, 30.0)])
    s = tr.rail_s
    sel = (s >= 10.0) & (s <= 30.0)
    assert np.all(tr.segment_labels[sel] == Segment.CHUTE)
    assert tr.segment_labels[np.searchsorted(s, 40.0)] != Segment.CHUTE


def test_finish_on_turn_is_config_error():
    inner = stadium()
    with pytest.raises(TrackConfigError):
        build_track(inner, inner * 1.2, [[-50, 0], [-80, 0]], (380.0, 50.0))


def test_synthetic_track_layout():
    tr = synthetic_track()
    assert tr.finish_arclength() == pytest.approx(tr.race_distance, abs=0.1)
    labels = tr.segment_labels
    k = int(round(tr.race_distance / 0.1))
    assert labels[k] == Segment.HOME_STRETCH
    assert labels[int(round(900 / 0.1))] in (Segment.LEFT_TURN, Segment.RIGHT_TURN)
    assert labels[int(round(300 / 0.1))] == Segment.STRETCH


def test_outline_file_round_trip(tmp_path):
    outlines, _ = synthetic_outlines(StadiumSpec())
    path = tmp_path / "outline.csv"
    write_outline(path, outlines)
    back = read_outline(path)
    for key in ("inner", "outer", "finish"):
        assert np.allclose(back[key], outlines[key], atol=1e-9)


def test_outline_file_missing_boundary(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("boundary,sequence,latitude,longitude\ninner,0,40.0,-73.0\n")
    with pytest.raises(TrackConfigError):
        read_outline(path)
