import io

import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from racesim.ingest import (
    TRACKING_COLUMNS,
    AnomalySpan,
    ImputationError,
    RaceFrameTable,
    SchemaError,
    detect_anomalies,
    impute_gap,
    imputed_progress,
    parse_tracking,
    prepare_tracking,
    reliable_peers,
)

HEADER = ",".join(TRACKING_COLUMNS)


def tracking_text(rows):
    return HEADER + "\n" + "\n".join(",".join(str(v) for v in r) for r in rows) + "\n"


def raw_row(horse, frame, cond="fast", lat=40.0, lon=-73.0, race="R1"):
    return [race, "T1", "dirt", cond, frame, 0.25 * frame, horse, "J" + horse, 1, lat, lon]


def positions_table(paths, race="R1", frame0=0):
    """Projected table from ``{horse: (forward array, lateral array)}``."""
    recs = []
    for h, (F, L) in paths.items():
        for k, (f, l) in enumerate(zip(F, L)):
            recs.append({"race_id": race, "track_id": "T1", "course_type": "dirt", "track_condition": "fast",
                         "frame": frame0 + k, "timestamp_s": 0.25 * (frame0 + k), "horse_id": h,
                         "jockey_id": "J" + h, "starting_lane": 1, "latitude": 40.0, "longitude": -73.0,
                         "forward": float(f), "lateral": float(l), "imputed": False})
    df = pd.DataFrame(recs).sort_values(["race_id", "frame", "horse_id"]).reset_index(drop=True)
    return RaceFrameTable(df, 0.25)


# parsing ------------------------------------------------------------------

def test_parse_two_by_three():
    rows = [raw_row(h, f) for f in range(3) for h in ("B", "A")]
    t = parse_tracking(tracking_text(rows))
    assert len(t) == 6
    assert t.frame_period == pytest.approx(0.25)
    keys = list(zip(t.frames["frame"], t.frames["horse_id"]))
    assert keys == sorted(keys)


def test_parse_duplicate_cell():
    rows = [raw_row("A", 0), raw_row("A", 1), raw_row("A", 1)]
    with pytest.raises(SchemaError, match="row 3"):
        parse_tracking(tracking_text(rows))


def test_parse_normalizes_condition():
    t = parse_tracking(tracking_text([raw_row("A", 0, cond="Sloppy"), raw_row("A", 1, cond="SLOPPY")]))
    assert set(t.frames["track_condition"]) == {"sloppy"}


def test_parse_unknown_condition():
    with pytest.raises(SchemaError, match="row 2.*track_condition"):
        parse_tracking(tracking_text([raw_row("A", 0), raw_row("A", 1, cond="frozen")]))


def test_parse_missing_column():
    text = tracking_text([raw_row("A", 0)]).replace("jockey_id", "rider")
    with pytest.raises(SchemaError, match="jockey_id"):
        parse_tracking(text)


def test_parse_frame_gap():
    with pytest.raises(SchemaError, match="jumps"):
        parse_tracking(tracking_text([raw_row("A", 0), raw_row("A", 2)]))


def test_parse_stream_and_comment_line():
    text = "# provenance line\n" + tracking_text([raw_row("A", 0), raw_row("A", 1)])
    t = parse_tracking(io.StringIO(text))
    assert len(t) == 2


# anomaly detection --------------------------------------------------------

def smooth(n, speed=4.0, start=0.0):
    return start + speed * np.arange(n, dtype=float)


def test_freeze_then_jump_span():
    F = smooth(20)
    F[10:14] = F[10]  # frames 10-13 identical
    F[14:] = F[10] + 15.0 + 4.0 * np.arange(6)
    t = positions_table({"A": (F, np.full(20, 2.0))})
    spans = detect_anomalies(t)
    assert spans == [AnomalySpan("R1", "A", 9, 14, "jump")]


def test_smooth_trajectory_clean():
    t = positions_table({"A": (smooth(40, speed=16 * 0.25), np.full(40, 3.0))})
    assert detect_anomalies(t) == []


def test_freeze_at_first_frame():
    F = np.concatenate([np.zeros(4), 12.0 + 4.0 * np.arange(10)])
    t = positions_table({"A": (F, np.full(14, 1.0))}, frame0=5)
    spans = detect_anomalies(t)
    assert spans == [AnomalySpan("R1", "A", 5, 9, "frozen")]


def test_single_frozen_displacement_is_not_flagged():
    F = smooth(12)
    F[6] = F[5]
    F[7:] = F[5] + 8.0 + 4.0 * np.arange(5)
    t = positions_table({"A": (F, np.zeros(12))})
    assert detect_anomalies(t) == []


def test_span_validation():
    with pytest.raises(ValueError):
        AnomalySpan("R", "A", 5, 5, "jump")


# imputation ---------------------------------------------------------------

PBAR = np.array([0.12, 0.28, 0.47, 0.66, 0.84])


def example_table():
    frames = 16
    F = np.full(frames, np.nan)
    F[:10] = np.linspace(0, 20, 10)
    F[9] = 20.0
    F[10:15] = 20.0  # frozen, to be replaced
    F[15] = 50.0
    peer = 100.0 + 50.0 * np.concatenate([[0.0] * 10, PBAR, [1.0]])
    peer[:10] = np.linspace(60, 100, 10)
    L = np.linspace(1.0, 4.0, frames)
    return positions_table({"A": (F, L), "B": (peer, np.full(frames, 5.0))})


def test_imputation_worked_example():
    t = example_table()
    span = AnomalySpan("R1", "A", 9, 15, "jump")
    out = impute_gap(t, span)
    a = out.frames[out.frames["horse_id"] == "A"].set_index("frame")
    assert np.allclose(a.loc[10:14, "forward"], [23.6, 28.4, 34.1, 39.8, 45.2], atol=1e-9)
    assert a.loc[9, "forward"] == 20.0 and a.loc[15, "forward"] == 50.0
    assert a.loc[10:14, "imputed"].all() and not a.loc[[9, 15], "imputed"].any()
    mean_speed = (a.loc[15, "forward"] - a.loc[9, "forward"]) / (6 * t.frame_period)
    assert mean_speed == pytest.approx(30.0 / 1.5, abs=1e-12)
    # lateral is linear between the endpoints
    la, lb = a.loc[9, "lateral"], a.loc[15, "lateral"]
    assert np.allclose(a.loc[10:14, "lateral"], la + (lb - la) * np.arange(1, 6) / 6, atol=1e-12)
    # the peer and all frames outside the span are untouched
    before = t.frames.set_index(["horse_id", "frame"])
    after = out.frames.set_index(["horse_id", "frame"])
    keep = ~((after.index.get_level_values(0) == "A") & after.index.get_level_values(1).isin(range(10, 15)))
    pd.testing.assert_frame_equal(after[keep][["forward", "lateral"]], before[keep][["forward", "lateral"]])


def test_uniform_peers_give_linear_interpolation():
    peers = np.linspace(0, 60, 7)[:, None] * np.array([1.0, 2.0])
    path = imputed_progress(20.0, 50.0, peers)
    assert np.allclose(path, np.linspace(20, 50, 7), atol=1e-12)


def test_no_reliable_peer():
    t = example_table()
    span = AnomalySpan("R1", "A", 9, 15, "jump")
    other = AnomalySpan("R1", "B", 12, 14, "jump")
    assert reliable_peers(t, span, [span, other]) == []
    with pytest.raises(ImputationError):
        impute_gap(t, span, [span, other])


def test_peer_missing_frames_is_not_reliable():
    t = example_table()
    t.frames = t.frames[~((t.frames["horse_id"] == "B") & (t.frames["frame"] == 12))].reset_index(drop=True)
    assert reliable_peers(t, AnomalySpan("R1", "A", 9, 15, "jump")) == []


@settings(max_examples=60, deadline=None)
@given(
    st.floats(0, 500), st.floats(0.1, 100),
    st.lists(st.lists(st.floats(0, 10), min_size=5, max_size=5), min_size=1, max_size=5),
)
def test_imputation_properties(start, dist, steps):
    steps = np.array(steps).T  # (frames, peers) of nonnegative increments
    peers = np.vstack([np.zeros(steps.shape[1]), np.cumsum(steps, axis=0)])
    if not np.any(peers[-1] > 0):
        with pytest.raises(ImputationError):
            imputed_progress(start, start + dist, peers)
        return
    path = imputed_progress(start, start + dist, peers)
    assert path[0] == pytest.approx(start, abs=1e-9)
    assert path[-1] == pytest.approx(start + dist, abs=1e-9)
    assert np.all(np.diff(path) >= -1e-9)


def test_prepare_reports_and_imputes():
    F = smooth(30)
    F[10:14] = F[10]
    F[14:] = F[10] + 16.0 + 4.0 * np.arange(16)
    t = positions_table({"A": (F, np.ones(30)), "B": (smooth(30, 3.8), np.full(30, 3.0))})
    out, rep = prepare_tracking(t, tracks={})
    d = rep.to_dict()
    assert d["n_spans"] == 1 and d["n_imputed_competitors"] == 1
    assert d["imputed_fraction"] == pytest.approx(0.5)
    assert d["spans"][0]["method"] == "peer-proportional"
    a = out.frames[out.frames["horse_id"] == "A"].set_index("frame")
    assert a["imputed"].sum() == 4
    assert np.all(np.diff(a["forward"]) >= 0)
