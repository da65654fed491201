import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from racesim.drafting import (
    DragTable,
    DragTableError,
    EnergyLedger,
    drag_coefficient,
    drag_force,
    prop_saved,
    update_energy_ledger,
)

T = DragTable()


def test_grid_node_exact():
    for i, b in enumerate(T.behind_grid):
        for k, l in enumerate(T.lateral_grid):
            assert drag_coefficient(b, l, T) == T.grid[i, k]


def test_bilinear_midpoint():
    g = T.grid
    expected = 0.25 * (g[0, 1] + g[1, 1] + g[0, 2] + g[1, 2])
    assert drag_coefficient(2.75, 0.25, T) == pytest.approx(expected, abs=1e-12)


def test_far_behind_is_clean_air():
    assert drag_coefficient(20.0, 0.0, T) == T.clean_air
    assert drag_coefficient(3.0, 1.5, T) == T.clean_air
    assert drag_coefficient(3.0, -1.0, T) == T.clean_air


def test_not_trailing_is_clean_air():
    assert drag_coefficient(-1.0, 0.0, T) == T.clean_air
    assert drag_coefficient(0.0, 0.0, T) == T.clean_air
    assert drag_coefficient(np.nan, 0.0, T) == T.clean_air


def test_closer_than_grid_uses_first_row():
    assert drag_coefficient(1.0, 0.0, T) == T.grid[0, 1]


def test_fade_is_linear():
    mid = 0.5 * (T.behind_grid[-1] + T.fade_behind)
    assert drag_coefficient(mid, 0.0, T) == pytest.approx(0.5 * (T.grid[-1, 1] + T.clean_air), abs=1e-12)


def test_continuity_at_hull_edges():
    eps = 1e-10
    for l in np.linspace(-0.5, 0.5, 11):
        assert abs(drag_coefficient(5.0 + eps, l, T) - drag_coefficient(5.0, l, T)) < 1e-9
    for b in np.linspace(2.0, 5.0, 13):
        assert abs(drag_coefficient(b, 0.5 + eps, T) - drag_coefficient(b, 0.5, T)) < 1e-9
        assert abs(drag_coefficient(b, -0.5 - eps, T) - drag_coefficient(b, -0.5, T)) < 1e-9


def test_vectorised_matches_scalar():
    b = np.array([2.0, 3.0, 6.0, np.nan])
    l = np.array([0.0, 0.3, -0.7, 0.0])
    vec = drag_coefficient(b, l, T)
    assert np.allclose(vec, [drag_coefficient(x, y, T) for x, y in zip(b, l)])


@given(st.floats(2.0, 5.0), st.floats(-0.5, 0.5))
def test_inside_hull_below_clean_air(b, l):
    assert drag_coefficient(b, l, T) < T.clean_air


@given(st.floats(-50, 50) | st.just(float("nan")), st.floats(-5, 5))
def test_never_above_clean_air(b, l):
    cd = drag_coefficient(b, l, T)
    assert 0 < cd <= T.clean_air


def test_default_table_shape_rules():
    g = T.grid
    assert np.all(np.diff(g, axis=0) >= 0)
    assert np.all(g[:, [0, 2]] >= g[:, [1]])


def test_invalid_tables():
    with pytest.raises(DragTableError):
        DragTable(coefficients=((0.5, 0.5, 0.95),) * 3)
    with pytest.raises(DragTableError):
        DragTable(coefficients=((0.5, 0.5),) * 3)
    with pytest.raises(DragTableError):
        DragTable(fade_behind=4.0)


def test_dict_round_trip():
    assert DragTable.from_dict(T.to_dict()) == T
    assert DragTable.from_dict(None) == T


# force and energy ---------------------------------------------------------

def test_drag_force_values():
    assert drag_force(0.0, 0.9, T) == 0.0
    assert drag_force(16.0, 0.9, T) == pytest.approx(141.12, abs=1e-9)
    assert drag_force(32.0, 0.9, T) == pytest.approx(4 * drag_force(16.0, 0.9, T))


def test_clean_air_race_saves_nothing():
    led = EnergyLedger()
    for _ in range(100):
        led = update_energy_ledger(led, 16.0, T.clean_air, 4.0, T)
    assert led.prop_energy_saved == 0.0
    assert not led.is_drafting


def test_constant_fraction_saving():
    led = EnergyLedger()
    for _ in range(50):
        led = update_energy_ledger(led, 15.0, 0.8 * T.clean_air, 3.75, T)
    assert led.prop_energy_saved == pytest.approx(0.2, abs=1e-12)
    assert led.is_drafting


def test_zero_distance_leaves_ledger():
    led = update_energy_ledger(EnergyLedger(), 16.0, 0.7, 4.0, T)
    again = update_energy_ledger(led, 16.0, 0.5, 0.0, T)
    assert (again.actual, again.clean_air) == (led.actual, led.clean_air)


def test_negative_distance_rejected():
    with pytest.raises(ValueError):
        update_energy_ledger(EnergyLedger(), 16.0, 0.7, -1.0, T)


def test_prop_saved_empty_ledger():
    assert prop_saved(0.0, 0.0) == 0.0


@given(st.lists(st.tuples(st.floats(0.1, 20), st.floats(0.05, 0.9), st.floats(0, 6)), min_size=1, max_size=40))
def test_prop_saved_range(frames):
    led = EnergyLedger()
    clean_seq = []
    for v, cd, s in frames:
        led = update_energy_ledger(led, v, min(cd, T.clean_air), s, T)
        clean_seq.append(led.clean_air)
    assert 0.0 <= led.prop_energy_saved < 1.0
    assert np.all(np.diff(clean_seq) >= 0)
