"""Drag coefficients behind a leading competitor and drafting energy accounting.

Coefficients come from a small grid of (distance behind, lateral offset)
positions, bilinearly interpolated inside the grid and faded linearly to the
clean-air value outside it. Lateral offsets are centre-to-centre.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Calibration placeholders: no published CFD table exists for these positions.
DEFAULT_BEHIND = (2.0, 3.5, 5.0)
DEFAULT_LATERAL = (-0.5, 0.0, 0.5)
DEFAULT_CLEAN_AIR = 0.90
_CENTRE = (0.55, 0.70, 0.82)
DEFAULT_COEFFICIENTS = tuple(tuple(c + (0.0 if off == 0.0 else 0.06) for off in DEFAULT_LATERAL) for c in _CENTRE)


class DragTableError(ValueError):
    pass


@dataclass(frozen=True)
class DragTable:
    """Drag-coefficient grid indexed ``[behind, lateral]``.

    ``fade_behind`` and ``fade_lateral`` are the distances at which the
    drafting benefit has fully vanished.
    """

    behind_grid: tuple[float, ...] = DEFAULT_BEHIND
    lateral_grid: tuple[float, ...] = DEFAULT_LATERAL
    coefficients: tuple[tuple[float, ...], ...] = DEFAULT_COEFFICIENTS
    clean_air: float = DEFAULT_CLEAN_AIR
    air_density: float = 1.225
    frontal_area: float = 1.0
    fade_behind: float = 8.0
    fade_lateral: float = 1.0

    def __post_init__(self):
        b = np.asarray(self.behind_grid, dtype=float)
        l = np.asarray(self.lateral_grid, dtype=float)
        c = np.asarray(self.coefficients, dtype=float)
        if c.shape != (b.size, l.size):
            raise DragTableError(f"coefficient grid shape {c.shape} != ({b.size}, {l.size})")
        if np.any(np.diff(b) <= 0) or np.any(np.diff(l) <= 0) or b[0] <= 0:
            raise DragTableError("grids must be strictly increasing and behind distances positive")
        if np.any(c <= 0) or np.any(c >= self.clean_air):
            raise DragTableError("every grid coefficient must be positive and below clean air")
        if self.fade_behind <= b[-1] or self.fade_lateral <= max(abs(l[0]), abs(l[-1])):
            raise DragTableError("fade-out envelope must enclose the grid")
        if self.air_density <= 0 or self.frontal_area <= 0:
            raise DragTableError("air density and frontal area must be positive")

    @property
    def grid(self) -> np.ndarray:
        return np.asarray(self.coefficients, dtype=float)

    def to_dict(self) -> dict:
        return {
            "behind_grid": list(self.behind_grid),
            "lateral_grid": list(self.lateral_grid),
            "coefficients": [list(r) for r in self.coefficients],
            "clean_air": self.clean_air,
            "air_density": self.air_density,
            "frontal_area": self.frontal_area,
            "fade_behind": self.fade_behind,
            "fade_lateral": self.fade_lateral,
        }

    @classmethod
    def from_dict(cls, d: dict | None) -> "DragTable":
        if not d:
            return cls()
        kw = dict(d)
        for key in ("behind_grid", "lateral_grid"):
            if key in kw:
                kw[key] = tuple(float(v) for v in kw[key])
        if "coefficients" in kw:
            kw["coefficients"] = tuple(tuple(float(v) for v in row) for row in kw["coefficients"])
        return cls(**kw)


def drag_coefficient(rel_behind, rel_lateral, table: DragTable):
    """Drag coefficient of a trailing competitor.

    ``rel_behind`` is the forward gap to the leader (metres, positive when
    trailing) and ``rel_lateral`` the centre-to-centre lateral offset. NaN or
    non-positive ``rel_behind`` means nobody ahead: clean air. Gaps closer
    than the first grid row use that row.
    """
    behind = np.asarray(rel_behind, dtype=float)
    lat = np.asarray(rel_lateral, dtype=float)
    bg = np.asarray(table.behind_grid)
    lg = np.asarray(table.lateral_grid)
    grid = table.grid

    trailing = np.isfinite(behind) & (behind > 0)
    b = np.where(trailing, behind, bg[0])
    l = np.where(np.isfinite(lat), lat, 0.0)
    bc = np.clip(b, bg[0], bg[-1])
    lc = np.clip(l, lg[0], lg[-1])

    i = np.clip(np.searchsorted(bg, bc, side="right") - 1, 0, bg.size - 2)
    k = np.clip(np.searchsorted(lg, lc, side="right") - 1, 0, lg.size - 2)
    u = (bc - bg[i]) / (bg[i + 1] - bg[i])
    w = (lc - lg[k]) / (lg[k + 1] - lg[k])
    inside = (
        (1 - u) * (1 - w) * grid[i, k]
        + u * (1 - w) * grid[i + 1, k]
        + (1 - u) * w * grid[i, k + 1]
        + u * w * grid[i + 1, k + 1]
    )

    fade_b = np.clip((b - bg[-1]) / (table.fade_behind - bg[-1]), 0.0, 1.0)
    over = np.where(l > lg[-1], (l - lg[-1]) / (table.fade_lateral - lg[-1]),
                    np.where(l < lg[0], (lg[0] - l) / (table.fade_lateral + lg[0]), 0.0))
    fade_l = np.clip(over, 0.0, 1.0)
    keep = (1.0 - fade_b) * (1.0 - fade_l)
    cd = table.clean_air - (table.clean_air - inside) * keep
    cd = np.where(trailing, cd, table.clean_air)
    return float(cd) if cd.ndim == 0 else cd


def drag_force(v, c_d, table: DragTable):
    """Aerodynamic drag ``0.5 * rho * v**2 * c_d * A`` in newtons."""
    return 0.5 * table.air_density * np.square(v) * c_d * table.frontal_area


@dataclass
class EnergyLedger:
    """Cumulative drag work (joules) against actual and clean-air coefficients."""

    actual: float = 0.0
    clean_air: float = 0.0
    is_drafting: bool = False

    @property
    def prop_energy_saved(self) -> float:
        return prop_saved(self.actual, self.clean_air)


def prop_saved(actual, clean):
    actual = np.asarray(actual, dtype=float)
    clean = np.asarray(clean, dtype=float)
    out = np.where(clean > 0, 1.0 - actual / np.where(clean > 0, clean, 1.0), 0.0)
    return float(out) if out.ndim == 0 else out


def frame_energy(v, c_d, s, table: DragTable):
    """``(actual, clean_air)`` work over a frame covering ``s`` metres at speed ``v``."""
    return drag_force(v, c_d, table) * s, drag_force(v, table.clean_air, table) * s


def update_energy_ledger(ledger: EnergyLedger, v: float, c_d: float, s: float, table: DragTable) -> EnergyLedger:
    if s < 0:
        raise ValueError("distance covered must be non-negative")
    actual, clean = frame_energy(v, c_d, s, table)
    return EnergyLedger(
        actual=ledger.actual + float(actual),
        clean_air=ledger.clean_air + float(clean),
        is_drafting=bool(c_d < table.clean_air),
    )
