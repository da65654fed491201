"""Clamped cubic B-spline basis over cumulative forward distance."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class SplineSpecError(ValueError):
    pass


@dataclass(frozen=True)
class SplineSpec:
    degree: int = 3
    boundary_knots: tuple[float, float] = (0.0, 1650.0)
    internal_knots: tuple[float, ...] = (90.0, 250.0, 800.0, 1207.0, 1375.0)

    @property
    def dimension(self) -> int:
        return len(self.internal_knots) + self.degree + 1

    def validate(self) -> "SplineSpec":
        lo, hi = self.boundary_knots
        if self.degree < 0:
            raise SplineSpecError("degree must be non-negative")
        if not hi > lo:
            raise SplineSpecError("boundary knots must be increasing")
        k = np.asarray(self.internal_knots, dtype=float)
        if k.size and (np.any(np.diff(k) <= 0) or k[0] <= lo or k[-1] >= hi):
            raise SplineSpecError("internal knots must be strictly increasing and inside the boundary")
        return self

    def to_dict(self) -> dict:
        return {
            "degree": self.degree,
            "boundary_knots": list(self.boundary_knots),
            "internal_knots": list(self.internal_knots),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SplineSpec":
        return cls(
            degree=int(d.get("degree", 3)),
            boundary_knots=tuple(float(v) for v in d.get("boundary_knots", (0.0, 1650.0))),
            internal_knots=tuple(float(v) for v in d.get("internal_knots", (90.0, 250.0, 800.0, 1207.0, 1375.0))),
        )


@dataclass(frozen=True)
class BSplineBasis:
    """Evaluator for a clamped B-spline basis (Cox-de Boor recursion).

    Evaluation points beyond the upper boundary knot are clamped to it;
    negative points are rejected.
    """

    spec: SplineSpec
    knots: np.ndarray = field(repr=False)

    @property
    def dimension(self) -> int:
        return self.spec.dimension

    @property
    def upper(self) -> float:
        return float(self.spec.boundary_knots[1])

    def __call__(self, j) -> np.ndarray:
        return self.rows(j)

    def local(self, j) -> tuple[np.ndarray, np.ndarray]:
        """Nonzero basis values at ``j``.

        Returns ``(first, values)``: ``values[..., r]`` is basis function
        ``first + r``, for ``r`` in ``0..degree``.
        """
        j = np.asarray(j, dtype=float)
        if np.any(j < self.spec.boundary_knots[0]):
            raise ValueError("spline evaluated below the lower boundary knot")
        x = np.minimum(j.ravel(), self.upper)
        p = self.spec.degree
        t = self.knots
        n = self.dimension
        # span index mu with t[mu] <= x < t[mu+1]; the right endpoint uses the last nonempty span
        mu = np.searchsorted(t, x, side="right") - 1
        mu = np.clip(mu, p, n - 1)
        # de Boor triangular scheme: N holds the p+1 nonzero functions at each x
        N = np.zeros((x.size, p + 1))
        N[:, 0] = 1.0
        left = np.empty((x.size, p + 1))
        right = np.empty((x.size, p + 1))
        for r in range(1, p + 1):
            left[:, r] = x - t[mu + 1 - r]
            right[:, r] = t[mu + r] - x
            saved = np.zeros(x.size)
            for s in range(r):
                denom = right[:, s + 1] + left[:, r - s]
                temp = np.divide(N[:, s], denom, out=np.zeros(x.size), where=denom != 0)
                N[:, s] = saved + right[:, s + 1] * temp
                saved = left[:, r - s] * temp
            N[:, r] = saved
        return (mu - p).reshape(j.shape), N.reshape(j.shape + (p + 1,))

    def rows(self, j) -> np.ndarray:
        """Basis values at ``j``; shape ``j.shape + (dimension,)``."""
        j = np.asarray(j, dtype=float)
        first, N = self.local(j)
        p = self.spec.degree
        first = first.ravel()
        N = N.reshape(-1, p + 1)
        out = np.zeros((first.size, self.dimension))
        cols = first[:, None] + np.arange(p + 1)[None, :]
        np.put_along_axis(out, cols, N, axis=1)
        return out.reshape(j.shape + (self.dimension,))

    def profile(self, coef, j) -> np.ndarray:
        """Spline value ``rows(j) @ coef``."""
        return self.rows(j) @ np.asarray(coef, dtype=float)


def build_basis(spec: SplineSpec | None = None) -> BSplineBasis:
    spec = (spec or SplineSpec()).validate()
    lo, hi = spec.boundary_knots
    p = spec.degree
    knots = np.concatenate([[lo] * (p + 1), spec.internal_knots, [hi] * (p + 1)]).astype(float)
    return BSplineBasis(spec, knots)


def eval_basis_row(basis: BSplineBasis, j: float) -> np.ndarray:
    return basis.rows(float(j))
