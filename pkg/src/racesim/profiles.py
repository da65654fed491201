"""Ward clustering of fitted speed profiles, merge trees and profile curves."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import pandas as pd

from .spline import BSplineBasis, build_basis

MIN_RACES = 5
CURVE_STEP_M = 10.0
EARLY_RACE_M = 400.0


class ClusteringInputError(ValueError):
    pass


@dataclass(frozen=True)
class ProfileVector:
    horse_id: str
    coefficients: tuple[float, ...]
    race_count: int


@dataclass(frozen=True)
class Merge:
    """One agglomeration: clusters ``left`` and ``right`` join into ``parent``.

    Ids ``0..n-1`` are the input vectors; merge ``m`` creates id ``n + m``.
    ``height`` follows the usual Ward convention,
    ``sqrt(2 * increase in within-cluster sum of squares)``.
    """

    parent: int
    left: int
    right: int
    height: float
    size: int


@dataclass
class ClusterResult:
    horse_ids: tuple[str, ...]
    coefficients: np.ndarray
    race_counts: np.ndarray
    merges: list[Merge]
    labels: np.ndarray  # 1..k, ordered by mean early-race profile (1 = fastest early)
    k: int

    def linkage_matrix(self) -> np.ndarray:
        """Merges in the ``(left, right, height, size)`` layout used by SciPy."""
        return np.array([[m.left, m.right, m.height, m.size] for m in self.merges], dtype=float).reshape(-1, 4)

    def assignments(self) -> pd.DataFrame:
        return pd.DataFrame({"horse_id": list(self.horse_ids), "cluster": self.labels,
                             "race_count": self.race_counts})


def eligible(vectors, min_races: int = MIN_RACES) -> list[ProfileVector]:
    """Vectors with at least ``min_races`` races, sorted by horse id."""
    keep = [v for v in vectors if v.race_count >= min_races]
    return sorted(keep, key=lambda v: v.horse_id)


def ward_linkage(X: np.ndarray) -> list[Merge]:
    """Ward agglomeration via the Lance-Williams update.

    Ties in merge cost go to the pair with the smallest ``(min id, max id)``.
    """
    X = np.asarray(X, dtype=float)
    n = len(X)
    if n < 1:
        return []
    diff = X[:, None, :] - X[None, :, :]
    d = np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    D = np.full((2 * n - 1, 2 * n - 1), np.inf)
    D[:n, :n] = d
    np.fill_diagonal(D, np.inf)
    size = np.zeros(2 * n - 1, dtype=int)
    size[:n] = 1
    alive = list(range(n))
    merges = []
    for m in range(n - 1):
        ids = np.array(alive)
        sub = D[np.ix_(ids, ids)]
        best = sub.min()
        cand = np.argwhere(sub <= best)
        pairs = sorted((min(ids[a], ids[b]), max(ids[a], ids[b])) for a, b in cand if a != b)
        i, j = pairs[0]
        new = n + m
        ni, nj = size[i], size[j]
        for k in alive:
            if k in (i, j):
                continue
            nk = size[k]
            t = ni + nj + nk
            val = ((ni + nk) * D[i, k] ** 2 + (nj + nk) * D[j, k] ** 2 - nk * D[i, j] ** 2) / t
            D[new, k] = D[k, new] = np.sqrt(max(val, 0.0))
        size[new] = ni + nj
        merges.append(Merge(new, i, j, float(D[i, j]), int(size[new])))
        alive = [k for k in alive if k not in (i, j)] + [new]
    return merges


def cut_tree(merges: list[Merge], n: int, k: int) -> np.ndarray:
    """Cluster index (arbitrary order) of each input after ``n - k`` merges."""
    parent = list(range(2 * n - 1))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    for m in merges[: n - k]:
        parent[m.left] = m.parent
        parent[m.right] = m.parent
    roots = [find(a) for a in range(n)]
    uniq = {r: c for c, r in enumerate(dict.fromkeys(roots))}
    return np.array([uniq[r] for r in roots], dtype=int)


def cluster_profiles(vectors, k: int = 3, min_races: int = MIN_RACES, basis: BSplineBasis | None = None) -> ClusterResult:
    """Ward clustering on coefficient vectors of horses with enough races.

    Cluster labels run ``1..k`` ordered by mean profile value over the first
    400 m (label 1 is the fastest starter).
    """
    vecs = eligible(vectors, min_races)
    if k < 1:
        raise ClusteringInputError("k must be at least 1")
    if len(vecs) < k:
        raise ClusteringInputError(f"{len(vecs)} profiles with at least {min_races} races; need {k}")
    X = np.array([v.coefficients for v in vecs], dtype=float)
    merges = ward_linkage(X)
    raw = cut_tree(merges, len(vecs), k)
    basis = basis or build_basis()
    early = basis.rows(np.arange(0.0, EARLY_RACE_M + 1e-9, CURVE_STEP_M)).mean(axis=0)
    score = X @ early
    means = np.array([score[raw == c].mean() for c in range(k)])
    order = sorted(range(k), key=lambda c: (-means[c], int(np.flatnonzero(raw == c)[0])))
    relabel = {c: r + 1 for r, c in enumerate(order)}
    labels = np.array([relabel[c] for c in raw], dtype=int)
    return ClusterResult(tuple(v.horse_id for v in vecs), X, np.array([v.race_count for v in vecs]), merges, labels, k)


def export_dendrogram(result: ClusterResult, basis: BSplineBasis | None = None,
                      step: float = CURVE_STEP_M) -> tuple[pd.DataFrame, pd.DataFrame]:
    """Merge-tree rows ``(parent, child, height)`` and profile curves ``(horse_id, j, value)``."""
    n = len(result.horse_ids)

    def name(i):
        return result.horse_ids[i] if i < n else f"node_{i}"

    tree = []
    for m in result.merges:
        for child in (m.left, m.right):
            tree.append({"parent": name(m.parent), "child": name(child), "height": m.height, "size": m.size})
    tree = pd.DataFrame(tree, columns=["parent", "child", "height", "size"])
    basis = basis or build_basis()
    j = np.arange(0.0, basis.upper + 1e-9, step)
    vals = result.coefficients @ basis.rows(j).T
    curves = pd.DataFrame({
        "horse_id": np.repeat(result.horse_ids, len(j)),
        "cluster": np.repeat(result.labels, len(j)),
        "j": np.tile(j, n),
        "value": vals.reshape(-1),
    })
    return tree, curves


def profile_vectors(theta: np.ndarray, horse_ids, race_counts: dict) -> list[ProfileVector]:
    return [ProfileVector(str(h), tuple(float(v) for v in row), int(race_counts.get(str(h), 0)))
            for h, row in zip(horse_ids, np.asarray(theta))]
