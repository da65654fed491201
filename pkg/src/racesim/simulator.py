"""Frame-by-frame race simulation, posterior-predictive placement and lane experiments.

Simulations run as batches: every array carries a leading axis over
independent tasks (one parameter draw plus one noise stream each). Task
``k`` draws everything from a generator seeded by ``(base_seed, k)``, always
in the same order, so results do not depend on how tasks are split into
batches or workers.
"""
from __future__ import annotations

import itertools
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
import pandas as pd
from scipy.linalg import solve_triangular
from scipy.special import log_ndtr, ndtri, ndtri_exp

from .covariates import (
    FORWARD_COLUMNS,
    LATERAL_COLUMNS,
    SegmentLookup,
    race_arrays,
    replay_covariates,
    spatial_block,
)
from .drafting import DragTable, drag_force, prop_saved
from .geometry import TrackModel
from .inference import FittedParams, ModelFit
from .spline import build_basis

log = logging.getLogger(__name__)

DEFAULT_FRAME_CAP = 1200
NOISE_BLOCK = 64
MAX_LANE_COMPETITORS = 8


class SimulationError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class RunawaySimulationError(SimulationError):
    pass


# --------------------------------------------------------------------------
# state


@dataclass
class RaceState:
    """Snapshot of a race at frame ``frame``; arrays are indexed by competitor."""

    frame: int
    horse_ids: tuple[str, ...]
    jockey_ids: tuple[str, ...]
    context: str
    forward: np.ndarray
    lateral: np.ndarray
    prev_lat_movement: np.ndarray
    energy_actual: np.ndarray
    energy_clean: np.ndarray
    finish_time: np.ndarray
    cross_lateral: np.ndarray
    race_distance: float = 1609.34
    frame_period: float = 0.25

    def __post_init__(self):
        n = len(self.horse_ids)
        for name in ("forward", "lateral", "prev_lat_movement", "energy_actual", "energy_clean",
                     "finish_time", "cross_lateral"):
            arr = np.asarray(getattr(self, name), dtype=float).copy()
            if arr.shape != (n,):
                raise SimulationError(f"state field {name} has shape {arr.shape}, expected ({n},)")
            setattr(self, name, arr)
        if len(self.jockey_ids) != n:
            raise SimulationError("one jockey per competitor required")
        if len(set(self.horse_ids)) != n:
            raise SimulationError("competitor ids must be unique")
        if np.any(self.lateral < 0):
            raise SimulationError("lateral positions must be >= 0")
        fin = self.forward >= self.race_distance
        if np.any(fin != np.isfinite(self.finish_time)):
            raise SimulationError("finish times must be set exactly for competitors past the race distance")

    @property
    def n(self) -> int:
        return len(self.horse_ids)

    @property
    def finished(self) -> np.ndarray:
        return self.forward >= self.race_distance

    @property
    def ledger_prop_saved(self) -> np.ndarray:
        return prop_saved(self.energy_actual, self.energy_clean)

    @classmethod
    def grid(cls, horse_ids, jockey_ids, context: str, lateral, race_distance: float = 1609.34,
             frame_period: float = 0.25) -> "RaceState":
        """Standing start at the gate with the given lateral offsets."""
        n = len(horse_ids)
        z = np.zeros(n)
        nan = np.full(n, np.nan)
        return cls(0, tuple(horse_ids), tuple(jockey_ids), context, z, np.asarray(lateral, dtype=float),
                   z, z, z, nan, nan, race_distance, frame_period)


@dataclass
class SimulationOutcome:
    horse_ids: tuple[str, ...]
    finish_time: np.ndarray
    rank: np.ndarray
    seed: int | None = None
    draw_index: int | None = None
    trajectory: np.ndarray | None = None  # (frames, competitors, 2) forward/lateral


def lane_offsets(n: int, lane_width: float = 1.0) -> np.ndarray:
    """Starting lateral offsets for lanes ``1..n``: ``(L - 0.5) * lane_width``."""
    return (np.arange(1, n + 1) - 0.5) * lane_width


def start_from_frames(frames: pd.DataFrame, race_id: str, start_frame: int, track: TrackModel,
                      drag: DragTable | None = None, frame_period: float = 0.25) -> RaceState:
    """Build a start state from a prepared race at ``start_frame``.

    Competitors who crossed the line at or before ``start_frame`` keep their
    observed (interpolated) finish times; energy ledgers and previous lateral
    movement are carried over from the observed frames.
    """
    drag = drag or DragTable()
    race = frames[frames["race_id"].astype(str) == str(race_id)]
    if race.empty:
        raise KeyError(f"unknown race id '{race_id}'")
    arr = race_arrays(race)
    fr = arr["frames"]
    if start_frame < fr[0] or start_frame > fr[-1]:
        raise IndexError(f"start frame {start_frame} outside race {race_id} frames {fr[0]}..{fr[-1]}")
    D = track.race_distance
    F, L = arr["forward"], arr["lateral"]
    cov = replay_covariates(F, L, D, SegmentLookup.from_track(track), drag, frame_period)
    t = int(np.searchsorted(fr, start_frame))
    keep = []
    ft = np.full(F.shape[1], np.nan)
    xl = np.full(F.shape[1], np.nan)
    for h in range(F.shape[1]):
        col = F[: t + 1, h]
        crossed = np.flatnonzero(np.isfinite(col) & (col >= D))
        if crossed.size:
            c = int(crossed[0])
            if c == 0 or not np.isfinite(F[c - 1, h]):
                raise SimulationError(f"competitor {arr['horses'][h]} is past the line at its first observation")
            frac = (D - F[c - 1, h]) / (F[c, h] - F[c - 1, h])
            ft[h] = fr[c - 1] * frame_period + frame_period * frac
            xl[h] = L[c - 1, h] + frac * (L[c, h] - L[c - 1, h])
            keep.append(h)
        elif np.isfinite(F[t, h]):
            keep.append(h)
        else:
            log.warning("competitor %s not observed at frame %d; left out", arr["horses"][h], start_frame)
    k = np.array(keep, dtype=int)
    fwd = np.where(np.isfinite(ft[k]), np.maximum(np.nan_to_num(F[t, k], nan=D), D), F[t, k])
    lat = np.where(np.isfinite(L[t, k]), L[t, k], xl[k])
    return RaceState(
        frame=int(start_frame),
        horse_ids=tuple(np.array(arr["horses"])[k]),
        jockey_ids=tuple(np.array(arr["jockeys"])[k]),
        context=arr["context"],
        forward=fwd,
        lateral=np.maximum(lat, 0.0),
        prev_lat_movement=cov["prev_lat_movement"][t, k],
        energy_actual=cov["energy_actual"][t, k],
        energy_clean=cov["energy_clean"][t, k],
        finish_time=ft[k],
        cross_lateral=xl[k],
        race_distance=D,
        frame_period=frame_period,
    )


# --------------------------------------------------------------------------
# parameters per task


@dataclass
class DrawParams:
    """Model parameters mapped onto the competitors of one race, one row per task."""

    theta: np.ndarray  # (B, N, dim)
    fwd_offset: np.ndarray  # (B, N) jockey + context
    psi_f: np.ndarray  # (B, P_f)
    sigma_f: np.ndarray  # (B,)
    lat_offset: np.ndarray  # (B, N)
    beta: np.ndarray  # (B,)
    psi_l: np.ndarray  # (B, P_l)
    sigma_l: np.ndarray  # (B,)
    std_f: tuple[np.ndarray, np.ndarray]
    std_l: tuple[np.ndarray, np.ndarray]

    @property
    def size(self) -> int:
        return self.theta.shape[0]

    def take(self, idx) -> "DrawParams":
        return replace(
            self, theta=self.theta[idx], fwd_offset=self.fwd_offset[idx], psi_f=self.psi_f[idx],
            sigma_f=self.sigma_f[idx], lat_offset=self.lat_offset[idx], beta=self.beta[idx],
            psi_l=self.psi_l[idx], sigma_l=self.sigma_l[idx],
        )


def _transform(fit: ModelFit, z: np.ndarray) -> np.ndarray:
    if fit.chol is None:
        return fit.params + z * fit.fallback_scales
    return fit.params + solve_triangular(fit.chol, z.T, lower=True, trans="T").T


def _lookup(levels: tuple[str, ...], ids, what: str) -> np.ndarray:
    idx = {v: i for i, v in enumerate(levels)}
    out = np.array([idx.get(str(v), -1) for v in ids], dtype=int)
    for v, i in zip(ids, out):
        if i < 0:
            log.info("%s %s not in the fitted model; using the population value", what, v)
    return out


def map_params(fitted: FittedParams, state: RaceState, packed_f: np.ndarray, packed_l: np.ndarray) -> DrawParams:
    """Map packed forward/lateral parameter rows onto the competitors of ``state``."""
    if list(fitted.forward.covariates) != list(FORWARD_COLUMNS) or list(fitted.lateral.covariates) != list(LATERAL_COLUMNS):
        raise SimulationError("fitted covariate set does not match the simulator's covariates")
    pf = np.atleast_2d(packed_f)
    pl = np.atleast_2d(packed_l)
    if pf.shape[1] != fitted.forward.layout.size or pl.shape[1] != fitted.lateral.layout.size:
        raise SimulationError("parameter draw dimension does not match the fitted layout")
    vf = fitted.forward.layout.unpack(pf)
    vl = fitted.lateral.layout.unpack(pl)
    B = pf.shape[0]
    h = _lookup(fitted.forward.horses, state.horse_ids, "horse")
    theta = np.where((h >= 0)[None, :, None], vf["theta"][:, np.maximum(h, 0), :], vf["mu"][:, None, :])

    def offsets(fit, v):
        j = _lookup(fit.jockeys, state.jockey_ids, "jockey")
        jo = np.where((j >= 0)[None, :], v["jockey"][:, np.maximum(j, 0)], 0.0) if len(fit.jockeys) else np.zeros((B, state.n))
        c = _lookup(fit.contexts, [state.context], "context")[0]
        co = v["context"][:, c] if c >= 0 else np.zeros(B)
        return jo + co[:, None]

    sf, sl = fitted.forward.standardizer, fitted.lateral.standardizer
    return DrawParams(
        theta=theta, fwd_offset=offsets(fitted.forward, vf), psi_f=vf["psi"], sigma_f=vf["sigma"],
        lat_offset=offsets(fitted.lateral, vl), beta=vl["beta"], psi_l=vl["psi"], sigma_l=vl["sigma"],
        std_f=(sf.mean, sf.scale), std_l=(sl.mean, sl.scale),
    )


class _Streams:
    """Per-task generators; each task draws parameter normals first, then noise blocks."""

    def __init__(self, seed: int, tasks: np.ndarray, n: int):
        self.gens = [np.random.default_rng(np.random.SeedSequence([int(seed), int(t)])) for t in tasks]
        self.n = n
        self.pos = NOISE_BLOCK
        self.buf = None

    def normals(self, k: int) -> np.ndarray:
        return np.stack([g.standard_normal(k) for g in self.gens]) if k else np.zeros((len(self.gens), 0))

    def uniforms(self) -> np.ndarray:
        """``(tasks, competitors, 2)`` open-interval uniforms for one frame."""
        if self.pos == NOISE_BLOCK:
            raw = np.stack([g.random((NOISE_BLOCK, self.n, 2)) for g in self.gens])
            # k / 2**53 -> (k + 0.5) / 2**53 keeps both ends open
            self.buf = raw + 2.0**-54
            self.pos = 0
        out = self.buf[:, self.pos]
        self.pos += 1
        return out


# --------------------------------------------------------------------------
# stepping


@dataclass
class _Batch:
    frame: np.ndarray  # (B,) int
    F: np.ndarray
    L: np.ndarray
    plm: np.ndarray
    e_act: np.ndarray
    e_clean: np.ndarray
    finish: np.ndarray
    cross_lat: np.ndarray

    @classmethod
    def from_states(cls, states: list[RaceState]) -> "_Batch":
        def stack(name):
            return np.stack([np.asarray(getattr(s, name), dtype=float) for s in states])
        return cls(np.array([s.frame for s in states], dtype=np.int64), stack("forward"), stack("lateral"),
                   stack("prev_lat_movement"), stack("energy_actual"), stack("energy_clean"),
                   stack("finish_time"), stack("cross_lateral"))


class Engine:
    """Shared machinery for stepping batches of races on one track."""

    def __init__(self, track: TrackModel, fitted: FittedParams, drag: DragTable | None = None,
                 frame_cap: int = DEFAULT_FRAME_CAP):
        self.track = track
        self.fitted = fitted
        self.drag = drag or DragTable.from_dict(fitted.drag)
        self.basis = build_basis(fitted.spline)
        self.segments = SegmentLookup.from_track(track)
        self.frame_cap = int(frame_cap)

    def covariates(self, b: _Batch, D: float):
        active = b.F < D
        sp = spatial_block(b.F, b.L, active=active, drag=self.drag)
        seg = self.segments.indicators(np.minimum(b.F, D), clip=True)
        saved = prop_saved(b.e_act, b.e_clean)
        shared = [sp[c] for c in FORWARD_COLUMNS[:9]] + [sp["is_drafting"], saved, seg["is_turn"]]
        Xf = np.stack(shared, axis=-1)
        Xl = np.stack(shared + [seg["is_home_stretch"], seg["turn_to_home_stretch"]], axis=-1)
        return active, sp["c_d"], Xf, Xl

    def means(self, b: _Batch, p: DrawParams, D: float):
        active, cd, Xf, Xl = self.covariates(b, D)
        first, N = self.basis.local(np.minimum(b.F, self.basis.upper))
        cols = first[..., None] + np.arange(N.shape[-1])
        spline = np.sum(N * np.take_along_axis(p.theta, cols, axis=-1), axis=-1)
        zf = (Xf - p.std_f[0]) / p.std_f[1]
        zl = (Xl - p.std_l[0]) / p.std_l[1]
        mf = spline + p.fwd_offset + np.einsum("bnk,bk->bn", zf, p.psi_f)
        ml = p.beta[:, None] * b.plm + p.lat_offset + np.einsum("bnk,bk->bn", zl, p.psi_l)
        return active, cd, mf, ml

    def step(self, b: _Batch, p: DrawParams, u: np.ndarray, D: float, dt: float) -> _Batch:
        """Advance every task by one frame using uniforms ``u`` of shape (B, N, 2)."""
        active, cd, mf, ml = self.means(b, p, D)
        sf = p.sigma_f[:, None]
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            a = mf / sf
            # inverse CDF of N(mf, sf) restricted to [0, inf)
            z = -ndtri_exp(np.log(u[..., 0]) + log_ndtr(a))
            df = np.where(sf > 0, np.maximum(mf + sf * z, 0.0), np.maximum(mf, 0.0))
        dl = ml + p.sigma_l[:, None] * ndtri(u[..., 1])
        df = np.where(active, df, 0.0)
        newL = np.where(active, np.maximum(b.L + dl, 0.0), b.L)
        moved = newL - b.L
        s = np.hypot(df, moved)
        v = s / dt
        e_act = b.e_act + np.where(active, drag_force(v, cd, self.drag) * s, 0.0)
        e_clean = b.e_clean + np.where(active, drag_force(v, self.drag.clean_air, self.drag) * s, 0.0)
        newF = b.F + df
        cross = active & (newF >= D)
        with np.errstate(divide="ignore", invalid="ignore"):
            frac = np.where(cross, (D - b.F) / df, 0.0)
        finish = np.where(cross, b.frame[:, None] * dt + dt * frac, b.finish)
        cross_lat = np.where(cross, b.L + frac * moved, b.cross_lat)
        plm = np.where(active, moved, b.plm)
        return _Batch(b.frame + 1, np.where(active, newF, b.F), newL, plm, e_act, e_clean, finish, cross_lat)

    def run(self, starts: list[RaceState], seed: int, tasks: np.ndarray, params: DrawParams | None = None,
            trajectory: bool = False):
        """Simulate one task per start state; returns finish times, crossing laterals and ranks."""
        D = starts[0].race_distance
        dt = starts[0].frame_period
        n = starts[0].n
        streams = _Streams(seed, tasks, n)
        lf, ll = self.fitted.forward.layout.size, self.fitted.lateral.layout.size
        z = streams.normals(lf + ll)
        if params is None:
            pf = _transform(self.fitted.forward, z[:, :lf])
            pl = _transform(self.fitted.lateral, z[:, lf:])
            params = map_params(self.fitted, starts[0], pf, pl)
        b = _Batch.from_states(starts)
        path = [np.stack([b.F, b.L], -1)] if trajectory else None
        while True:
            todo = b.F < D
            if not todo.any():
                break
            over = todo.any(axis=1) & (b.frame >= self.frame_cap)
            if over.any():
                k = int(np.flatnonzero(over)[0])
                raise RunawaySimulationError(
                    f"simulation reached the frame cap ({self.frame_cap}) with competitors unfinished",
                    {"task": int(tasks[k]), "frame": int(b.frame[k]), "forward": b.F[k].tolist()},
                )
            b = self.step(b, params, streams.uniforms(), D, dt)
            if trajectory:
                path.append(np.stack([b.F, b.L], -1))
        ranks = rank_outcomes(b.finish, b.cross_lat)
        traj = np.stack(path, axis=1) if trajectory else None
        return b.finish, b.cross_lat, ranks, traj


def rank_outcomes(finish: np.ndarray, cross_lateral: np.ndarray) -> np.ndarray:
    """Ranks (1 = winner) by finish time, then smaller lateral at the line, then competitor order."""
    finish = np.atleast_2d(finish)
    cross_lateral = np.atleast_2d(cross_lateral)
    B, n = finish.shape
    ranks = np.empty((B, n), dtype=np.int64)
    idx = np.arange(n)
    for k in range(B):
        order = np.lexsort((idx, cross_lateral[k], finish[k]))
        ranks[k, order] = np.arange(1, n + 1)
    return ranks


# --------------------------------------------------------------------------
# single-race API


def step_frame(state: RaceState, params: DrawParams, rng: np.random.Generator, engine: Engine) -> RaceState:
    """Advance a single race by one frame under one parameter draw."""
    if params.size != 1:
        raise SimulationError("step_frame takes a single parameter draw")
    if params.theta.shape[1] != state.n:
        raise SimulationError("parameter draw does not match the number of competitors")
    if np.all(state.finished):
        raise SimulationError("every competitor has already finished")
    u = rng.random((1, state.n, 2)) + 2.0**-54
    b = engine.step(_Batch.from_states([state]), params, u, state.race_distance, state.frame_period)
    return replace(
        state, frame=int(b.frame[0]), forward=b.F[0], lateral=b.L[0], prev_lat_movement=b.plm[0],
        energy_actual=b.e_act[0], energy_clean=b.e_clean[0], finish_time=b.finish[0], cross_lateral=b.cross_lat[0],
    )


def simulate_race(start: RaceState, params: DrawParams, rng: np.random.Generator, engine: Engine,
                  keep_trajectory: bool = False) -> SimulationOutcome:
    """Step ``start`` until every competitor finishes."""
    state = start
    path = [np.stack([state.forward, state.lateral], -1)]
    while not np.all(state.finished):
        if state.frame >= engine.frame_cap:
            raise RunawaySimulationError(
                f"simulation reached the frame cap ({engine.frame_cap}) with competitors unfinished",
                {"frame": state.frame, "forward": state.forward.tolist()},
            )
        state = step_frame(state, params, rng, engine)
        if keep_trajectory:
            path.append(np.stack([state.forward, state.lateral], -1))
    rank = rank_outcomes(state.finish_time, state.cross_lateral)[0]
    return SimulationOutcome(start.horse_ids, state.finish_time, rank,
                             trajectory=np.stack(path) if keep_trajectory else None)


# --------------------------------------------------------------------------
# aggregation


@dataclass
class PlacementMatrix:
    """``probs[h, r]``: probability that row ``h`` finishes in rank ``r + 1``."""

    labels: tuple[str, ...]
    probs: np.ndarray
    expected_rank: np.ndarray
    finish_mean: np.ndarray
    finish_lo: np.ndarray
    finish_hi: np.ndarray
    n_sims: int
    seed: int | None = None
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_ranks(cls, labels, ranks: np.ndarray, finish: np.ndarray, seed=None, meta=None) -> "PlacementMatrix":
        ranks = np.asarray(ranks)
        S, n = ranks.shape
        if S == 0:
            raise ValueError("no simulations to aggregate")
        counts = np.zeros((n, n))
        for h in range(n):
            counts[h] = np.bincount(ranks[:, h] - 1, minlength=n)
        probs = counts / S
        lo, hi = np.percentile(finish, [2.5, 97.5], axis=0)
        return cls(tuple(labels), probs, ranks.mean(axis=0), finish.mean(axis=0), lo, hi, S, seed, dict(meta or {}))

    @property
    def win_probability(self) -> np.ndarray:
        return self.probs[:, 0]

    def expected_rank_se(self) -> np.ndarray:
        r = np.arange(1, len(self.labels) + 1)
        var = self.probs @ (r**2) - self.expected_rank**2
        return np.sqrt(np.maximum(var, 0.0) / self.n_sims)

    def to_frame(self, label: str = "competitor") -> pd.DataFrame:
        n = len(self.labels)
        df = pd.DataFrame(self.probs, columns=[f"p_rank_{r}" for r in range(1, n + 1)])
        df.insert(0, label, list(self.labels))
        df["expected_rank"] = self.expected_rank
        df["finish_time_mean"] = self.finish_mean
        df["finish_time_lo95"] = self.finish_lo
        df["finish_time_hi95"] = self.finish_hi
        return df

    def to_dict(self) -> dict:
        return {
            "labels": list(self.labels),
            "matrix": self.probs.tolist(),
            "expected_rank": self.expected_rank.tolist(),
            "finish_time_mean": self.finish_mean.tolist(),
            "finish_time_lo95": self.finish_lo.tolist(),
            "finish_time_hi95": self.finish_hi.tolist(),
            "n_sims": self.n_sims,
            "seed": self.seed,
            **self.meta,
        }


def _run_chunk(args):
    engine, starts, seed, tasks = args
    f, _, r, _ = engine.run(starts, seed, tasks)
    return f, r


def run_tasks(engine: Engine, starts_for, n_tasks: int, seed: int, workers: int = 1, batch_size: int = 1000):
    """Run tasks ``0..n_tasks-1``; ``starts_for(task_ids)`` gives their start states."""
    chunks = [np.arange(a, min(a + batch_size, n_tasks)) for a in range(0, n_tasks, batch_size)]
    jobs = [(engine, starts_for(t), seed, t) for t in chunks]
    try:
        if workers > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=workers) as ex:
                out = list(ex.map(_run_chunk, jobs))
        else:
            out = [_run_chunk(j) for j in jobs]
    except SimulationError as exc:
        raise type(exc)(f"{exc} (task {exc.diagnostics.get('task')})", exc.diagnostics) from exc
    return np.concatenate([f for f, _ in out]), np.concatenate([r for _, r in out])


def posterior_predictive(start: RaceState, engine: Engine, n_draws: int, seed: int = 0, workers: int = 1,
                         batch_size: int = 1000) -> PlacementMatrix:
    """Placement probabilities from ``n_draws`` Laplace draws, each simulated once from ``start``."""
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    finish, ranks = run_tasks(engine, lambda t: [start] * len(t), n_draws, seed, workers, batch_size)
    return PlacementMatrix.from_ranks(start.horse_ids, ranks, finish, seed,
                                      {"start_frame": start.frame, "n_draws": n_draws})


@dataclass
class LaneExperiment:
    lanes: PlacementMatrix
    competitors: PlacementMatrix
    n_assignments: int
    sims_per_assignment: int
    offsets: np.ndarray


def counterfactual_lane_experiment(competitors, jockeys, context: str, engine: Engine, sims_per_assignment: int = 100,
                                   seed: int = 0, lane_width: float = 1.0, offsets=None, workers: int = 1,
                                   batch_size: int = 2000, race_distance: float | None = None) -> LaneExperiment:
    """Simulate every lane assignment of ``competitors`` from a standing start.

    Assignment ``a`` (lexicographic permutation order) puts competitor
    ``perm[L - 1]`` in lane ``L``. Results are aggregated by lane and by
    competitor.
    """
    comp = tuple(str(c) for c in competitors)
    n = len(comp)
    if n > MAX_LANE_COMPETITORS:
        raise ValueError(f"{n} competitors means {math.factorial(n)} assignments; at most {MAX_LANE_COMPETITORS} allowed")
    if n < 1 or len(jockeys) != n:
        raise ValueError("need at least one competitor and one jockey each")
    lanes = lane_offsets(n, lane_width) if offsets is None else np.asarray(offsets, dtype=float)
    if lanes.shape != (n,):
        raise ValueError("one lateral offset per lane required")
    D = race_distance if race_distance is not None else engine.track.race_distance
    perms = np.array(list(itertools.permutations(range(n))), dtype=int)
    lane_of = np.argsort(perms, axis=1)  # lane index of each competitor
    states = []
    for a in range(len(perms)):
        states.append(RaceState.grid(comp, jockeys, context, lanes[lane_of[a]], D, engine.fitted.frame_period))
    S = sims_per_assignment
    finish, ranks = run_tasks(engine, lambda t: [states[k // S] for k in t], len(perms) * S, seed, workers, batch_size)
    lo = np.repeat(lane_of, S, axis=0)
    lane_ranks = np.take_along_axis(ranks, np.argsort(lo, axis=1), axis=1)
    lane_finish = np.take_along_axis(finish, np.argsort(lo, axis=1), axis=1)
    meta = {"n_assignments": int(len(perms)), "sims_per_assignment": int(S), "lane_offsets": lanes.tolist()}
    by_lane = PlacementMatrix.from_ranks([f"lane_{k}" for k in range(1, n + 1)], lane_ranks, lane_finish, seed, meta)
    by_comp = PlacementMatrix.from_ranks(comp, ranks, finish, seed, meta)
    return LaneExperiment(by_lane, by_comp, len(perms), S, lanes)
