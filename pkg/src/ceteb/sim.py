"""Adversarial closed-loop simulation of the relative system under the safety controller.

Runs are integrated in lock-step as a batch (one row per run).  Each step the
tracker input is decided from the state at the start of the step and held,
together with the planner input, over a classical RK4 step.  Free steps use a
nominal tracker input; a Free step whose prediction would leave the TEB is
clamped instead, which is the discrete-time counterpart of engaging the
boundary strategy exactly at the boundary.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .barrier import TrackingErrorBound, write_trajectory_csv
from .controller import GUARD, clamp_inputs
from .errors import DomainError, SimDiverged
from .systems import RelativeSystem


@dataclass(frozen=True)
class OptimalEscape:
    """Planner heading along the outward normal of ``||P x||``."""


@dataclass(frozen=True)
class RandomPiecewise:
    seed: int = 0
    dwell: float = 0.1


@dataclass(frozen=True)
class Constant:
    u_lf: float = 0.0


@dataclass
class SimConfig:
    horizon: float = 20.0
    dt: float = 1e-3
    planner_policy: object = field(default_factory=OptimalEscape)
    x0: np.ndarray | None = None
    tolerance_band: float = 1e-6
    nominal_u_hf: float = 0.0
    guard: float = GUARD
    record: bool = True

    def __post_init__(self):
        if not self.dt > 0:
            raise DomainError("dt must be positive")
        if not self.horizon >= self.dt:
            raise DomainError("horizon must be at least one step")
        if self.x0 is not None:
            self.x0 = np.asarray(self.x0, dtype=float)
            if not np.all(np.isfinite(self.x0)):
                raise DomainError("x0 must be finite")


@dataclass
class SimResult:
    t: np.ndarray | None
    states: np.ndarray | None
    u_lf: np.ndarray | None
    u_hf: np.ndarray | None
    escaped: bool
    max_norm: float
    first_clamp_time: float | None
    clamp_steps: int
    teb_excursion: float

    def to_csv(self, path) -> None:
        if self.states is None:
            raise DomainError("trajectory was not recorded")
        write_trajectory_csv(path, self.t, self.states, None, self.u_lf, self.u_hf)


def _rk4_batch(sys, X, U_lf, U_hf, h):
    f = sys.vector_field_many
    k1 = f(X, U_lf, U_hf)
    k2 = f(X + 0.5 * h * k1, U_lf, U_hf)
    k3 = f(X + 0.5 * h * k2, U_lf, U_hf)
    k4 = f(X + h * k3, U_lf, U_hf)
    return X + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


def _speed_bound(sys: RelativeSystem, teb: TrackingErrorBound) -> float:
    """Crude bound on |dx/dt| over a neighbourhood of the TEB."""
    lo, hi = teb.bounding_box
    pad = 0.5 * np.max(hi - lo)
    pts = np.array([[a, b] for a in np.linspace(lo[0] - pad, hi[0] + pad, 5)
                    for b in np.linspace(lo[1] - pad, hi[1] + pad, 5)])
    best = 0.0
    for ulf in sys.planner_box.grid(5):
        for uhf in sys.tracker_box.grid(3):
            V = sys.vector_field_many(pts, np.tile(ulf, (len(pts), 1)), np.tile(uhf, (len(pts), 1)))
            best = max(best, float(np.max(np.linalg.norm(V, axis=1))))
    return 2.0 * best


class _Batch:
    def __init__(self, sys, teb, X0, cfg: SimConfig):
        self.sys, self.teb, self.cfg = sys, teb, cfg
        self.X = np.array(X0, dtype=float)
        self.m = len(self.X)
        self.beta = teb.beta
        self.P = teb.cap.projection
        self.reach = _speed_bound(sys, teb) * cfg.dt
        self.guard = cfg.guard * teb.beta
        # rows farther than this are Free without an exact query; a state
        # cannot change sides without first coming this close
        self.bound = self.guard + 2.0 * self.reach
        self.inside = teb.query(self.X).inside

    def decide(self, U_lf):
        """Tracker inputs and clamp mask for the current states."""
        sys, teb, cfg = self.sys, self.teb, self.cfg
        dim = sys.tracker_box.dim
        U = np.full((self.m, dim), cfg.nominal_u_hf, dtype=float)
        q = teb.query(self.X, bound=self.bound)
        if q.far is not None:
            q.inside[q.far] = self.inside[q.far]
            redo = q.far & ~q.inside
            if redo.any():
                q2 = teb.query(self.X[redo])
                for name in ("distance", "inside", "segment", "point", "normal"):
                    getattr(q, name)[redo] = getattr(q2, name)
        self.inside = q.inside
        clamp = ~q.inside | (q.distance <= self.guard)
        # predictive guard for states within one step of the boundary
        near = ~clamp & (q.distance <= self.guard + self.reach)
        if np.any(near):
            # first-order prediction of the signed distance along the local normal
            Xn = _rk4_batch(sys, self.X[near], U_lf[near], U[near], cfg.dt)
            pred = -q.distance[near] + np.einsum("ij,ij->i", Xn - self.X[near], q.normal[near])
            idx = np.flatnonzero(near)
            clamp[idx[pred > -self.guard]] = True
        if np.any(clamp):
            U[clamp], _ = clamp_inputs(teb, sys, self.X[clamp], q.segment[clamp], q.point[clamp])
        outside_dist = np.where(q.inside, 0.0, q.distance)
        return U, clamp, outside_dist


def _planner_inputs(sys, policy, X, step, tables, dwell_steps):
    if isinstance(policy, OptimalEscape):
        return sys.escape_heading(X)
    if isinstance(policy, Constant):
        return np.full((len(X), sys.planner_box.dim), policy.u_lf)
    if isinstance(policy, RandomPiecewise):
        k = min(step // dwell_steps, tables.shape[1] - 1)
        return tables[:, k, :]
    raise DomainError(f"unknown planner policy {policy!r}")


def _run(sys, teb, X0, cfg: SimConfig, tables=None, policies=None):
    batch = _Batch(sys, teb, X0, cfg)
    n_steps = int(round(cfg.horizon / cfg.dt))
    m = batch.m
    P = batch.P
    max_norm = np.linalg.norm(batch.X @ P.T, axis=1)
    first_clamp = np.full(m, np.nan)
    clamp_steps = np.zeros(m, dtype=int)
    excursion = np.zeros(m)
    policy = cfg.planner_policy
    dwell_steps = 1
    if isinstance(policy, RandomPiecewise):
        dwell_steps = max(1, int(round(policy.dwell / cfg.dt)))
    rec = None
    if cfg.record:
        rec = (np.empty((n_steps + 1, m, sys.state_dim)), np.empty((n_steps, m, sys.planner_box.dim)),
               np.empty((n_steps, m, sys.tracker_box.dim)))
        rec[0][0] = batch.X
    for k in range(n_steps):
        U_lf = _planner_inputs(sys, policy, batch.X, k, tables, dwell_steps)
        U_hf, clamp, out = batch.decide(U_lf)
        excursion = np.maximum(excursion, out)
        newly = clamp & np.isnan(first_clamp)
        first_clamp[newly] = k * cfg.dt
        clamp_steps += clamp
        batch.X = _rk4_batch(sys, batch.X, U_lf, U_hf, cfg.dt)
        if not np.all(np.isfinite(batch.X)):
            raise SimDiverged(f"non-finite state at t={(k + 1) * cfg.dt:.6f}")
        max_norm = np.maximum(max_norm, np.linalg.norm(batch.X @ P.T, axis=1))
        if rec is not None:
            rec[0][k + 1] = batch.X
            rec[1][k] = U_lf
            rec[2][k] = U_hf
    return max_norm, first_clamp, clamp_steps, excursion, rec, n_steps


def simulate(sys: RelativeSystem, teb: TrackingErrorBound, cfg: SimConfig) -> SimResult:
    """One closed-loop run from ``cfg.x0``."""
    if cfg.x0 is None:
        raise DomainError("SimConfig.x0 is required")
    tables = None
    if isinstance(cfg.planner_policy, RandomPiecewise):
        rng = np.random.default_rng(cfg.planner_policy.seed)
        tables = _draw_tables(sys, [rng], cfg)
    max_norm, first_clamp, clamp_steps, exc, rec, n = _run(sys, teb, cfg.x0[None], cfg, tables)
    beta = teb.beta
    t = np.arange(n + 1) * cfg.dt
    traj = states = ulf = uhf = None
    if rec is not None:
        states = rec[0][:, 0, :]
        # inputs are held over each step; repeat the last one for the final sample
        ulf = np.vstack([rec[1][:, 0, :], rec[1][-1:, 0, :]])
        uhf = np.vstack([rec[2][:, 0, :], rec[2][-1:, 0, :]])
        traj = t
    fc = None if np.isnan(first_clamp[0]) else float(first_clamp[0])
    return SimResult(traj, states, ulf, uhf, bool(max_norm[0] > beta * (1 + cfg.tolerance_band)),
                     float(max_norm[0]), fc, int(clamp_steps[0]), float(exc[0]))


def _draw_tables(sys, rngs, cfg: SimConfig):
    policy = cfg.planner_policy
    n_dwell = int(math.ceil(cfg.horizon / policy.dwell)) + 1
    lo = np.asarray(sys.planner_box.lower)
    hi = np.asarray(sys.planner_box.upper)
    return np.stack([r.uniform(lo, hi, size=(n_dwell, len(lo))) for r in rngs])


def sample_interior(teb: TrackingErrorBound, rng: np.random.Generator, max_tries: int = 100000):
    """Uniform sample of the TEB interior by rejection from its bounding box.

    Returns ``(x, tries)``.
    """
    lo, hi = teb.bounding_box
    for tries in range(1, max_tries + 1):
        x = rng.uniform(lo, hi)
        q = teb.query(x[None])
        if q.inside[0] and q.distance[0] > teb.band:
            return x, tries
    raise DomainError("rejection sampling failed to hit the TEB interior")


@dataclass
class MonteCarloSummary:
    runs: int
    escapes: int
    worst_max_norm: float
    seed: int
    acceptance_rate: float = field(default=math.nan, repr=False)
    worst_teb_excursion: float = field(default=0.0, repr=False)
    results: list = field(default_factory=list, repr=False)

    def to_dict(self) -> dict:
        return {"runs": self.runs, "escapes": self.escapes,
                "worst_max_norm": self.worst_max_norm, "seed": self.seed}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def monte_carlo_invariance(sys: RelativeSystem, teb: TrackingErrorBound, n_runs: int, seed: int,
                           horizon: float = 20.0, dt: float = 1e-3, dwell: float = 0.1,
                           tolerance_band: float = 1e-6, batch: int = 1000) -> MonteCarloSummary:
    """Random piecewise-constant adversaries from uniform interior starts.

    Run ``i`` draws its start and its planner inputs from its own generator,
    spawned from ``seed``, so summaries do not depend on batching.
    """
    if n_runs < 1:
        raise DomainError("n_runs must be at least 1")
    children = np.random.SeedSequence(seed).spawn(n_runs)
    rngs = [np.random.default_rng(c) for c in children]
    X0, tries = [], 0
    for r in rngs:
        x, k = sample_interior(teb, r)
        X0.append(x)
        tries += k
    cfg = SimConfig(horizon=horizon, dt=dt, planner_policy=RandomPiecewise(seed, dwell),
                    tolerance_band=tolerance_band, record=False)
    tables = _draw_tables(sys, rngs, cfg)
    X0 = np.array(X0)
    norms, excs = [], []
    for s in range(0, n_runs, batch):
        mn, _, _, exc, _, _ = _run(sys, teb, X0[s:s + batch], cfg, tables[s:s + batch])
        norms.append(mn)
        excs.append(exc)
    norms = np.concatenate(norms)
    escapes = int(np.sum(norms > teb.beta * (1 + tolerance_band)))
    return MonteCarloSummary(n_runs, escapes, float(np.max(norms)), int(seed),
                             acceptance_rate=n_runs / tries,
                             worst_teb_excursion=float(np.max(np.concatenate(excs))))
