"""Adapting the planner performance to a safety margin and vice versa.

The central quantity is the junction residual: the signed distance (along a
manifold direction) between the point where the barrier pieces meet and the
required junction point.  It is positive when the pieces meet short of the
target (the bound is slack and the planner could go faster) and negative when
they overshoot it.  Configurations without a junction map to a sentinel on
the open side so that bracketing root finders stay consistent.
"""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq

from .barrier import DEFAULT_STEP, ClosedBarrier, JunctionKind, SurfaceTrajectory, _tangent_toward_nup, build_barrier
from .errors import (
    BarrierOpen,
    Diverged,
    DomainError,
    Infeasible,
    IntegrationDrift,
    NoBnupError,
    NoRoot,
    ValidityFailed,
)
from .geometry import CaptivitySet, compute_bnup
from .systems import RelativeSystem

DEFAULT_TOL = 1e-6
MAX_ITER = 200
#: sentinel magnitude, in units of beta, for open barriers
SENTINEL = 10.0
CONTAINMENT_RTOL = 1e-9


@dataclass(frozen=True)
class ManifoldSpec:
    """Required junction location.

    ``target`` is either a fixed point or a callable ``beta -> point``.  With
    ``direction`` the residual is ``direction . (target - junction)``,
    otherwise the Euclidean distance.  ``open_sign`` is the sign reported when
    no junction exists.  ``locus_distance(x, beta)`` measures how far a
    junction is from the admissible manifold as a whole; it is used when the
    residual jumps over zero at the margin where the barrier first closes.
    """

    target: Callable[[float], np.ndarray] | Sequence[float]
    direction: Sequence[float] | None = None
    open_sign: float = -1.0
    locus_distance: Callable[[np.ndarray, float], float] | None = None

    def target_at(self, beta: float, projection=None) -> np.ndarray:
        t = self.target(beta) if callable(self.target) else self.target
        t = np.asarray(t, dtype=float)
        P = np.eye(len(t)) if projection is None else projection
        if np.linalg.norm(P @ t) > beta * (1 + CONTAINMENT_RTOL):
            raise DomainError("manifold target lies outside the captivity set")
        return t

    @classmethod
    def y_axis_top(cls) -> "ManifoldSpec":
        """Junction at ``(0, beta)``: pieces meet on the symmetry axis at the boundary."""
        return cls(target=_top_of_axis, direction=(0.0, 1.0), locus_distance=_to_axis_segment)


def _top_of_axis(beta):
    return np.array([0.0, beta])


def _to_axis_segment(x, beta):
    """Distance to ``{(0, y) : |y| <= beta}``."""
    return math.hypot(x[0], max(abs(x[1]) - beta, 0.0))


def default_manifold(sys: RelativeSystem) -> ManifoldSpec:
    if getattr(sys, "omega_max", None) is not None and sys.state_dim == 2:
        return ManifoldSpec.y_axis_top()
    raise DomainError("generic systems need an explicit ManifoldSpec")


@dataclass
class Validity:
    eq18: bool
    eq20: bool
    eq21: bool
    margin18: float
    margin20: float
    margin21: float

    @property
    def ok(self) -> bool:
        return self.eq18 and self.eq20 and self.eq21

    def first_failure(self) -> str | None:
        for name in ("eq18", "eq20", "eq21"):
            if not getattr(self, name):
                return name
        return None

    def to_dict(self) -> dict:
        return {
            "eq18": self.eq18, "eq20": self.eq20, "eq21": self.eq21,
            "margin18": self.margin18, "margin20": self.margin20, "margin21": self.margin21,
        }


def _anchor_curvature(piece: SurfaceTrajectory, cap: CaptivitySet) -> float:
    """One-sided second derivative of ``||P x||`` at the anchor (t -> 0-)."""
    span = piece.t[-1] - piece.t[0]
    h = min(max(20 * abs(piece.t[-1] - piece.t[-2]), 1e-3 * span), span / 8)
    ts = -h * np.arange(8)
    r = np.array([cap.norm(piece.state_at(t)) for t in ts])
    c = np.polyfit(ts / h, r - cap.beta, 3)
    return 2.0 * c[1] / h**2


def check_piece_validity(sys: RelativeSystem, cap: CaptivitySet, piece: SurfaceTrajectory) -> Validity:
    """Curvature at the anchor, containment over ``[t_hat, 0]`` and direction test."""
    curv = _anchor_curvature(piece, cap)
    rmax = float(np.max(piece.projected_norms(cap.projection)))
    margin20 = cap.beta - rmax
    tangent = _tangent_toward_nup(sys, cap, piece.origin)
    if tangent is None:
        margin21 = math.nan
    else:
        z = np.concatenate([piece.states[-1], piece.adjoints[-1]])
        u = piece.u_hf[-1]
        v = sys.coupled_rhs(z, float(u[0]) if len(u) == 1 else u)[: piece.n]
        margin21 = float(v @ tangent)
    return Validity(
        eq18=curv < 0,
        eq20=rmax <= cap.beta * (1 + CONTAINMENT_RTOL),
        eq21=bool(margin21 > 0),
        margin18=-curv,
        margin20=margin20,
        margin21=margin21,
    )


def check_validity(sys: RelativeSystem, cap: CaptivitySet, barrier: ClosedBarrier) -> Validity:
    """Validity of all pieces; margins are the worst over pieces."""
    parts = [check_piece_validity(sys, cap, p) for p in barrier.pieces]
    return Validity(
        eq18=all(v.eq18 for v in parts),
        eq20=all(v.eq20 for v in parts),
        eq21=all(v.eq21 for v in parts),
        margin18=min(v.margin18 for v in parts),
        margin20=min(v.margin20 for v in parts),
        margin21=min(v.margin21 for v in parts),
    )


@dataclass
class Evaluation:
    residual: float
    barrier: ClosedBarrier | None
    status: str


def _evaluate(sys: RelativeSystem, beta: float, manifold: ManifoldSpec, step: float,
              horizon: float | None = None) -> Evaluation:
    cap = CaptivitySet.for_system(sys, beta)
    target = manifold.target_at(beta, cap.projection)
    sentinel = manifold.open_sign * SENTINEL * beta
    try:
        anchors = compute_bnup(sys, cap)
        bar = build_barrier(sys, cap, horizon=horizon, step=step, close_on_nup=False, anchors=anchors)
    except NoBnupError:
        return Evaluation(sentinel, None, "no_bnup")
    except (BarrierOpen, Diverged):
        return Evaluation(sentinel, None, "open")
    if not any(j.kind is JunctionKind.SURFACE for j in bar.junctions):
        # pieces terminated on themselves (cusped surfaces) without meeting
        return Evaluation(sentinel, None, "open")
    d = target - bar.junction
    if cap.norm(bar.junction) > beta * (1 + CONTAINMENT_RTOL) and np.linalg.norm(d) > beta:
        # pieces left C and met on the far side: an exit, not a closure
        return Evaluation(sentinel, None, "exits")
    if manifold.direction is not None:
        res = float(np.asarray(manifold.direction, dtype=float) @ d)
    else:
        res = float(np.linalg.norm(d))
    return Evaluation(res, bar, "closed")


def junction_residual(sys: RelativeSystem, cap: CaptivitySet, theta: float,
                      manifold: ManifoldSpec | None = None, step: float = DEFAULT_STEP) -> float:
    """Signed junction residual at performance ``theta`` and margin ``cap.beta``.

    Raises :class:`NoBnupError` when the BNUP vanishes; an open barrier maps
    to ``open_sign * 10 beta``.
    """
    manifold = manifold or default_manifold(sys)
    s = sys.with_performance(theta)
    compute_bnup(s, cap)
    return _evaluate(s, cap.beta, manifold, step).residual


@dataclass
class SolveReport:
    objective: str
    solved_value: float
    theta: float
    beta: float
    residual: float
    junction: list
    validity: Validity
    iterations: int
    bracket: tuple
    degenerate: bool
    status: str = "success"
    limits: tuple | None = None
    objective_value: float | None = None
    wall_time: float = 0.0
    closure_limited: bool = False
    target_gap: float | None = None
    barrier: ClosedBarrier | None = field(default=None, repr=False)
    system: RelativeSystem | None = field(default=None, repr=False)

    def to_dict(self, timing: bool = False) -> dict:
        d = {
            "objective": self.objective,
            "status": self.status,
            "solved_value": self.solved_value,
            "theta": self.theta,
            "beta": self.beta,
            "residual": self.residual,
            "junction": [float(v) for v in self.junction],
            "validity": self.validity.to_dict(),
            "iterations": self.iterations,
            "bracket": {"lo": self.bracket[0], "hi": self.bracket[1],
                        "f_lo": self.bracket[2], "f_hi": self.bracket[3]},
            "degenerate": self.degenerate,
            "limits": None if self.limits is None else
            {"beta_min": self.limits[0], "theta_max": self.limits[1]},
            "objective_value": self.objective_value,
            "closure_limited": self.closure_limited,
            "target_gap": self.target_gap,
        }
        if timing:
            d["wall_time"] = self.wall_time
        return d


class _Counter:
    def __init__(self, fn):
        self.fn, self.n, self.last = fn, 0, {}

    def __call__(self, v):
        self.n += 1
        ev = self.fn(v)
        self.last[v] = ev
        return ev.residual


def _scan_bracket(f: _Counter, grid: Sequence[float]):
    prev = None
    for v in grid:
        r = f(v)
        if prev is not None and np.sign(r) != np.sign(prev[1]) and r != 0 and prev[1] != 0:
            return prev[0], v, prev[1], r
        if r == 0:
            return v, v, r, r
        prev = (v, r)
    return None


def _finish(f: _Counter, bracket, tol: float):
    a, b, fa, fb = bracket
    if a == b:
        root = a
    else:
        root = brentq(f, a, b, xtol=1e-14, rtol=1e-15, maxiter=MAX_ITER)
    ev = f.last.get(root) or f.fn(root)
    return root, ev


def _solve_bracket(f: _Counter, bracket, tol: float, manifold: ManifoldSpec, beta_of):
    """Root of the residual in ``bracket``, or the margin where the barrier first closes.

    When one end is open the bracket is bisected on closure.  A closed
    midpoint whose residual differs in sign from the closed end exposes a
    genuine crossing, which Brent's method then refines.  Otherwise the
    residual jumps over zero where the barrier first closes with its junction
    already short of the target; that end is accepted if the junction lies on
    the manifold locus.  Returns ``(root, evaluation, locus_gap or None)``.
    """
    a, b, fa, fb = bracket
    ea, eb = f.last.get(a), f.last.get(b)
    if ea is None or eb is None or (ea.barrier is None) == (eb.barrier is None):
        root, ev = _finish(f, bracket, tol)
        return root, ev, None
    lo, hi, ev = (a, b, eb) if eb.barrier is not None else (b, a, ea)
    end = hi
    side = math.copysign(1.0, ev.residual)
    while abs(hi - lo) > tol:
        mid = 0.5 * (lo + hi)
        f(mid)
        e = f.last[mid]
        if e.barrier is None:
            lo = mid
        elif math.copysign(1.0, e.residual) == side:
            hi, ev = mid, e
        else:
            root, ev = _finish(f, (mid, end, e.residual, f.last[end].residual), tol)
            return root, ev, None
    if manifold.locus_distance is None:
        return hi, ev, math.inf
    return hi, ev, manifold.locus_distance(ev.barrier.junction, beta_of(hi))


def _feasible_at(sys, beta, manifold, step, theta_lo) -> tuple[bool, Evaluation]:
    """Margin ``beta`` admits a solution iff the slowest planner leaves slack."""
    ev = _evaluate(sys.with_performance(theta_lo), beta, manifold, step)
    if ev.barrier is None or ev.residual < 0:
        return False, ev
    cap = CaptivitySet.for_system(sys, beta)
    v = check_validity(sys.with_performance(theta_lo), cap, ev.barrier)
    return v.eq18, ev


def _theta_bounds(sys: RelativeSystem):
    lo, hi = sys.performance_range
    if not math.isfinite(hi):
        hi = lo + 100.0 * max(sys.length_scale, 1.0)
    else:
        hi = hi - 1e-6 * (hi - lo)
    return lo, hi


def _validated(report_kwargs, sys_sol, cap, ev, tol, objective, limited=None):
    residual = ev.residual if limited is None else limited[2]
    if abs(residual) > tol:
        if limited is not None:
            raise NoRoot(f"barrier closes off the manifold (distance {residual:.3e})")
        raise NoRoot(f"residual {ev.residual:.3e} above tolerance {tol:.1e} at the root")
    validity = check_validity(sys_sol, cap, ev.barrier)
    bad = validity.first_failure()
    if bad is not None:
        raise ValidityFailed(bad, f"validity condition {bad} violated at the solution")
    rep = SolveReport(
        residual=residual,
        junction=list(ev.barrier.junction),
        validity=validity,
        degenerate=bool(sys_sol.is_degenerate),
        barrier=ev.barrier,
        system=sys_sol,
        **report_kwargs,
    )
    if limited is not None:
        rep.closure_limited, rep.target_gap = True, float(ev.residual)
    if objective is not None:
        rep.objective_value = float(objective(rep))
    return rep


def solve_theta_for_alpha(sys: RelativeSystem, alpha: float, manifold: ManifoldSpec | None = None,
                          tol: float = DEFAULT_TOL, step: float = DEFAULT_STEP, n_scan: int = 8,
                          objective: Callable[[SolveReport], float] | None = None) -> SolveReport:
    """Largest planner performance whose barrier closes at the manifold for margin ``alpha``."""
    t0 = time.perf_counter()
    if not (alpha > 0 and math.isfinite(alpha)):
        raise DomainError("alpha must be positive and finite")
    manifold = manifold or default_manifold(sys)
    lo, hi = _theta_bounds(sys)
    ok, ev_lo = _feasible_at(sys, alpha, manifold, step, lo)
    if not ok:
        raise Infeasible(f"alpha={alpha} is below the smallest feasible margin")
    f = _Counter(lambda th: _evaluate(sys.with_performance(th), alpha, manifold, step))
    f.n, f.last[lo] = 1, ev_lo
    grid = np.linspace(lo, hi, n_scan + 1)[1:]
    br = _scan_bracket(f, [lo, *grid])
    if br is None:
        raise NoRoot("junction residual keeps its sign over the performance range")
    root, ev, gap = _solve_bracket(f, br, tol, manifold, lambda th: alpha)
    limited = None if gap is None else (root, ev, gap)
    s = sys.with_performance(root)
    cap = CaptivitySet.for_system(s, alpha)
    rep = _validated(dict(objective="theta_for_alpha", solved_value=float(root), theta=float(root),
                          beta=float(alpha), iterations=f.n, bracket=tuple(map(float, br))),
                     s, cap, ev, tol, objective, limited)
    rep.wall_time = time.perf_counter() - t0
    return rep


def _beta_grid(sys: RelativeSystem, n: int = 16):
    L = sys.length_scale
    return L * np.geomspace(0.05, 50.0, n)


def solve_alpha_for_theta(sys: RelativeSystem, theta: float, manifold: ManifoldSpec | None = None,
                          tol: float = DEFAULT_TOL, step: float = DEFAULT_STEP,
                          beta_grid: Sequence[float] | None = None,
                          objective: Callable[[SolveReport], float] | None = None) -> SolveReport:
    """Smallest margin whose barrier closes at the manifold for performance ``theta``."""
    t0 = time.perf_counter()
    s = sys.with_performance(theta)
    manifold = manifold or default_manifold(sys)
    f = _Counter(lambda b: _evaluate(s, b, manifold, step))
    grid = list(_beta_grid(s) if beta_grid is None else beta_grid)
    last_err = None
    start = 0
    while True:
        br = _scan_bracket(f, grid[start:])
        if br is None:
            if last_err is not None:
                raise last_err
            if all(f.last[b].barrier is None for b in grid if b in f.last):
                raise Infeasible(f"no closed barrier for theta={theta} over the margin grid")
            raise NoRoot("junction residual keeps its sign over the margin grid")
        root, ev, gap = _solve_bracket(f, br, tol, manifold, lambda b: b)
        limited = None if gap is None else (root, ev, gap)
        cap = CaptivitySet.for_system(s, root)
        try:
            rep = _validated(dict(objective="alpha_for_theta", solved_value=float(root), theta=float(theta),
                                  beta=float(root), iterations=f.n, bracket=tuple(map(float, br))),
                             s, cap, ev, tol, objective, limited)
        except ValidityFailed as exc:
            # a root violating the conditions is skipped; keep scanning upward
            last_err = exc
            start = grid.index(br[1])
            continue
        rep.wall_time = time.perf_counter() - t0
        return rep


def compute_limits(sys: RelativeSystem, manifold: ManifoldSpec | None = None, step: float = 1e-3,
                   rtol: float = 1e-4, beta_cap: float | None = None,
                   beta_probe: Sequence[float] | None = None) -> tuple[float, float]:
    """``(beta_min, theta_max)``.

    ``beta_min`` is the smallest margin admitting a valid solution at the
    slowest performance (bisection on that feasibility predicate).
    ``theta_max`` is the solved performance at ``beta_cap`` (default
    ``100 beta_min``).  Infinite values signal an unbounded probe range.
    """
    manifold = manifold or default_manifold(sys)
    lo, hi = _theta_bounds(sys)
    probe = list(_beta_grid(sys, 24) if beta_probe is None else beta_probe)

    def feasible(b):
        return _feasible_at(sys, b, manifold, step, lo)[0]

    b_hi = next((b for b in probe if feasible(b)), None)
    if b_hi is None:
        return math.inf, -math.inf
    i = probe.index(b_hi)
    b_lo = probe[i - 1] if i > 0 else 0.0
    if b_lo > 0 or feasible(b_hi * 1e-6):
        while b_hi - b_lo > rtol * b_hi:
            mid = 0.5 * (b_lo + b_hi)
            if feasible(mid):
                b_hi = mid
            else:
                b_lo = mid
    beta_min = b_hi
    cap_beta = 100.0 * beta_min if beta_cap is None else beta_cap
    s_hi = sys.with_performance(hi)
    ev_hi = _evaluate(s_hi, cap_beta, manifold, step)
    if ev_hi.barrier is not None and ev_hi.residual >= 0:
        return beta_min, hi
    th_lo, th_hi = lo, hi
    while th_hi - th_lo > rtol * max(abs(hi), 1e-12):
        mid = 0.5 * (th_lo + th_hi)
        ev = _evaluate(sys.with_performance(mid), cap_beta, manifold, step)
        if ev.barrier is not None and ev.residual >= 0:
            th_lo = mid
        else:
            th_hi = mid
    return beta_min, th_lo


@dataclass
class SweepRow:
    beta: float
    theta: float
    junction: list
    residual: float
    validity: Validity | None
    status: str


def _sweep_one(args) -> SweepRow:
    sys, beta, manifold, tol, step = args
    try:
        rep = solve_theta_for_alpha(sys, beta, manifold, tol, step)
        return SweepRow(beta, rep.theta, rep.junction, rep.residual, rep.validity, "success")
    except Infeasible:
        status = "infeasible"
    except NoRoot:
        status = "no_root"
    except ValidityFailed as exc:
        status = f"invalid_{exc.condition}"
    except (IntegrationDrift, Diverged) as exc:
        status = type(exc).__name__.lower()
    return SweepRow(beta, math.nan, [math.nan] * sys.state_dim, math.nan, None, status)


def worker_count() -> int:
    try:
        n = int(os.environ.get("CETEB_THREADS", "1"))
    except ValueError:
        n = 1
    return max(1, min(n, os.cpu_count() or 1))


def sweep(sys: RelativeSystem, betas: Sequence[float], manifold: ManifoldSpec | None = None,
          tol: float = DEFAULT_TOL, step: float = DEFAULT_STEP, workers: int | None = None) -> list[SweepRow]:
    """Tabulate the solved performance over margins (independent solves)."""
    manifold = manifold or default_manifold(sys)
    jobs = [(sys, float(b), manifold, tol, step) for b in betas]
    workers = worker_count() if workers is None else workers
    if workers > 1 and len(jobs) > 1:
        try:
            with ProcessPoolExecutor(max_workers=workers) as ex:
                return list(ex.map(_sweep_one, jobs))
        except (OSError, RuntimeError):
            pass
    return [_sweep_one(j) for j in jobs]
