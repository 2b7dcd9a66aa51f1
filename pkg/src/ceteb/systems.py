"""Relative planner/tracker dynamics.

A :class:`RelativeSystem` bundles the vector field of the relative state, its
state Jacobian, the planner and tracker input boxes, the critical-state
projection ``P`` and the planning-performance parametrisation.  Game-theoretic
quantities (min-max inputs, switching functions) are exposed as overridable
hooks so that models with closed forms, such as :class:`ChauffeurSystem`, can
bypass the generic grid search.
"""

from __future__ import annotations

import abc
import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np

from .errors import DomainError

FD_STEP = 1e-6
_BOX_TOL = 1e-12


@dataclass(frozen=True)
class InputBox:
    """Closed axis-aligned box ``lower <= u <= upper``."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    names: tuple[str, ...] = ()

    def __post_init__(self):
        lo = tuple(float(v) for v in np.atleast_1d(self.lower))
        hi = tuple(float(v) for v in np.atleast_1d(self.upper))
        if len(lo) != len(hi):
            raise DomainError("box bounds have different lengths")
        if any(a > b for a, b in zip(lo, hi)):
            raise DomainError("box lower bound exceeds upper bound")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if not self.names:
            object.__setattr__(self, "names", tuple(f"u[{i}]" for i in range(len(lo))))

    @property
    def dim(self) -> int:
        return len(self.lower)

    def contains(self, u, tol: float = _BOX_TOL) -> bool:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        return bool(np.all(u >= np.subtract(self.lower, tol)) and np.all(u <= np.add(self.upper, tol)))

    def check(self, u, label: str = "input") -> None:
        u = np.atleast_1d(np.asarray(u, dtype=float))
        if u.shape[-1] != self.dim:
            raise DomainError(f"{label} has {u.shape[-1]} components, expected {self.dim}")
        for i, name in enumerate(self.names):
            ui = u[..., i]
            if np.any(ui < self.lower[i] - _BOX_TOL) or np.any(ui > self.upper[i] + _BOX_TOL):
                raise DomainError(
                    f"{label} component {name} outside [{self.lower[i]}, {self.upper[i]}]"
                )

    def issubset(self, other: "InputBox") -> bool:
        return all(a >= c for a, c in zip(self.lower, other.lower)) and all(
            b <= d for b, d in zip(self.upper, other.upper)
        )

    def grid(self, resolution: int) -> np.ndarray:
        """Tensor grid including the box vertices, shape ``(m, dim)``."""
        axes = [np.linspace(a, b, resolution) if b > a else np.array([a])
                for a, b in zip(self.lower, self.upper)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.stack([m.ravel() for m in mesh], axis=-1)


def _as_vec(u) -> np.ndarray:
    return np.atleast_1d(np.asarray(u, dtype=float))


def finite_difference_jacobian(fun: Callable[[np.ndarray], np.ndarray], x, step: float = FD_STEP) -> np.ndarray:
    """Central-difference Jacobian of ``fun`` at ``x``."""
    x = np.asarray(x, dtype=float)
    n = x.size
    cols = []
    for j in range(n):
        e = np.zeros(n)
        e[j] = step
        cols.append((np.asarray(fun(x + e)) - np.asarray(fun(x - e))) / (2 * step))
    return np.stack(cols, axis=-1)


class RelativeSystem(abc.ABC):
    """Abstract relative system ``dx/dt = f(x, u_lf, u_hf)``.

    Subclasses must provide ``state_dim``, ``projection``, ``planner_box``,
    ``tracker_box``, ``theta``, :meth:`vector_field` and :meth:`with_performance`.
    Everything else has a generic default.
    """

    #: grid points per input dimension for the generic min-max search
    grid_resolution: int = 21
    #: sign assigned to sgn(0) in bang-bang tracker laws
    sgn_zero: float = 1.0

    state_dim: int
    planner_box: InputBox
    tracker_box: InputBox
    theta: float

    @property
    @abc.abstractmethod
    def projection(self) -> np.ndarray:
        """Diagonal 0/1 matrix selecting the safety-critical states."""

    @abc.abstractmethod
    def vector_field(self, x, u_lf, u_hf) -> np.ndarray:
        """Relative state derivative."""

    @abc.abstractmethod
    def with_performance(self, theta: float) -> "RelativeSystem":
        """Copy of the system reconfigured for planning performance ``theta``."""

    # -- optional overrides -------------------------------------------------

    def state_jacobian(self, x, u_lf, u_hf) -> np.ndarray:
        return finite_difference_jacobian(lambda y: self.vector_field(y, u_lf, u_hf), x)

    @property
    def performance_range(self) -> tuple[float, float]:
        """Admissible interval of the planning performance."""
        return (0.0, math.inf)

    @property
    def is_degenerate(self) -> bool:
        return False

    @property
    def length_scale(self) -> float:
        """Characteristic length of the relative motion (used for brackets)."""
        return 1.0

    def default_horizon(self, beta: float) -> float:
        return 10.0

    def switching_function(self, x, xi) -> float | None:
        """Continuous function whose sign selects the tracker input, if known."""
        return None

    def check_inputs(self, u_lf, u_hf) -> tuple[np.ndarray, np.ndarray]:
        u_lf, u_hf = _as_vec(u_lf), _as_vec(u_hf)
        self.planner_box.check(u_lf, "planner input u_lf")
        self.tracker_box.check(u_hf, "tracker input u_hf")
        return u_lf, u_hf

    def planner_response(self, x, nu, u_hf) -> np.ndarray:
        """Planner input maximising ``nu . f`` for a fixed tracker input."""
        grid = self.planner_box.grid(self.grid_resolution)
        vals = np.array([nu @ self.vector_field(x, u, u_hf) for u in grid])
        best = grid[int(np.argmax(vals))]
        if self.planner_box.dim == 1 and self.planner_box.upper[0] > self.planner_box.lower[0]:
            from scipy.optimize import minimize_scalar

            h = (self.planner_box.upper[0] - self.planner_box.lower[0]) / (self.grid_resolution - 1)
            lo = max(self.planner_box.lower[0], best[0] - h)
            hi = min(self.planner_box.upper[0], best[0] + h)
            res = minimize_scalar(lambda u: -(nu @ self.vector_field(x, [u], u_hf)),
                                  bounds=(lo, hi), method="bounded", options={"xatol": 1e-12})
            if -res.fun >= vals.max():
                best = np.array([res.x])
        return best

    def minmax_inputs(self, x, nu) -> tuple[np.ndarray, np.ndarray]:
        """Arg-min over u_hf of the max over u_lf of ``nu . f``.

        Generic fallback: tensor grid over the tracker box (vertices included)
        with the planner's best response refined per candidate.
        """
        x = np.asarray(x, dtype=float)
        nu = np.asarray(nu, dtype=float)
        best_val, best = math.inf, None
        for u_hf in self.tracker_box.grid(self.grid_resolution):
            u_lf = self.planner_response(x, nu, u_hf)
            val = float(nu @ self.vector_field(x, u_lf, u_hf))
            if val < best_val - 1e-14:
                best_val, best = val, (u_lf, u_hf)
        return best

    def maxmin_value(self, x, nu) -> float:
        """Max over u_lf of the min over u_hf of ``nu . f`` (grid search)."""
        x = np.asarray(x, dtype=float)
        nu = np.asarray(nu, dtype=float)
        hf = self.tracker_box.grid(self.grid_resolution)
        return max(
            min(float(nu @ self.vector_field(x, u_lf, u)) for u in hf)
            for u_lf in self.planner_box.grid(4 * self.grid_resolution)
        )

    def coupled_rhs(self, z: np.ndarray, u_hf) -> np.ndarray:
        """State/adjoint derivative along a semipermeable surface."""
        n = self.state_dim
        x, xi = z[:n], z[n:]
        u_lf = self.planner_response(x, xi, u_hf)
        dx = self.vector_field(x, u_lf, u_hf)
        dxi = -self.state_jacobian(x, u_lf, u_hf).T @ xi
        return np.concatenate([dx, dxi])

    def nup_tracker_input(self, x, nu) -> np.ndarray:
        """Tracker input on the NUP: min-max minimiser with a second-order tie-break.

        When several tracker inputs attain the minimum, prefer the one whose
        flow lowers the min-max value at a slightly advanced state, i.e. the
        one steering along the boundary into the NUP.
        """
        x = np.asarray(x, dtype=float)
        nu = np.asarray(nu, dtype=float)
        candidates = []
        for u_hf in self.tracker_box.grid(self.grid_resolution):
            u_lf = self.planner_response(x, nu, u_hf)
            candidates.append((float(nu @ self.vector_field(x, u_lf, u_hf)), u_hf, u_lf))
        vmin = min(c[0] for c in candidates)
        ties = [c for c in candidates if c[0] <= vmin + 1e-12 * max(1.0, abs(vmin))]
        if len(ties) == 1:
            return ties[0][1]
        P = self.projection
        eps = 1e-4 * self.length_scale

        def advanced(c):
            f = self.vector_field(x, c[2], c[1])
            y = x + eps * f / max(np.linalg.norm(f), 1e-300)
            py = P @ y
            nu_y = py / np.linalg.norm(py)
            u_hf2, u_lf2 = c[1], self.planner_response(y, nu_y, c[1])
            return float(nu_y @ self.vector_field(y, u_lf2, u_hf2))

        return min(ties, key=advanced)[1]

    def vector_field_many(self, X, U_lf, U_hf) -> np.ndarray:
        return np.array([self.vector_field(x, a, b) for x, a, b in zip(X, U_lf, U_hf)])

    def nup_tracker_input_many(self, X) -> np.ndarray:
        P = self.projection
        out = []
        for x in X:
            px = P @ x
            out.append(self.nup_tracker_input(x, px / np.linalg.norm(px)))
        return np.array(out)

    def escape_heading(self, X) -> np.ndarray:
        """Planner input pushing ``||P x||`` up as fast as possible (tracker idle)."""
        P = self.projection
        out = []
        zero = np.zeros(self.tracker_box.dim)
        for x in X:
            px = P @ x
            out.append(self.planner_response(x, px / max(np.linalg.norm(px), 1e-300), zero))
        return np.array(out)


def eval_dynamics(sys: RelativeSystem, x, u_lf, u_hf) -> np.ndarray:
    """Evaluate ``f(x, u_lf, u_hf)`` after checking the input boxes."""
    u_lf, u_hf = sys.check_inputs(u_lf, u_hf)
    return np.asarray(sys.vector_field(np.asarray(x, dtype=float), u_lf, u_hf), dtype=float)


def eval_jacobian(sys: RelativeSystem, x, u_lf, u_hf) -> np.ndarray:
    """Evaluate ``df/dx`` after checking the input boxes."""
    u_lf, u_hf = sys.check_inputs(u_lf, u_hf)
    return np.asarray(sys.state_jacobian(np.asarray(x, dtype=float), u_lf, u_hf), dtype=float)


@dataclass(frozen=True, eq=False)
class GenericSystem(RelativeSystem):
    """Relative system assembled from user callables.

    ``f(x, u_lf, u_hf, chi)`` receives the parameter vector ``chi`` returned
    by ``performance_mapping(theta)``.  ``planner_box`` may be a fixed box or
    a callable ``chi -> InputBox``.  Without ``jacobian`` a central finite
    difference (step 1e-6) is used, which costs roughly 1e-10 of accuracy per
    entry.
    """

    state_dim: int
    f: Callable[..., Any]
    planner_box_spec: InputBox | Callable[[Any], InputBox]
    tracker_box: InputBox
    projection_diag: Sequence[float]
    theta: float = 0.0
    performance_mapping: Callable[[float], Any] = lambda theta: theta
    jacobian: Callable[..., Any] | None = None
    theta_range: tuple[float, float] = (0.0, math.inf)
    scale: float = 1.0
    grid_resolution: int = 21

    def __post_init__(self):
        diag = np.asarray(self.projection_diag, dtype=float)
        if diag.shape != (self.state_dim,) or not np.all((diag == 0) | (diag == 1)):
            raise DomainError("projection must be a 0/1 diagonal of length state_dim")

    @property
    def chi(self):
        return self.performance_mapping(self.theta)

    @property
    def planner_box(self) -> InputBox:
        spec = self.planner_box_spec
        return spec(self.chi) if callable(spec) else spec

    @property
    def projection(self) -> np.ndarray:
        return np.diag(np.asarray(self.projection_diag, dtype=float))

    @property
    def performance_range(self):
        return self.theta_range

    @property
    def length_scale(self):
        return self.scale

    def vector_field(self, x, u_lf, u_hf):
        return np.asarray(self.f(np.asarray(x, dtype=float), _as_vec(u_lf), _as_vec(u_hf), self.chi), dtype=float)

    def state_jacobian(self, x, u_lf, u_hf):
        if self.jacobian is None:
            return super().state_jacobian(x, u_lf, u_hf)
        return np.asarray(self.jacobian(np.asarray(x, dtype=float), _as_vec(u_lf), _as_vec(u_hf), self.chi), dtype=float)

    def with_performance(self, theta):
        lo, hi = self.theta_range
        if not lo <= theta <= hi:
            raise DomainError(f"theta={theta} outside [{lo}, {hi}]")
        return dataclasses.replace(self, theta=float(theta))


@dataclass(frozen=True)
class ChauffeurSystem(RelativeSystem):
    """Homicidal-chauffeur relative system in the tracker's body frame.

    The reduced state is the planar offset ``(x, y)`` of the planner as seen
    from the tracker, ``y`` pointing along the tracker heading.  The planning
    performance is the planner speed itself, ``theta = v_lf``.
    """

    v_hf: float = 1.0
    omega_max: float = 2 * math.pi
    v_lf: float = 0.0
    sgn_zero: float = 1.0

    state_dim = 2
    planner_box = InputBox((-math.pi,), (math.pi,), ("u_lf",))
    tracker_box = InputBox((-1.0,), (1.0,), ("u_hf",))

    def __post_init__(self):
        for name in ("v_hf", "omega_max", "v_lf"):
            if not math.isfinite(getattr(self, name)):
                raise DomainError(f"{name} must be finite")
        if not 0.0 <= self.v_lf < self.v_hf:
            raise DomainError(f"require 0 <= v_lf < v_hf, got v_lf={self.v_lf}, v_hf={self.v_hf}")
        if not 0.0 < self.omega_max < math.inf:
            raise DomainError("omega_max must be positive and finite")
        if self.sgn_zero not in (-1.0, 1.0):
            raise DomainError("sgn_zero must be +1 or -1")

    @property
    def theta(self) -> float:
        return self.v_lf

    @property
    def projection(self):
        return np.eye(2)

    @property
    def performance_range(self):
        return (0.0, self.v_hf)

    @property
    def is_degenerate(self):
        return self.v_lf == 0.0

    @property
    def length_scale(self):
        """Tracker turning radius."""
        return self.v_hf / self.omega_max

    def default_horizon(self, beta):
        return 3 * 2 * math.pi / self.omega_max + 10 * beta / self.v_hf

    def with_performance(self, theta):
        return dataclasses.replace(self, v_lf=float(theta))

    def planner_input_set(self) -> InputBox:
        return self.planner_box

    def vector_field(self, x, u_lf, u_hf):
        x = np.asarray(x, dtype=float)
        u_lf = np.asarray(u_lf, dtype=float)
        u_hf = np.asarray(u_hf, dtype=float)
        if u_lf.ndim and u_lf.shape[-1:] == (1,):
            u_lf = u_lf[..., 0]
        if u_hf.ndim and u_hf.shape[-1:] == (1,):
            u_hf = u_hf[..., 0]
        w = self.omega_max * u_hf
        return np.stack(
            [-x[..., 1] * w + self.v_lf * np.sin(u_lf),
             x[..., 0] * w + self.v_lf * np.cos(u_lf) - self.v_hf],
            axis=-1,
        )

    def vector_field_many(self, X, U_lf, U_hf):
        return self.vector_field(X, U_lf, U_hf)

    def state_jacobian(self, x, u_lf, u_hf):
        w = self.omega_max * float(_as_vec(u_hf)[0])
        return np.array([[0.0, -w], [w, 0.0]])

    def switching_function(self, x, xi):
        return xi[0] * x[1] - xi[1] * x[0]

    def sgn(self, s: float) -> float:
        if s > 0:
            return 1.0
        if s < 0:
            return -1.0
        return self.sgn_zero

    def planner_response(self, x, nu, u_hf):
        return np.array([math.atan2(nu[0], nu[1])])

    def minmax_inputs(self, x, nu):
        u_lf = math.atan2(nu[0], nu[1])
        u_hf = self.sgn(nu[0] * x[1] - nu[1] * x[0])
        return np.array([u_lf]), np.array([u_hf])

    def minmax_value(self, x, nu) -> float:
        """Closed form ``v_lf |nu| - omega |nu_y x - nu_x y| - v_hf nu_y``."""
        cross = nu[1] * x[0] - nu[0] * x[1]
        return self.v_lf * math.hypot(nu[0], nu[1]) - self.omega_max * abs(cross) - self.v_hf * nu[1]

    def maxmin_value(self, x, nu):
        # separable in (u_lf, u_hf): the inner min does not depend on u_lf
        return self.minmax_value(x, nu)

    def coupled_rhs(self, z, u_hf):
        x, y, a, c = z[0], z[1], z[2], z[3]
        w = self.omega_max * u_hf
        r = math.hypot(a, c)
        return np.array([
            -y * w + self.v_lf * a / r,
            x * w + self.v_lf * c / r - self.v_hf,
            -c * w,
            a * w,
        ])

    def rk4_step(self, z, h, u_hf):
        # same scheme as the generic step, unrolled on floats
        w = self.omega_max * float(u_hf)
        v, vh = self.v_lf, self.v_hf

        def f(x, y, a, c):
            r = math.hypot(a, c)
            return -y * w + v * a / r, x * w + v * c / r - vh, -c * w, a * w

        x, y, a, c = float(z[0]), float(z[1]), float(z[2]), float(z[3])
        h2 = 0.5 * h
        p1 = f(x, y, a, c)
        p2 = f(x + h2 * p1[0], y + h2 * p1[1], a + h2 * p1[2], c + h2 * p1[3])
        p3 = f(x + h2 * p2[0], y + h2 * p2[1], a + h2 * p2[2], c + h2 * p2[3])
        p4 = f(x + h * p3[0], y + h * p3[1], a + h * p3[2], c + h * p3[3])
        h6 = h / 6.0
        return np.array([
            x + h6 * (p1[0] + 2 * p2[0] + 2 * p3[0] + p4[0]),
            y + h6 * (p1[1] + 2 * p2[1] + 2 * p3[1] + p4[1]),
            a + h6 * (p1[2] + 2 * p2[2] + 2 * p3[2] + p4[2]),
            c + h6 * (p1[3] + 2 * p2[3] + 2 * p3[3] + p4[3]),
        ])

    def nup_tracker_input(self, x, nu):
        u = self.sgn(nu[0] * x[1] - nu[1] * x[0])
        cross = nu[1] * x[0] - nu[0] * x[1]
        if abs(cross) > 1e-12 * math.hypot(x[0], x[1]):
            return np.array([u])
        # rotation term vanishes: turn so the state slides toward the NUP apex
        return np.array([self.sgn(x[0])])

    def nup_tracker_input_many(self, X):
        X = np.asarray(X, dtype=float)
        s = np.sign(X[:, 0])
        s[s == 0] = self.sgn_zero
        return s[:, None]

    def escape_heading(self, X):
        X = np.asarray(X, dtype=float)
        return np.arctan2(X[:, 0], X[:, 1])[:, None]

    # -- closed forms -------------------------------------------------------

    def bnup_closed_form(self, beta: float) -> np.ndarray:
        """The two BNUP states, right one first."""
        r = self.v_lf / self.v_hf
        xb = beta * math.sqrt(1.0 - r * r)
        return np.array([[xb, beta * r], [-xb, beta * r]])

    def nup_threshold(self, beta: float) -> float:
        """NUP is ``{x on the boundary : y >= beta v_lf / v_hf}``."""
        return beta * self.v_lf / self.v_hf

    def relative_state(self, x_lf, x_hf) -> np.ndarray:
        """Planner position in the tracker frame (heading state dropped)."""
        x_lf = np.asarray(x_lf, dtype=float)
        x_hf = np.asarray(x_hf, dtype=float)
        if x_lf.shape[-1] != 2 or x_hf.shape[-1] != 3:
            raise DomainError("expected planner state (x, y) and tracker state (x, y, psi)")
        dx = x_lf[..., 0] - x_hf[..., 0]
        dy = x_lf[..., 1] - x_hf[..., 1]
        psi = x_hf[..., 2]
        c, s = np.cos(psi), np.sin(psi)
        return np.stack([c * dx - s * dy, s * dx + c * dy], axis=-1)

    def to_dict(self) -> dict:
        return {"model": "chauffeur", "v_hf": self.v_hf, "omega_max": self.omega_max, "v_lf": self.v_lf}


def relative_state(sys: RelativeSystem, x_lf, x_hf) -> np.ndarray:
    """Relative state of a planner/tracker pair."""
    fn = getattr(sys, "relative_state", None)
    if fn is None:
        raise NotImplementedError("this system does not define its relative-state map")
    return fn(x_lf, x_hf)


_CHAUFFEUR_KEYS = {"model", "v_hf", "omega_max", "v_lf"}


def system_from_dict(doc: dict) -> RelativeSystem:
    """Build a system from its JSON description; unknown keys are rejected."""
    if not isinstance(doc, dict):
        raise DomainError("model description must be a JSON object")
    model = doc.get("model")
    if model != "chauffeur":
        raise DomainError(f"unknown model {model!r}")
    unknown = set(doc) - _CHAUFFEUR_KEYS
    if unknown:
        raise DomainError(f"unknown keys in model description: {sorted(unknown)}")
    kwargs = {}
    for k in ("v_hf", "omega_max", "v_lf"):
        if k in doc:
            v = doc[k]
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise DomainError(f"{k} must be a number")
            kwargs[k] = float(v)
    return ChauffeurSystem(**kwargs)


def load_system(path: str | Path) -> RelativeSystem:
    with open(path) as fh:
        return system_from_dict(json.load(fh))
