"""Controlled sweeping dynamics by exponential penalty, with a Moreau
catching-up oracle.

The penalized vector field is

    dx/dt = f(t, x, u) - sum_i gamma exp(gamma (psi_i(t, x) - sigma)) grad psi_i

with capped constraint functions psi_i.  For a pressure bound mu (estimated by
sampling) and gradient floor eta, the level mu(gamma) = log(mu / (eta^2 gamma))
/ gamma defines inflated sets C_gamma(t) = {max_i psi_i - sigma <= mu(gamma)}
which trajectories started inside never leave; the multipliers
xi_i = gamma exp(gamma (psi_i - sigma)) then stay below mu / eta^2.  Both facts
are asserted at every reporting node.

The independent reference is Moreau's catching-up scheme: an explicit Euler
predictor followed by projection onto C(t_{j+1}); its discrete multipliers are
the projection coefficients divided by the step.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from . import expr as ex
from .sets import MovingSet, ProjectionError

__all__ = [
    "BoxControlSet",
    "FiniteControlSet",
    "PointSet",
    "FinitePointSet",
    "BallSet",
    "InequalitySet",
    "Problem",
    "PiecewiseConstantControl",
    "PenaltySchedule",
    "MuEstimate",
    "StepControl",
    "Trajectory",
    "ConvergenceReport",
    "ScheduleInfeasibleError",
    "IntegrationError",
    "InvarianceError",
    "mu_of_gamma",
    "make_schedule",
    "build_schedule",
    "estimate_mu",
    "estimate_dynamics_bound",
    "admissible_start",
    "integrate_penalized",
    "catching_up",
    "convergence_sweep",
    "sup_error",
    "parallel_map",
]


class ScheduleInfeasibleError(ValueError):
    """Penalty schedule violates a band or inclusion requirement."""


class IntegrationError(RuntimeError):
    """The stiff integrator could not complete a run."""


class InvarianceError(IntegrationError):
    """A computed trajectory left its inflated set or exceeded the
    multiplier cap; indicates an inconsistent mu/eta/gamma combination."""


# ---------------------------------------------------------------------------
# control sets, endpoint sets, problems
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BoxControlSet:
    lo: tuple
    hi: tuple

    def __post_init__(self):
        if len(self.lo) != len(self.hi):
            raise ValueError("control box bounds must have equal length")
        if any(a > b for a, b in zip(self.lo, self.hi)):
            raise ValueError("control box has lo > hi")

    @property
    def m(self) -> int:
        return len(self.lo)

    def contains(self, u, tol: float = 1e-9) -> bool:
        u = np.asarray(u, dtype=float)
        return bool(
            np.all(u >= np.array(self.lo) - tol) and np.all(u <= np.array(self.hi) + tol)
        )

    def default(self) -> np.ndarray:
        return 0.5 * (np.array(self.lo, dtype=float) + np.array(self.hi, dtype=float))

    def grid(self, resolution: int = 33) -> np.ndarray:
        axes = [np.linspace(a, b, resolution) for a, b in zip(self.lo, self.hi)]
        mesh = np.meshgrid(*axes, indexing="ij")
        return np.column_stack([mm.ravel() for mm in mesh])


@dataclass(frozen=True)
class FiniteControlSet:
    points: tuple

    def __post_init__(self):
        if not self.points:
            raise ValueError("finite control set needs at least one point")

    @property
    def m(self) -> int:
        return len(self.points[0])

    def contains(self, u, tol: float = 1e-9) -> bool:
        u = np.asarray(u, dtype=float)
        pts = np.array(self.points, dtype=float)
        return bool(np.min(np.linalg.norm(pts - u, axis=1)) <= tol)

    def default(self) -> np.ndarray:
        return np.array(self.points[0], dtype=float)

    def grid(self, resolution: int = 0) -> np.ndarray:
        return np.array(self.points, dtype=float)


@dataclass(frozen=True)
class PointSet:
    point: tuple

    def start(self) -> np.ndarray:
        return np.array(self.point, dtype=float)

    def contains(self, x, tol: float = 1e-9) -> bool:
        return bool(np.linalg.norm(np.asarray(x) - self.start()) <= tol)


@dataclass(frozen=True)
class FinitePointSet:
    points: tuple

    def start(self) -> np.ndarray:
        return np.array(self.points[0], dtype=float)

    def contains(self, x, tol: float = 1e-9) -> bool:
        pts = np.array(self.points, dtype=float)
        return bool(np.min(np.linalg.norm(pts - np.asarray(x), axis=1)) <= tol)


@dataclass(frozen=True)
class BallSet:
    center: tuple
    radius: float

    def start(self) -> np.ndarray:
        return np.array(self.center, dtype=float)

    def contains(self, x, tol: float = 1e-9) -> bool:
        return bool(np.linalg.norm(np.asarray(x) - self.start()) <= self.radius + tol)


class InequalitySet:
    """Conjunction of expression inequalities g_j(x) <= 0 in x1..xn."""

    def __init__(self, exprs: Sequence[ex.Expr], n: int):
        self.exprs = tuple(exprs)
        self.n = int(n)
        names = [f"x{j + 1}" for j in range(n)]
        for e in self.exprs:
            extra = e.free_vars - set(names)
            if extra:
                raise ValueError(f"terminal inequality uses unknown variables {sorted(extra)}")
        self.grads = [[e.diff(v) for v in names] for e in self.exprs]
        self._names = names

    def _env(self, x) -> dict:
        return {name: float(v) for name, v in zip(self._names, np.asarray(x, dtype=float))}

    def values(self, x) -> np.ndarray:
        env = self._env(x)
        return np.array([e.eval(env) for e in self.exprs], dtype=float)

    def contains(self, x, tol: float = 1e-6) -> bool:
        return bool(np.max(self.values(x)) <= tol)

    def gradients(self, x) -> np.ndarray:
        env = self._env(x)
        return np.array([[g.eval(env) for g in row] for row in self.grads], dtype=float)


def _check_vars(exprs: Sequence[ex.Expr], allowed: set, what: str) -> None:
    for e in exprs:
        extra = e.free_vars - allowed
        if extra:
            raise ValueError(f"{what} uses unknown variables {sorted(extra)}")


@dataclass(frozen=True)
class Problem:
    """Sweeping optimal-control problem data."""

    n: int
    m: int
    dynamics: tuple
    moving_set: MovingSet
    control_set: BoxControlSet | FiniteControlSet
    initial_set: PointSet | FinitePointSet | BallSet
    terminal_set: InequalitySet | None
    cost: ex.Expr
    horizon: float
    mu: float | None = None

    def __post_init__(self):
        if self.n < 1 or self.m < 1:
            raise ValueError("state and control dimensions must be at least 1")
        if len(self.dynamics) != self.n:
            raise ValueError("dynamics must provide one expression per state dimension")
        if self.control_set.m != self.m:
            raise ValueError("control set dimension does not match m")
        if self.moving_set.n != self.n:
            raise ValueError("moving set dimension does not match n")
        if not (self.horizon > 0):
            raise ValueError("horizon must be positive")
        x_names = [f"x{j + 1}" for j in range(self.n)]
        u_names = [f"u{j + 1}" for j in range(self.m)]
        _check_vars(self.dynamics, set(["t"] + x_names + u_names), "dynamics")
        _check_vars([self.cost], set(x_names), "cost")
        start = self.initial_set.start()
        if len(start) != self.n:
            raise ValueError("initial set dimension does not match n")
        vals = self.moving_set.capped_values(0.0, start)
        if np.max(vals) > 1e-7:
            raise ValueError("initial set is not contained in the moving set at t = 0")

    # compiled dynamics, built lazily and cached on the instance -------------

    @property
    def _f_fn(self):
        fn = getattr(self, "_f_fn_cache", None)
        if fn is None:
            names = ["t"] + [f"x{j + 1}" for j in range(self.n)] + [
                f"u{j + 1}" for j in range(self.m)
            ]
            fn = ex.compile_exprs(list(self.dynamics), names, "dynamics")
            object.__setattr__(self, "_f_fn_cache", fn)
        return fn

    def f(self, t: float, x, u) -> np.ndarray:
        out = self._f_fn(ex.SCALAR_BACKEND, t, *np.asarray(x, dtype=float), *np.asarray(u, dtype=float))
        return np.array(out, dtype=float)

    def f_batch(self, t, X, U) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        U = np.asarray(U, dtype=float)
        B = X.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=float), (B,))
        cols = [t] + [X[:, j] for j in range(self.n)] + [U[:, j] for j in range(self.m)]
        with np.errstate(divide="raise", invalid="raise"):
            out = self._f_fn(ex.ARRAY_BACKEND, *cols)
        return np.column_stack([np.broadcast_to(np.asarray(v, dtype=float), (B,)) for v in out])

    def cost_value(self, x) -> float:
        env = {f"x{j + 1}": float(v) for j, v in enumerate(np.asarray(x, dtype=float))}
        return float(self.cost.eval(env))

    def cost_gradient(self, x) -> np.ndarray:
        env = {f"x{j + 1}": float(v) for j, v in enumerate(np.asarray(x, dtype=float))}
        return np.array(
            [self.cost.diff(f"x{j + 1}").eval(env) for j in range(self.n)], dtype=float
        )

    def start_point(self) -> np.ndarray:
        return self.initial_set.start()

    def with_mu(self, mu: float) -> "Problem":
        return replace(self, mu=float(mu))

    def require_mu(self) -> float:
        if self.mu is None:
            raise ValueError("problem.mu is unset; run estimate_mu first")
        return float(self.mu)


# ---------------------------------------------------------------------------
# controls
# ---------------------------------------------------------------------------


class PiecewiseConstantControl:
    """Piecewise-constant control on a reporting grid.

    ``times`` has N+1 strictly increasing nodes; ``values[j]`` applies on
    [times[j], times[j+1]).  Integrators report at exactly these nodes and
    never step across a breakpoint.
    """

    def __init__(self, times, values):
        self.times = np.asarray(times, dtype=float)
        self.values = np.atleast_2d(np.asarray(values, dtype=float))
        if self.values.shape[0] == 1 and len(self.times) != 2 and self.values.shape[1] == len(self.times) - 1:
            self.values = self.values.T
        if len(self.times) < 2 or np.any(np.diff(self.times) <= 0):
            raise ValueError("control grid must be strictly increasing with >= 2 nodes")
        if self.values.shape[0] != len(self.times) - 1:
            raise ValueError("need one control value per grid interval")

    @property
    def m(self) -> int:
        return self.values.shape[1]

    def value_at(self, t: float) -> np.ndarray:
        j = int(np.searchsorted(self.times, t, side="right") - 1)
        j = min(max(j, 0), self.values.shape[0] - 1)
        return self.values[j]

    @staticmethod
    def constant(u, horizon: float, intervals: int = 100) -> "PiecewiseConstantControl":
        u = np.atleast_1d(np.asarray(u, dtype=float))
        times = np.linspace(0.0, horizon, intervals + 1)
        return PiecewiseConstantControl(times, np.tile(u, (intervals, 1)))


# ---------------------------------------------------------------------------
# penalty schedules
# ---------------------------------------------------------------------------


def mu_of_gamma(mu: float, eta: float, gamma: float) -> float:
    """Band level log(mu / (eta^2 gamma)) / gamma of the inflated sets."""
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    return math.log(mu / (eta * eta * gamma)) / gamma


@dataclass(frozen=True)
class PenaltySchedule:
    """Sharpness sequence gammas with offsets sigmas and band levels mus."""

    mu: float
    eta: float
    gammas: tuple
    sigmas: tuple
    mus: tuple

    def __post_init__(self):
        g = np.array(self.gammas, dtype=float)
        if len(g) == 0 or np.any(g <= 0) or np.any(np.diff(g) <= 0):
            raise ValueError("gammas must be positive and strictly increasing")
        if len(self.sigmas) != len(g) or len(self.mus) != len(g):
            raise ValueError("sigmas and mus must match gammas in length")
        if any(s <= 0 for s in self.sigmas):
            raise ValueError("sigmas must be positive")

    def __len__(self) -> int:
        return len(self.gammas)


def make_schedule(
    mu: float, eta: float, gammas: Sequence[float], sigmas: Sequence[float] | None = None,
    c_margin: float = 1.0,
) -> PenaltySchedule:
    """Schedule with sigma_k = c_margin / gamma_k unless overridden."""
    gammas = tuple(float(g) for g in gammas)
    if sigmas is None:
        sigmas = tuple(c_margin / g for g in gammas)
    else:
        sigmas = tuple(float(s) for s in sigmas)
    mus = tuple(mu_of_gamma(mu, eta, g) for g in gammas)
    return PenaltySchedule(mu=float(mu), eta=float(eta), gammas=gammas, sigmas=sigmas, mus=mus)


def build_schedule(
    problem: Problem,
    gammas: Sequence[float],
    c_margin: float = 1.0,
    mu: float | None = None,
    eta: float | None = None,
    samples: int = 2000,
    seed: int = 0,
) -> PenaltySchedule:
    """Validated schedule: band levels stay above -beta and the moving set is
    strictly inside every inflated set (checked on sampled points of C(t),
    boundary included).  Raises ScheduleInfeasibleError otherwise; use
    make_schedule to bypass validation for exploratory sweeps.
    """
    mu = float(mu) if mu is not None else problem.require_mu()
    eta = float(eta) if eta is not None else problem.moving_set.a1.eta
    beta = problem.moving_set.a1.beta
    sched = make_schedule(mu, eta, gammas, c_margin=c_margin)
    for g, s, mk in zip(sched.gammas, sched.sigmas, sched.mus):
        if mk <= -beta:
            raise ScheduleInfeasibleError(
                f"gamma={g}: band level {mk:.4g} is not above -beta={-beta}; "
                f"increase gamma or beta"
            )
    worst = _worst_feasible_value(problem, samples, seed)
    for g, s, mk in zip(sched.gammas, sched.sigmas, sched.mus):
        if worst - s >= mk:
            raise ScheduleInfeasibleError(
                f"gamma={g}: inclusion of the moving set fails (sampled value "
                f"{worst:.4g} >= sigma + level = {s + mk:.4g}); requires "
                f"gamma < (mu/eta^2) exp(c_margin) = {mu / eta**2 * math.exp(c_margin):.4g}"
            )
    return sched


def _worst_feasible_value(problem: Problem, samples: int, seed: int) -> float:
    """Largest capped constraint value over sampled points of C(t)."""
    mset = problem.moving_set
    rng_t = np.random.default_rng(seed)
    rng_x = np.random.default_rng(seed + 1)
    B = int(samples)
    t = rng_t.uniform(0.0, problem.horizon, size=B)
    v = rng_x.normal(size=(B, mset.n))
    v /= np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-300)
    X = v * mset.bounding_radius * rng_x.uniform(0.0, 1.0, size=(B, 1)) ** (1.0 / mset.n)
    vals = mset.capped_values_batch(t, X)
    worst = -np.inf
    mx = np.max(vals, axis=1)
    inside = mx <= 0.0
    if np.any(inside):
        worst = float(np.max(mx[inside]))
    # boundary points: project a handful of outside samples
    out_idx = np.nonzero(~inside)[0][:200]
    for b in out_idx:
        try:
            xb = mset.project(float(t[b]), X[b])
        except ProjectionError:
            continue
        worst = max(worst, float(np.max(mset.capped_values(float(t[b]), xb))))
    return worst


# ---------------------------------------------------------------------------
# pressure bound mu
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MuEstimate:
    """Sampled bound on |grad psi| |f| + |dpsi/dt| + 1 over the contact band."""

    value: float
    count: int
    seed: int
    t: float
    x: tuple
    u: tuple
    index: int

    def to_dict(self) -> dict:
        return {
            "value": self.value,
            "count": self.count,
            "seed": self.seed,
            "t": self.t,
            "x": list(self.x),
            "u": list(self.u),
            "index": self.index,
        }


def estimate_mu(problem: Problem, samples: int = 3000, seed: int = 0) -> MuEstimate:
    """Estimate the band pressure bound by sampling.

    Points are drawn in the bounding ball; infeasible draws are projected onto
    the moving set so the boundary (where contact pressure lives) is densely
    covered.  For each point and each constraint whose raw value lies in
    [-beta, beta], the capped pressure |grad psi| |f| + |dpsi/dt| is evaluated
    at a random admissible control; the estimate is the maximum plus one.
    Nested seeded streams make the estimate monotone under refinement.
    """
    mset = problem.moving_set
    beta = mset.a1.beta
    B = int(samples)
    rng_t = np.random.default_rng(seed)
    rng_x = np.random.default_rng(seed + 1)
    rng_u = np.random.default_rng(seed + 2)

    t = rng_t.uniform(0.0, problem.horizon, size=B)
    v = rng_x.normal(size=(B, mset.n))
    v /= np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-300)
    X = v * mset.bounding_radius * rng_x.uniform(0.0, 1.0, size=(B, 1)) ** (1.0 / mset.n)
    if isinstance(problem.control_set, BoxControlSet):
        U = rng_u.uniform(
            np.array(problem.control_set.lo), np.array(problem.control_set.hi), size=(B, problem.m)
        )
    else:
        pts = np.array(problem.control_set.points, dtype=float)
        U = pts[rng_u.integers(0, len(pts), size=B)]

    vals = mset.capped_values_batch(t, X)
    outside = np.max(vals, axis=1) > 0.0
    for b in np.nonzero(outside)[0]:
        try:
            X[b] = mset.project(float(t[b]), X[b])
        except ProjectionError:
            X[b] = problem.start_point()

    raw_vals, raw_grads, raw_dts = mset.raw_batch(t, X)  # (B,I), (B,I,n), (B,I)
    c1 = mset.cap.d1(raw_vals)
    grad_norm = np.linalg.norm(raw_grads, axis=2) * c1
    dts = np.abs(raw_dts) * c1
    fnorm = np.linalg.norm(problem.f_batch(t, X, U), axis=1)
    pressure = grad_norm * fnorm[:, None] + dts  # (B, I)
    band = (raw_vals >= -beta) & (raw_vals <= beta)
    pressure = np.where(band, pressure, -np.inf)
    flat = int(np.argmax(pressure))
    b, i = divmod(flat, mset.I)
    best = float(pressure[b, i])
    if not np.isfinite(best):
        best = 0.0
        b, i = 0, 0
    return MuEstimate(
        value=best + 1.0,
        count=B,
        seed=seed,
        t=float(t[b]),
        x=tuple(float(z) for z in X[b]),
        u=tuple(float(z) for z in U[b]),
        index=int(i),
    )


def estimate_dynamics_bound(problem: Problem, samples: int = 2000, seed: int = 0) -> float:
    """Sampled bound on |f| over the bounding ball and control set; errors on
    non-finite values."""
    mset = problem.moving_set
    rng = np.random.default_rng(seed)
    B = int(samples)
    t = rng.uniform(0.0, problem.horizon, size=B)
    v = rng.normal(size=(B, mset.n))
    v /= np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-300)
    X = v * mset.bounding_radius * rng.uniform(0.0, 1.0, size=(B, 1)) ** (1.0 / mset.n)
    if isinstance(problem.control_set, BoxControlSet):
        U = rng.uniform(
            np.array(problem.control_set.lo), np.array(problem.control_set.hi), size=(B, problem.m)
        )
    else:
        pts = np.array(problem.control_set.points, dtype=float)
        U = pts[rng.integers(0, len(pts), size=B)]
    F = problem.f_batch(t, X, U)
    bound = float(np.max(np.linalg.norm(F, axis=1)))
    if not np.isfinite(bound):
        raise ValueError("dynamics are unbounded or undefined on the bounding ball")
    return bound


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------


@dataclass
class Trajectory:
    """States at reporting nodes, interval controls, and node multipliers.

    gamma = sigma = 0 identifies catching-up output; xis then hold the
    discrete projection multipliers divided by the step.
    """

    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    xis: np.ndarray
    gamma: float
    sigma: float

    def state_at(self, t) -> np.ndarray:
        t = np.atleast_1d(np.asarray(t, dtype=float))
        cols = [np.interp(t, self.times, self.states[:, j]) for j in range(self.states.shape[1])]
        out = np.column_stack(cols)
        return out[0] if out.shape[0] == 1 else out

    @property
    def terminal_state(self) -> np.ndarray:
        return self.states[-1]


def sup_error(a: Trajectory, b: Trajectory) -> float:
    """Sup over nodes of the Euclidean state gap, on the coarser grid."""
    coarse = a.times if len(a.times) <= len(b.times) else b.times
    xa = a.state_at(coarse)
    xb = b.state_at(coarse)
    return float(np.max(np.linalg.norm(np.atleast_2d(xa) - np.atleast_2d(xb), axis=1)))


# ---------------------------------------------------------------------------
# stiff penalized integration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StepControl:
    rtol: float = 1e-8
    atol: float = 1e-11
    dt_min: float = 1e-13
    dt_init: float | None = None
    max_steps: int = 5_000_000
    safety: float = 0.9
    ceiling_factor: float = 0.5
    force_implicit: bool = False


# Cash-Karp 5(4) embedded pair
_CK_C = (0.0, 1.0 / 5.0, 3.0 / 10.0, 3.0 / 5.0, 1.0, 7.0 / 8.0)
_CK_A = (
    (),
    (1.0 / 5.0,),
    (3.0 / 40.0, 9.0 / 40.0),
    (3.0 / 10.0, -9.0 / 10.0, 6.0 / 5.0),
    (-11.0 / 54.0, 5.0 / 2.0, -70.0 / 27.0, 35.0 / 27.0),
    (1631.0 / 55296.0, 175.0 / 512.0, 575.0 / 13824.0, 44275.0 / 110592.0, 253.0 / 4096.0),
)
_CK_B5 = (37.0 / 378.0, 0.0, 250.0 / 621.0, 125.0 / 594.0, 0.0, 512.0 / 1771.0)
_CK_B4 = (2825.0 / 27648.0, 0.0, 18575.0 / 48384.0, 13525.0 / 55296.0, 277.0 / 14336.0, 1.0 / 4.0)


def _make_penalized_rhs(problem: Problem, gamma: float, sigma: float):
    """Scalar-path penalized vector field; returns (dx, max capped value)."""
    mset = problem.moving_set
    vg_fn = mset._vg_fn
    f_fn = problem._f_fn
    cap = mset.cap
    I, n = mset.I, mset.n
    backend = ex.SCALAR_BACKEND
    exp = math.exp

    def rhs(t: float, x: np.ndarray, u: tuple):
        xs = x.tolist()
        fx = f_fn(backend, t, *xs, *u)
        out = vg_fn(backend, t, *xs)
        dx = list(fx)
        vmax = -math.inf
        for i in range(I):
            cv = cap.value_s(out[i])
            if cv > vmax:
                vmax = cv
            arg = gamma * (cv - sigma)
            if arg < -60.0:
                continue
            w = gamma * exp(arg) * cap.d1_s(out[i])
            base = I + i * n
            for j in range(n):
                dx[j] -= w * out[base + j]
        return np.array(dx), vmax

    return rhs


def _node_xis(problem: Problem, gamma: float, sigma: float, t: float, x: np.ndarray) -> np.ndarray:
    vals = problem.moving_set.capped_values(t, x)
    return gamma * np.exp(np.minimum(gamma * (vals - sigma), 700.0))


def admissible_start(
    problem: Problem, gamma: float, sigma: float, x0=None, t0: float = 0.0
) -> np.ndarray:
    """Nearest admissible start inside the inflated set C_gamma(t0).

    Boundary starts of C(t0) fall outside C_gamma(t0) once gamma is large;
    projecting onto the inflated set realizes an admissible sequence of
    starting points converging to x0 as gamma grows.
    """
    mu = problem.require_mu()
    eta = problem.moving_set.a1.eta
    level = sigma + mu_of_gamma(mu, eta, gamma)
    x0 = np.asarray(x0 if x0 is not None else problem.start_point(), dtype=float)
    beta = problem.moving_set.a1.beta
    if level <= -2.0 * beta + 1e-12:
        raise ScheduleInfeasibleError(
            f"inflated set is empty: sigma + level = {level:.4g} <= -2 beta"
        )
    vals = problem.moving_set.capped_values(t0, x0)
    if np.max(vals) <= level:
        return x0
    return problem.moving_set.project(t0, x0, level=level)


def integrate_penalized(
    problem: Problem,
    control: PiecewiseConstantControl,
    gamma: float,
    sigma: float,
    step_control: StepControl | None = None,
    start=None,
) -> Trajectory:
    """Integrate the penalized dynamics on the control's reporting grid.

    Adaptive embedded Runge-Kutta with a step ceiling of
    0.5/gamma * min(1, eta^2/mu) near the contact band; if the error
    controller rejects more than half of its attempts on an interval, the
    remainder of that interval is advanced by an implicit-Euler step on the
    penalty term (Newton), keeping the drift explicit.  Invariance in the
    inflated set and the multiplier cap are asserted at every node.
    """
    sc = step_control or StepControl()
    mu = problem.require_mu()
    eta = problem.moving_set.a1.eta
    beta = problem.moving_set.a1.beta
    gamma = float(gamma)
    sigma = float(sigma)
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    mu_k = mu_of_gamma(mu, eta, gamma)
    level = sigma + mu_k
    if level <= -2.0 * beta + 1e-12:
        raise ScheduleInfeasibleError(
            f"inflated set is empty at gamma={gamma}: sigma + level = {level:.4g}"
        )
    xi_cap = mu / (eta * eta)

    times = control.times
    if abs(times[0]) > 1e-12 or abs(times[-1] - problem.horizon) > 1e-9:
        raise ValueError("control grid must span [0, horizon]")
    if control.m != problem.m:
        raise ValueError("control dimension does not match problem.m")
    for row in control.values:
        if not problem.control_set.contains(row, tol=1e-9):
            raise ValueError("control values leave the admissible control set")

    x = np.asarray(start if start is not None else problem.start_point(), dtype=float).copy()
    v0 = np.max(problem.moving_set.capped_values(times[0], x))
    if v0 > level + 1e-9:
        raise IntegrationError(
            f"start lies outside the inflated set (value {v0:.4g} > {level:.4g}); "
            "use admissible_start"
        )

    rhs = _make_penalized_rhs(problem, gamma, sigma)
    ceiling = sc.ceiling_factor / gamma * min(1.0, eta * eta / mu)
    trigger = level - 9.2 / gamma  # within 1e-4 of the multiplier cap

    N = len(times) - 1
    states = np.empty((N + 1, problem.n))
    xis = np.empty((N + 1, problem.moving_set.I))
    states[0] = x
    xis[0] = _node_xis(problem, gamma, sigma, times[0], x)

    total_steps = 0
    dt = sc.dt_init if sc.dt_init is not None else min(ceiling, (times[-1] - times[0]) / max(N, 1))
    for j in range(N):
        t0, t1 = float(times[j]), float(times[j + 1])
        u = tuple(control.values[j])
        if sc.force_implicit:
            x = _implicit_segment(problem, rhs, t0, t1, x, u, gamma, sigma, ceiling)
        else:
            x, dt, steps, switched = _advance_interval(
                rhs, t0, t1, x, u, dt, sc, ceiling, trigger
            )
            total_steps += steps
            if total_steps > sc.max_steps:
                raise IntegrationError("step budget exhausted")
            if switched:
                x = _implicit_segment(problem, rhs, switched[0], t1, switched[1], u, gamma, sigma, ceiling)
        states[j + 1] = x
        xis[j + 1] = _node_xis(problem, gamma, sigma, t1, x)

    traj = Trajectory(
        times=times.copy(),
        states=states,
        controls=control.values.copy(),
        xis=xis,
        gamma=gamma,
        sigma=sigma,
    )
    _assert_invariance(problem, traj, level, xi_cap)
    return traj


def _advance_interval(rhs, t0, t1, x, u, dt, sc: StepControl, ceiling, trigger):
    """Adaptive Cash-Karp steps across one control interval."""
    t = t0
    accepted = 0
    rejected = 0
    _, vmax = rhs(t, x, u)
    while t < t1 - 1e-14 * max(1.0, abs(t1)):
        dt_max = t1 - t
        if vmax >= trigger:
            dt_max = min(dt_max, ceiling)
        h = min(dt, dt_max)
        if h < sc.dt_min:
            raise IntegrationError(f"step size underflow at t={t:.6g}")
        k = [None] * 6
        k[0], _ = rhs(t, x, u)
        bad = False
        for s in range(1, 6):
            xs = x + h * sum(a * k[idx] for idx, a in enumerate(_CK_A[s]))
            if not np.all(np.isfinite(xs)):
                bad = True
                break
            k[s], _ = rhs(t + _CK_C[s] * h, xs, u)
        if not bad:
            x5 = x + h * sum(b * ki for b, ki in zip(_CK_B5, k))
            x4 = x + h * sum(b * ki for b, ki in zip(_CK_B4, k))
            bad = not (np.all(np.isfinite(x5)) and np.all(np.isfinite(x4)))
        if bad:
            rejected += 1
            dt = max(h * 0.1, sc.dt_min)
            if rejected > 40 and rejected > accepted:
                return x, dt, accepted + rejected, (t, x)
            continue
        w = sc.atol + sc.rtol * np.maximum(np.abs(x), np.abs(x5))
        err = float(np.max(np.abs(x5 - x4) / w))
        if err <= 1.0:
            t = t1 if (t1 - t - h) < 1e-14 * max(1.0, abs(t1)) else t + h
            x = x5
            _, vmax = rhs(t, x, u)
            accepted += 1
            grow = sc.safety * (err + 1e-16) ** -0.2
            dt = h * min(5.0, max(0.2, grow))
        else:
            rejected += 1
            shrink = sc.safety * err ** -0.25
            dt = h * min(1.0, max(0.1, shrink))
            if accepted + rejected >= 30 and rejected > (accepted + rejected) * 0.5:
                # stiffness defeats the explicit controller: hand off
                return x, dt, accepted + rejected, (t, x)
    return x, dt, accepted + rejected, None


def _implicit_segment(problem, rhs, t0, t1, x, u, gamma, sigma, ceiling):
    """Implicit Euler on the penalty term, explicit on the drift."""
    mset = problem.moving_set
    steps = max(1, int(math.ceil((t1 - t0) / max(ceiling, 1e-12))))
    h = (t1 - t0) / steps
    t = t0
    for _ in range(steps):
        fx = problem.f(t, x, tuple(u))
        t_new = t + h
        base = x + h * fx
        z = x.copy()
        ok = False
        for _ in range(40):
            vals, grads, hess, _ = mset.jet_arrays(t_new, z)
            xi = gamma * np.exp(np.minimum(gamma * (vals - sigma), 700.0))
            pen = grads.T @ xi
            G = z - base + h * pen
            if np.max(np.abs(G)) <= 1e-12 * (1.0 + np.max(np.abs(z))):
                ok = True
                break
            jac = np.eye(problem.n) + h * (
                np.einsum("a,ai,aj->ij", gamma * xi, grads, grads)
                + np.einsum("a,aij->ij", xi, hess)
            )
            try:
                z = z - np.linalg.solve(jac, G)
            except np.linalg.LinAlgError:
                break
        if not ok:
            raise IntegrationError(f"implicit fallback failed to converge at t={t_new:.6g}")
        x = z
        t = t_new
    return x


def _assert_invariance(problem: Problem, traj: Trajectory, level: float, xi_cap: float) -> None:
    mset = problem.moving_set
    for j, t in enumerate(traj.times):
        vals = mset.capped_values(float(t), traj.states[j])
        if np.max(vals) - traj.sigma > (level - traj.sigma) + 1e-9:
            raise InvarianceError(
                f"trajectory left the inflated set at t={t:.6g}: "
                f"value - sigma = {np.max(vals) - traj.sigma:.6g} > {level - traj.sigma:.6g}"
            )
        if np.max(traj.xis[j]) > xi_cap * (1.0 + 1e-6):
            raise InvarianceError(
                f"multiplier cap exceeded at t={t:.6g}: "
                f"{np.max(traj.xis[j]):.6g} > {xi_cap:.6g}"
            )


# ---------------------------------------------------------------------------
# catching-up oracle
# ---------------------------------------------------------------------------


def catching_up(problem: Problem, control: PiecewiseConstantControl, dt: float) -> Trajectory:
    """Moreau catching-up: Euler predictor, then projection onto C(t_{j+1}).

    Discrete multipliers are the KKT coefficients of the projection divided by
    dt, stored at the arrival node.
    """
    if not (0 < dt <= 1e-2):
        raise ValueError("catching-up step must satisfy 0 < dt <= 1e-2")
    mset = problem.moving_set
    T = problem.horizon
    N = int(round(T / dt))
    times = np.linspace(0.0, T, N + 1)
    states = np.empty((N + 1, problem.n))
    xis = np.zeros((N + 1, mset.I))
    x = problem.start_point().astype(float)
    if np.max(mset.capped_values(0.0, x)) > 1e-9:
        x = mset.project(0.0, x)
    states[0] = x
    for j in range(N):
        u = control.value_at(float(times[j]))
        pred = x + (times[j + 1] - times[j]) * problem.f(float(times[j]), x, u)
        x, lam, _ = mset.project_full(float(times[j + 1]), pred)
        states[j + 1] = x
        xis[j + 1] = lam / (times[j + 1] - times[j])
    controls = np.array([control.value_at(float(t)) for t in times[:-1]])
    return Trajectory(times=times, states=states, controls=controls, xis=xis, gamma=0.0, sigma=0.0)


# ---------------------------------------------------------------------------
# convergence sweeps
# ---------------------------------------------------------------------------


@dataclass
class ConvergenceReport:
    gammas: list
    sigmas: list
    sup_errors: list
    final_error: float
    tol: float
    slack: float
    verdict: bool

    def to_dict(self) -> dict:
        return {
            "gammas": self.gammas,
            "sigmas": self.sigmas,
            "sup_errors": self.sup_errors,
            "final_error": self.final_error,
            "tol": self.tol,
            "slack": self.slack,
            "verdict": self.verdict,
        }


def parallel_map(fn: Callable, items: Sequence):
    """Ordered map honoring the SWEEPCTL_THREADS environment variable."""
    raw = os.environ.get("SWEEPCTL_THREADS", "1")
    try:
        workers = max(1, int(raw))
    except ValueError:
        workers = 1
    if workers <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def convergence_sweep(
    problem: Problem,
    control: PiecewiseConstantControl,
    schedule: PenaltySchedule,
    dt_oracle: float = 1e-3,
    tol: float = 2e-2,
    slack: float = 0.1,
    step_control: StepControl | None = None,
) -> tuple[ConvergenceReport, list[Trajectory], Trajectory]:
    """Penalized runs along the schedule against the catching-up oracle.

    Starts are nudged into each inflated set when the nominal start sits on
    the boundary of C(0).  The verdict requires sup errors non-increasing
    within the given slack and the final error at most tol.
    """
    prob = problem if problem.mu == schedule.mu else problem.with_mu(schedule.mu)
    oracle = catching_up(prob, control, dt_oracle)

    def run(pair):
        g, s = pair
        x0 = admissible_start(prob, g, s)
        return integrate_penalized(prob, control, g, s, step_control=step_control, start=x0)

    trajectories = parallel_map(run, list(zip(schedule.gammas, schedule.sigmas)))
    errors = [sup_error(tr, oracle) for tr in trajectories]
    monotone = all(e1 <= (1.0 + slack) * e0 for e0, e1 in zip(errors, errors[1:]))
    verdict = bool(monotone and errors[-1] <= tol)
    report = ConvergenceReport(
        gammas=[float(g) for g in schedule.gammas],
        sigmas=[float(s) for s in schedule.sigmas],
        sup_errors=[float(e) for e in errors],
        final_error=float(errors[-1]),
        tol=float(tol),
        slack=float(slack),
        verdict=verdict,
    )
    return report, trajectories, oracle
