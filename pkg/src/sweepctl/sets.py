"""Nonsmooth moving sets C(t) = {x : psi_i(t, x) <= 0, i = 1..I}.

Each inequality is an expression in t, x1..xn.  Constraint values are capped
below by a C^2 function h so that gradients vanish once a constraint is
strongly inactive: h(z) = z above -beta, a quintic blend on [-2 beta, -beta],
and the constant -2 beta below.  The capped functions feed the penalized
dynamics and the adjoint equation; regularity of the raw inequalities is
checked by sampling (gradient norms on the band, pairwise obtuseness, and
diagonal dominance of the constraint Gramian).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from itertools import combinations
from typing import Sequence

import numpy as np

from . import expr as ex

__all__ = [
    "A1Constants",
    "CapParams",
    "ConstraintJet",
    "SamplingPlan",
    "A1Report",
    "MovingSet",
    "ProjectionError",
    "validate_a1",
    "suggest_eta",
]


class ProjectionError(RuntimeError):
    """Projection failed to produce a feasible point."""


@dataclass(frozen=True)
class A1Constants:
    """Band half-width beta, gradient floor eta, dominance ratio rho."""

    beta: float
    eta: float
    rho: float

    def __post_init__(self):
        if not (self.beta > 0):
            raise ValueError(f"beta must be positive, got {self.beta}")
        if not (self.eta > 0):
            raise ValueError(f"eta must be positive, got {self.eta}")
        if not (0 < self.rho < 1):
            raise ValueError(f"rho must lie in (0, 1), got {self.rho}")


# Quintic blend g(s) = 6 s^3 - 8 s^4 + 3 s^5 on s in [0, 1]: the unique
# quintic with g(0) = g'(0) = g''(0) = 0, g(1) = g'(1) = 1, g''(1) = 0.
# g' = s^2 (15 s^2 - 32 s + 18) > 0 on (0, 1], so the cap is nondecreasing.
_G = (6.0, -8.0, 3.0)


class CapParams:
    """C^2 lower cap for constraint values.

    value(z) = z for z > -beta, -2 beta for z <= -2 beta, and a monotone
    quintic Hermite blend in between (matching value, slope, and curvature at
    both junctions).  Monotonicity is re-verified on a 1e-3-spaced grid at
    construction.
    """

    def __init__(self, beta: float):
        if not (beta > 0):
            raise ValueError(f"beta must be positive, got {beta}")
        self.beta = float(beta)
        self.coefficients = _G
        grid = np.arange(-2.0 * beta, -beta + 1e-3, 1e-3)
        if np.any(self.d1(grid) < 0.0):
            raise ValueError("cap spline is not monotone on its blend interval")

    # scalar fast paths -----------------------------------------------------

    def value_s(self, z: float) -> float:
        b = self.beta
        if z > -b:
            return z
        if z <= -2.0 * b:
            return -2.0 * b
        s = (z + 2.0 * b) / b
        return -2.0 * b + b * (s * s * s * (6.0 + s * (-8.0 + 3.0 * s)))

    def d1_s(self, z: float) -> float:
        b = self.beta
        if z > -b:
            return 1.0
        if z <= -2.0 * b:
            return 0.0
        s = (z + 2.0 * b) / b
        return s * s * (18.0 + s * (-32.0 + 15.0 * s))

    def d2_s(self, z: float) -> float:
        b = self.beta
        if z > -b or z <= -2.0 * b:
            return 0.0
        s = (z + 2.0 * b) / b
        return s * (36.0 + s * (-96.0 + 60.0 * s)) / b

    # array versions ---------------------------------------------------------

    def value(self, z):
        z = np.asarray(z, dtype=float)
        b = self.beta
        s = np.clip((z + 2.0 * b) / b, 0.0, 1.0)
        blend = -2.0 * b + b * (s ** 3 * (6.0 + s * (-8.0 + 3.0 * s)))
        return np.where(z > -b, z, blend)

    def d1(self, z):
        z = np.asarray(z, dtype=float)
        b = self.beta
        s = np.clip((z + 2.0 * b) / b, 0.0, 1.0)
        blend = s * s * (18.0 + s * (-32.0 + 15.0 * s))
        return np.where(z > -b, 1.0, blend)

    def d2(self, z):
        z = np.asarray(z, dtype=float)
        b = self.beta
        inside = (z > -2.0 * b) & (z <= -b)
        s = np.clip((z + 2.0 * b) / b, 0.0, 1.0)
        blend = s * (36.0 + s * (-96.0 + 60.0 * s)) / b
        return np.where(inside, blend, 0.0)


@dataclass(frozen=True)
class ConstraintJet:
    """Capped constraint data at one (t, x): value, spatial gradient and
    Hessian, and the partial derivative in t."""

    value: float
    grad: np.ndarray
    hess: np.ndarray
    dt: float


@dataclass(frozen=True)
class SamplingPlan:
    """Deterministic sampling recipe over [0, t_max] x (radius ball)."""

    count: int = 20000
    seed: int = 0
    t_max: float = 1.0
    radius: float | None = None


@dataclass
class A1Report:
    """Sampled regularity check of the raw constraint family."""

    count: int
    seed: int
    t_max: float
    radius: float
    beta: float
    eta: float
    rho: float
    band_samples: int
    min_grad_norm: float | None
    active_pair_samples: int
    worst_pair_inner: float | None
    worst_dominance_ratio: float | None
    grad_ok: bool
    pair_ok: bool
    dominance_ok: bool
    passed: bool
    suggested_eta: float | None
    violations: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "count": self.count,
            "seed": self.seed,
            "t_max": self.t_max,
            "radius": self.radius,
            "beta": self.beta,
            "eta": self.eta,
            "rho": self.rho,
            "band_samples": self.band_samples,
            "min_grad_norm": self.min_grad_norm,
            "active_pair_samples": self.active_pair_samples,
            "worst_pair_inner": self.worst_pair_inner,
            "worst_dominance_ratio": self.worst_dominance_ratio,
            "grad_ok": self.grad_ok,
            "pair_ok": self.pair_ok,
            "dominance_ok": self.dominance_ok,
            "passed": self.passed,
            "suggested_eta": self.suggested_eta,
            "violations": self.violations,
        }


def _ball_samples(rng: np.random.Generator, count: int, n: int, radius: float) -> np.ndarray:
    v = rng.normal(size=(count, n))
    v /= np.maximum(np.linalg.norm(v, axis=1, keepdims=True), 1e-300)
    r = radius * rng.uniform(0.0, 1.0, size=(count, 1)) ** (1.0 / n)
    return v * r


class MovingSet:
    """Family of capped inequalities with exact derivative jets."""

    def __init__(
        self,
        constraints: Sequence[ex.Expr],
        n: int,
        a1: A1Constants,
        bounding_radius: float,
        cap: CapParams | None = None,
    ):
        if not constraints:
            raise ValueError("at least one constraint is required")
        if not (bounding_radius > 0):
            raise ValueError("bounding_radius must be positive")
        self.constraints = tuple(constraints)
        self.n = int(n)
        self.a1 = a1
        self.bounding_radius = float(bounding_radius)
        self.cap = cap if cap is not None else CapParams(a1.beta)

        self.x_names = [f"x{j + 1}" for j in range(self.n)]
        names = ["t"] + self.x_names
        allowed = set(names)
        for e in self.constraints:
            extra = e.free_vars - allowed
            if extra:
                raise ValueError(f"constraint uses unknown variables {sorted(extra)}")

        self.I = len(self.constraints)
        self.grads = [[e.diff(v) for v in self.x_names] for e in self.constraints]
        self.hessians = [
            [[g.diff(v) for v in self.x_names] for g in row] for row in self.grads
        ]
        self.dts = [e.diff("t") for e in self.constraints]

        flat_vg: list[ex.Expr] = list(self.constraints)
        for row in self.grads:
            flat_vg.extend(row)
        flat_vg.extend(self.dts)
        self._vg_fn = ex.compile_exprs(flat_vg, names, "jets_vg")

        flat_h: list[ex.Expr] = []
        for mat in self.hessians:
            for row in mat:
                flat_h.extend(row)
        self._hess_fn = ex.compile_exprs(flat_h, names, "jets_hess")

    # raw evaluation ---------------------------------------------------------

    def _vg_scalar(self, t: float, x) -> tuple:
        """Raw values, gradients, time-derivatives as nested tuples of floats."""
        out = self._vg_fn(ex.SCALAR_BACKEND, t, *x)
        I, n = self.I, self.n
        vals = out[:I]
        grads = tuple(out[I + i * n : I + (i + 1) * n] for i in range(I))
        dts = out[I + I * n :]
        return vals, grads, dts

    def raw_batch(self, t, X) -> tuple:
        """Raw values (B, I), gradients (B, I, n), time-derivatives (B, I)."""
        t = np.asarray(t, dtype=float)
        X = np.asarray(X, dtype=float)
        B = X.shape[0]
        cols = [np.broadcast_to(t, (B,))] + [X[:, j] for j in range(self.n)]
        with np.errstate(divide="raise", invalid="raise"):
            out = self._vg_fn(ex.ARRAY_BACKEND, *cols)
        out = [np.broadcast_to(np.asarray(v, dtype=float), (B,)) for v in out]
        I, n = self.I, self.n
        vals = np.stack(out[:I], axis=1)
        grads = np.stack(
            [np.stack(out[I + i * n : I + (i + 1) * n], axis=1) for i in range(I)],
            axis=1,
        )
        dts = np.stack(out[I + I * n :], axis=1)
        return vals, grads, dts

    def raw_values(self, t: float, x) -> np.ndarray:
        vals, _, _ = self._vg_scalar(t, np.asarray(x, dtype=float))
        return np.array(vals, dtype=float)

    # capped evaluation ------------------------------------------------------

    def capped_values(self, t: float, x) -> np.ndarray:
        return self.cap.value(self.raw_values(t, x))

    def capped_values_batch(self, t, X) -> np.ndarray:
        vals, _, _ = self.raw_batch(t, X)
        return self.cap.value(vals)

    def jet_arrays(self, t: float, x) -> tuple:
        """Capped (values (I,), grads (I, n), hessians (I, n, n), dts (I,))."""
        x = np.asarray(x, dtype=float)
        vals_r, grads_r, dts_r = self._vg_scalar(t, x)
        vals_r = np.array(vals_r, dtype=float)
        grads_r = np.array(grads_r, dtype=float).reshape(self.I, self.n)
        dts_r = np.array(dts_r, dtype=float)
        hess_flat = self._hess_fn(ex.SCALAR_BACKEND, t, *x)
        hess_r = np.array(hess_flat, dtype=float).reshape(self.I, self.n, self.n)

        c1 = self.cap.d1(vals_r)
        c2 = self.cap.d2(vals_r)
        vals = self.cap.value(vals_r)
        grads = c1[:, None] * grads_r
        hess = (
            c2[:, None, None] * grads_r[:, :, None] * grads_r[:, None, :]
            + c1[:, None, None] * hess_r
        )
        dts = c1 * dts_r
        return vals, grads, hess, dts

    def constraint_jet(self, i: int, t: float, x) -> ConstraintJet:
        """Jet of capped constraint i at (t, x); chain rule through the cap."""
        if not (0 <= i < self.I):
            raise IndexError(f"constraint index {i} out of range 0..{self.I - 1}")
        vals, grads, hess, dts = self.jet_arrays(t, x)
        return ConstraintJet(
            value=float(vals[i]), grad=grads[i], hess=hess[i], dt=float(dts[i])
        )

    def active_indices(self, t: float, x) -> list[int]:
        """Indices whose capped value lies in (-2 beta, beta]."""
        b = self.a1.beta
        vals = self.capped_values(t, x)
        return [i for i, v in enumerate(vals) if -2.0 * b < v <= b]

    def inside(self, t: float, x, level: float = 0.0, tol: float = 0.0) -> bool:
        return bool(np.max(self.capped_values(t, x)) <= level + tol)

    # projection -------------------------------------------------------------

    def project(self, t: float, y, level: float = 0.0, tol: float = 1e-10) -> np.ndarray:
        x, _, _ = self.project_full(t, y, level=level, tol=tol)
        return x

    def project_full(
        self,
        t: float,
        y,
        level: float = 0.0,
        tol: float = 1e-10,
        feas_tol: float = 1e-9,
    ) -> tuple[np.ndarray, np.ndarray, int]:
        """Euclidean projection onto {x : capped psi_i(t, x) <= level}.

        Returns (point, multipliers, newton_iterations) where multipliers are
        the KKT coefficients of the capped gradients at the solution.  Active
        sets are refined by a Newton-KKT loop with a Dykstra-style cyclic
        fallback; the returned point is feasible to ``feas_tol`` or a
        ProjectionError is raised.
        """
        y = np.asarray(y, dtype=float)
        lam = np.zeros(self.I)
        vals = self.capped_values(t, y)
        if np.max(vals) <= level:
            return y.copy(), lam, 0

        active = [i for i in range(self.I) if vals[i] > level]
        x = y.copy()
        iterations = 0
        for _ in range(6 * self.I + 6):
            x_new, lam_act, ok, used = self._newton_kkt(t, y, active, x, level, tol)
            iterations += used
            if not ok:
                break
            # drop the most negative multiplier, if any
            if lam_act.size and np.min(lam_act) < -tol:
                worst = active[int(np.argmin(lam_act))]
                active = [i for i in active if i != worst]
                if not active:
                    x = y.copy()
                    break
                x = x_new
                continue
            # admit the worst violated inactive constraint, if any
            vals_new = self.capped_values(t, x_new)
            rest = [i for i in range(self.I) if i not in active]
            if rest:
                j = max(rest, key=lambda i: vals_new[i])
                if vals_new[j] > level + feas_tol:
                    active = sorted(active + [j])
                    x = x_new
                    continue
            lam = np.zeros(self.I)
            lam[active] = np.maximum(lam_act, 0.0)
            if np.max(vals_new) <= level + feas_tol:
                return x_new, lam, iterations
            break

        x, lam, extra = self._dykstra(t, y, level, tol, feas_tol)
        return x, lam, iterations + extra

    def _active_jets(self, t: float, x: np.ndarray, active: list[int]):
        vals, grads, hess, _ = self.jet_arrays(t, x)
        return vals[active], grads[active], hess[active]

    def _newton_kkt(
        self,
        t: float,
        y: np.ndarray,
        active: list[int],
        x0: np.ndarray,
        level: float,
        tol: float,
        max_iter: int = 60,
    ):
        """Newton on the equality-constrained KKT system for the active set."""
        n = self.n
        a = len(active)
        if a == 0:
            return y.copy(), np.zeros(0), True, 0
        x = x0.copy()
        lam = np.zeros(a)
        res_prev = np.inf
        for it in range(max_iter):
            vals, grads, hess = self._active_jets(t, x, active)
            f1 = x - y + grads.T @ lam
            f2 = vals - level
            res = max(np.max(np.abs(f1)), np.max(np.abs(f2)))
            if res <= tol:
                return x, lam, True, it
            jac = np.zeros((n + a, n + a))
            jac[:n, :n] = np.eye(n) + np.einsum("a,aij->ij", lam, hess)
            jac[:n, n:] = grads.T
            jac[n:, :n] = grads
            try:
                step = np.linalg.solve(jac, -np.concatenate([f1, f2]))
            except np.linalg.LinAlgError:
                return x, lam, False, it
            scale = 1.0
            for _ in range(10):
                xn = x + scale * step[:n]
                ln = lam + scale * step[n:]
                vn, gn, _ = self._active_jets(t, xn, active)
                rn = max(
                    np.max(np.abs(xn - y + gn.T @ ln)),
                    np.max(np.abs(vn - level)),
                )
                if rn < res or rn <= tol:
                    break
                scale *= 0.5
            x = x + scale * step[:n]
            lam = lam + scale * step[n:]
            if res >= res_prev and scale < 1e-3:
                return x, lam, False, it
            res_prev = res
        return x, lam, False, max_iter

    def _dykstra(self, t: float, y: np.ndarray, level: float, tol: float, feas_tol: float):
        """Cyclic projection with Dykstra corrections onto the single sets."""
        x = y.copy()
        corr = np.zeros((self.I, self.n))
        used = 0
        for _ in range(500):
            shift = 0.0
            for i in range(self.I):
                z = x + corr[i]
                vals = self.capped_values(t, z)
                if vals[i] <= level:
                    x_new = z
                else:
                    x_new, _, ok, its = self._newton_kkt(t, z, [i], z, level, tol)
                    used += its
                    if not ok:
                        raise ProjectionError(
                            f"single-constraint projection failed for index {i}"
                        )
                corr[i] = z - x_new
                shift = max(shift, float(np.max(np.abs(x - x_new))))
                x = x_new
            if np.max(self.capped_values(t, x)) <= level + feas_tol and shift <= tol:
                break
        vals = self.capped_values(t, x)
        if np.max(vals) > level + feas_tol:
            raise ProjectionError(
                f"projection infeasible: max capped value {np.max(vals):.3e} above level"
            )
        # recover KKT multipliers for the active gradients by sign-constrained
        # least squares over active subsets
        _, grads, _, _ = self.jet_arrays(t, x)
        act = [i for i in range(self.I) if vals[i] >= level - 10.0 * feas_tol]
        lam = np.zeros(self.I)
        target = y - x
        best = np.inf
        best_lam = lam
        for r in range(len(act) + 1):
            for subset in combinations(act, r):
                if subset:
                    g = grads[list(subset)]
                    coef, *_ = np.linalg.lstsq(g.T, target, rcond=None)
                    if np.any(coef < -tol):
                        continue
                    err = float(np.linalg.norm(g.T @ coef - target))
                else:
                    coef = np.zeros(0)
                    err = float(np.linalg.norm(target))
                if err < best - 1e-15:
                    best = err
                    best_lam = np.zeros(self.I)
                    if subset:
                        best_lam[list(subset)] = np.maximum(coef, 0.0)
        return x, best_lam, used


def suggest_eta(mset: MovingSet, plan: SamplingPlan) -> float | None:
    """0.9 times the sampled minimum raw gradient norm on the band, or None
    if no sample lands on the band."""
    report = validate_a1(mset, plan)
    return report.suggested_eta


def validate_a1(mset: MovingSet, plan: SamplingPlan, pair_tol: float = 1e-12) -> A1Report:
    """Sample the regularity conditions of the raw constraint family.

    Checks, over (t, x) in [0, t_max] x (radius ball):
      * gradient norms exceed eta wherever a raw value lies in [-beta, beta];
      * pairwise gradient inner products are >= -pair_tol whenever both
        constraints are active (capped value in (-2 beta, beta]);
      * for each active i, the off-diagonal Gramian row sum is at most
        rho times |grad psi_i|^2.
    """
    a1 = mset.a1
    beta = a1.beta
    radius = plan.radius if plan.radius is not None else mset.bounding_radius
    rng = np.random.default_rng(plan.seed)
    B = int(plan.count)
    t = rng.uniform(0.0, plan.t_max, size=B)
    X = _ball_samples(rng, B, mset.n, radius)

    vals, grads, _ = mset.raw_batch(t, X)  # (B, I), (B, I, n)
    capped = mset.cap.value(vals)
    norms = np.linalg.norm(grads, axis=2)  # (B, I)

    violations: list[dict] = []

    band = (vals >= -beta) & (vals <= beta)
    band_count = int(np.sum(band))
    min_grad = float(np.min(norms[band])) if band_count else None
    grad_ok = min_grad is None or min_grad > a1.eta
    if not grad_ok:
        b_idx, i_idx = np.nonzero(band)
        k = int(np.argmin(norms[band]))
        violations.append(
            {
                "condition": "gradient_norm",
                "t": float(t[b_idx[k]]),
                "x": X[b_idx[k]].tolist(),
                "index": int(i_idx[k]),
                "value": float(norms[b_idx[k], i_idx[k]]),
            }
        )

    active = (capped > -2.0 * beta) & (capped <= beta)  # (B, I)
    multi = np.nonzero(np.sum(active, axis=1) >= 2)[0]
    worst_inner: float | None = None
    worst_ratio: float | None = None
    pair_count = 0
    for b in multi:
        idx = np.nonzero(active[b])[0]
        g = grads[b, idx]  # (a, n)
        gram = g @ g.T
        a = len(idx)
        pair_count += a * (a - 1) // 2
        off = gram - np.diag(np.diag(gram))
        low = float(np.min(off + np.diag(np.full(a, np.inf))))
        if worst_inner is None or low < worst_inner:
            worst_inner = low
            if low < -pair_tol:
                violations.append(
                    {
                        "condition": "pairwise_inner",
                        "t": float(t[b]),
                        "x": X[b].tolist(),
                        "indices": idx.tolist(),
                        "value": low,
                    }
                )
        diag = np.diag(gram)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratios = np.sum(np.abs(off), axis=1) / diag
        ratios = np.where(np.isfinite(ratios), ratios, np.inf)
        high = float(np.max(ratios))
        if worst_ratio is None or high > worst_ratio:
            worst_ratio = high
            if high > a1.rho:
                violations.append(
                    {
                        "condition": "dominance_ratio",
                        "t": float(t[b]),
                        "x": X[b].tolist(),
                        "indices": idx.tolist(),
                        "value": high,
                    }
                )

    pair_ok = worst_inner is None or worst_inner >= -pair_tol
    dominance_ok = worst_ratio is None or worst_ratio <= a1.rho

    return A1Report(
        count=B,
        seed=plan.seed,
        t_max=plan.t_max,
        radius=radius,
        beta=beta,
        eta=a1.eta,
        rho=a1.rho,
        band_samples=band_count,
        min_grad_norm=min_grad,
        active_pair_samples=pair_count,
        worst_pair_inner=worst_inner,
        worst_dominance_ratio=worst_ratio,
        grad_ok=grad_ok,
        pair_ok=pair_ok,
        dominance_ok=dominance_ok,
        passed=bool(grad_ok and pair_ok and dominance_ok),
        suggested_eta=(0.9 * min_grad) if min_grad is not None else None,
        violations=violations[:10],
    )
