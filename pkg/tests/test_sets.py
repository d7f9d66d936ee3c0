"""Moving sets: cap spline, derivative jets, sampled regularity, projection.

Jet oracles are finite differences of the composite capped value; projection
oracles are closed forms plus a coarse feasible-grid search.
"""

import numpy as np
import pytest

from sweepctl.expr import parse
from sweepctl.sets import (
    A1Constants,
    CapParams,
    MovingSet,
    SamplingPlan,
    validate_a1,
)

X3 = ["x1", "x2", "x3"]


def two_sphere_set(beta=0.05, eta=1.75, rho=0.9, h=0.5) -> MovingSet:
    lo = parse(f"x1^2 + x2^2 + (x3 + {h})^2 - 1", ["t"] + X3)
    hi = parse(f"x1^2 + x2^2 + (x3 - {h})^2 - 1", ["t"] + X3)
    return MovingSet([lo, hi], 3, A1Constants(beta, eta, rho), bounding_radius=1.5)


def obtuse_corner_set() -> MovingSet:
    # gradients (-2, -1) and (2, -1) meet at an obtuse angle at the origin
    a = parse("neg(x2) - 2*x1", ["t", "x1", "x2"])
    b = parse("neg(x2) + 2*x1", ["t", "x1", "x2"])
    return MovingSet([a, b], 2, A1Constants(0.05, 1.0, 0.9), bounding_radius=1.0)


# ---------------------------------------------------------------------------
# cap
# ---------------------------------------------------------------------------


def test_cap_identity_and_floor_values() -> None:
    cap = CapParams(0.05)
    assert cap.value_s(-0.05) == pytest.approx(-0.05, abs=1e-15)
    assert cap.value_s(-0.10) == pytest.approx(-0.10, abs=1e-15)
    assert cap.value_s(0.3) == 0.3
    assert cap.value_s(-5.0) == -0.1


def test_cap_monotone_on_grid() -> None:
    cap = CapParams(0.05)
    grid = np.arange(-0.2, 0.1, 1e-3)
    vals = cap.value(grid)
    assert np.all(np.diff(vals) >= -1e-15)
    assert np.all(cap.d1(grid) >= 0.0)


def test_cap_c2_junctions() -> None:
    cap = CapParams(0.05)
    for z in (-0.05, -0.1):
        for eps in (1e-6, 1e-7):
            assert cap.value_s(z - eps) == pytest.approx(cap.value_s(z + eps), abs=3 * eps)
            assert cap.d1_s(z - eps) == pytest.approx(cap.d1_s(z + eps), abs=1e-3 * eps / 1e-7)
            # third derivative of the blend is bounded by 36/beta^2
            assert cap.d2_s(z - eps) == pytest.approx(cap.d2_s(z + eps), abs=80 * eps / 0.05**2)


def test_cap_derivatives_match_finite_differences() -> None:
    cap = CapParams(0.05)
    h = 1e-6
    rng = np.random.default_rng(0)
    for z in np.concatenate([rng.uniform(-0.099, -0.051, 20), [-0.07, -0.06, 0.02]]):
        fd1 = (cap.value_s(z + h) - cap.value_s(z - h)) / (2 * h)
        fd2 = (cap.value_s(z + h) - 2 * cap.value_s(z) + cap.value_s(z - h)) / h**2
        assert cap.d1_s(z) == pytest.approx(fd1, rel=1e-6, abs=1e-6)
        assert cap.d2_s(z) == pytest.approx(fd2, rel=1e-3, abs=1e-2)


def test_cap_array_matches_scalar() -> None:
    cap = CapParams(0.08)
    zs = np.linspace(-0.3, 0.2, 101)
    np.testing.assert_allclose(cap.value(zs), [cap.value_s(z) for z in zs], atol=1e-15)
    np.testing.assert_allclose(cap.d1(zs), [cap.d1_s(z) for z in zs], atol=1e-15)
    np.testing.assert_allclose(cap.d2(zs), [cap.d2_s(z) for z in zs], atol=1e-12)


def test_a1_constants_validation() -> None:
    with pytest.raises(ValueError):
        A1Constants(-0.1, 1.0, 0.9)
    with pytest.raises(ValueError):
        A1Constants(0.1, 0.0, 0.9)
    with pytest.raises(ValueError):
        A1Constants(0.1, 1.0, 1.5)


# ---------------------------------------------------------------------------
# jets
# ---------------------------------------------------------------------------


def _capped_value(mset, i, t, x):
    return float(mset.capped_values(t, x)[i])


@pytest.mark.parametrize("seed", [1, 2])
def test_jets_match_finite_differences(seed) -> None:
    mset = two_sphere_set()
    rng = np.random.default_rng(seed)
    h = 1e-5
    for _ in range(25):
        x = rng.uniform(-1.1, 1.1, size=3)
        t = float(rng.uniform(0.0, 1.0))
        vals, grads, hess, dts = mset.jet_arrays(t, x)
        for i in range(2):
            raw = float(mset.raw_values(t, x)[i])
            # stay away from the spline junctions where h''' jumps
            if min(abs(raw + 0.05), abs(raw + 0.1)) < 5 * h:
                continue
            for j in range(3):
                e = np.zeros(3)
                e[j] = h
                fd = (_capped_value(mset, i, t, x + e) - _capped_value(mset, i, t, x - e)) / (2 * h)
                assert grads[i, j] == pytest.approx(fd, rel=1e-5, abs=1e-7)
                fd2 = (
                    _capped_value(mset, i, t, x + e)
                    - 2 * _capped_value(mset, i, t, x)
                    + _capped_value(mset, i, t, x - e)
                ) / h**2
                assert hess[i, j, j] == pytest.approx(fd2, rel=1e-3, abs=1e-3)


def test_jets_time_derivative_moving_wall() -> None:
    wall = MovingSet(
        [parse("t - x1", ["t", "x1"])], 1, A1Constants(0.1, 0.9, 0.9), bounding_radius=3.0
    )
    jet = wall.constraint_jet(0, 0.5, np.array([0.51]))
    assert jet.value == pytest.approx(-0.01)
    assert jet.grad[0] == pytest.approx(-1.0)
    assert jet.dt == pytest.approx(1.0)
    # deep inside, the cap kills gradient and time derivative
    jet_far = wall.constraint_jet(0, 0.0, np.array([2.0]))
    assert jet_far.value == pytest.approx(-0.2)
    assert jet_far.grad[0] == 0.0
    assert jet_far.dt == 0.0


def test_jet_off_diagonal_hessian() -> None:
    mset = MovingSet(
        [parse("x1^2*x2 + exp(x1*x2)", ["t", "x1", "x2"])],
        2,
        A1Constants(0.05, 0.5, 0.9),
        bounding_radius=2.0,
    )
    x = np.array([0.4, 0.3])
    _, _, hess, _ = mset.jet_arrays(0.0, x)
    h = 1e-4

    def val(p):
        return _capped_value(mset, 0, 0.0, p)

    fd = (
        val(x + [h, h]) - val(x + [h, -h]) - val(x + [-h, h]) + val(x + [-h, -h])
    ) / (4 * h * h)
    assert hess[0, 0, 1] == pytest.approx(fd, rel=1e-4, abs=1e-4)
    assert hess[0, 0, 1] == pytest.approx(hess[0, 1, 0], rel=1e-12)


def test_constraint_jet_index_range() -> None:
    mset = two_sphere_set()
    with pytest.raises(IndexError):
        mset.constraint_jet(2, 0.0, np.zeros(3))


# ---------------------------------------------------------------------------
# active indices
# ---------------------------------------------------------------------------


def test_active_indices_intersection_circle() -> None:
    mset = two_sphere_set()
    x = np.array([np.sqrt(0.75), 0.0, 0.0])
    assert mset.active_indices(0.0, x) == [0, 1]


def test_active_indices_single_sphere_and_interior() -> None:
    mset = two_sphere_set()
    # on sphere 1 only, away from sphere 2
    x = np.array([0.0, 0.0, 0.5])
    assert mset.active_indices(0.0, x) == [0]
    assert mset.active_indices(0.0, np.array([-0.6, 0.0, 0.0])) == []


# ---------------------------------------------------------------------------
# sampled regularity
# ---------------------------------------------------------------------------


def test_validate_a1_two_sphere_passes() -> None:
    mset = two_sphere_set()
    report = validate_a1(mset, SamplingPlan(count=40000, seed=0, t_max=2.5))
    assert report.passed
    assert report.band_samples > 100
    assert report.min_grad_norm is not None and report.min_grad_norm > 1.75
    assert report.worst_pair_inner is not None and report.worst_pair_inner > 0.0
    assert report.worst_dominance_ratio is not None
    assert report.worst_dominance_ratio <= 0.9


def test_validate_a1_obtuse_corner_fails_pairwise() -> None:
    mset = obtuse_corner_set()
    report = validate_a1(mset, SamplingPlan(count=20000, seed=1, t_max=1.0))
    assert not report.passed
    assert not report.pair_ok
    assert report.worst_pair_inner is not None and report.worst_pair_inner < 0.0
    assert any(v["condition"] == "pairwise_inner" for v in report.violations)
    # gradient norms are fine for this fixture; only the angle condition fails
    assert report.grad_ok


def test_validate_a1_suggested_eta() -> None:
    mset = two_sphere_set()
    report = validate_a1(mset, SamplingPlan(count=30000, seed=2, t_max=1.0))
    assert report.suggested_eta == pytest.approx(0.9 * report.min_grad_norm)
    # analytic band floor: |grad| = 2 sqrt(1 + psi) >= 2 sqrt(0.95)
    assert report.min_grad_norm >= 2.0 * np.sqrt(0.95) - 1e-9


def test_validate_a1_deterministic() -> None:
    mset = two_sphere_set()
    plan = SamplingPlan(count=5000, seed=7, t_max=1.0)
    a = validate_a1(mset, plan).to_dict()
    b = validate_a1(mset, plan).to_dict()
    assert a == b


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------


def disk_set() -> MovingSet:
    return MovingSet(
        [parse("x1^2 + x2^2 - 1", ["t", "x1", "x2"])],
        2,
        A1Constants(0.05, 1.0, 0.9),
        bounding_radius=2.0,
    )


def test_project_disk_radial() -> None:
    disk = disk_set()
    got = disk.project(0.0, np.array([2.0, 0.0]))
    np.testing.assert_allclose(got, [1.0, 0.0], atol=1e-9)
    rng = np.random.default_rng(4)
    for _ in range(50):
        y = rng.uniform(-3.0, 3.0, size=2)
        if np.linalg.norm(y) <= 1.0:
            continue
        got = disk.project(0.0, y)
        np.testing.assert_allclose(got, y / np.linalg.norm(y), atol=1e-8)


def test_project_interior_point_returned_exactly() -> None:
    disk = disk_set()
    y = np.array([0.3, -0.2])
    got = disk.project(0.0, y)
    assert np.array_equal(got, y)


def test_project_two_sphere_pole() -> None:
    mset = two_sphere_set()
    got = mset.project(0.0, np.array([0.0, 0.0, 1.0]))
    np.testing.assert_allclose(got, [0.0, 0.0, 0.5], atol=1e-9)


def test_project_two_sphere_pole_against_grid_oracle() -> None:
    # coarse feasible-grid search is an independent oracle for the projection
    mset = two_sphere_set()
    y = np.array([0.0, 0.0, 1.0])
    step = 0.02
    axis = np.arange(-1.0, 1.0 + step, step)
    gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")
    pts = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])
    vals = mset.capped_values_batch(np.zeros(len(pts)), pts)
    feas = pts[np.max(vals, axis=1) <= 0.0]
    best = feas[np.argmin(np.linalg.norm(feas - y, axis=1))]
    got = mset.project(0.0, y)
    assert np.linalg.norm(got - best) <= 2 * step
    assert np.linalg.norm(got - y) <= np.min(np.linalg.norm(feas - y, axis=1)) + 1e-9


def test_project_corner_multipliers() -> None:
    walls = MovingSet(
        [parse("x1 - 1", ["t", "x1", "x2"]), parse("x2 - 1", ["t", "x1", "x2"])],
        2,
        A1Constants(0.1, 0.9, 0.9),
        bounding_radius=4.0,
    )
    y = np.array([2.0, 3.0])
    x, lam, _ = walls.project_full(0.0, y)
    np.testing.assert_allclose(x, [1.0, 1.0], atol=1e-9)
    np.testing.assert_allclose(lam, [1.0, 2.0], atol=1e-8)


def test_project_moving_wall_tracks_time() -> None:
    wall = MovingSet(
        [parse("t - x1", ["t", "x1"])], 1, A1Constants(0.1, 0.9, 0.9), bounding_radius=3.0
    )
    got = wall.project(0.5, np.array([0.2]))
    np.testing.assert_allclose(got, [0.5], atol=1e-10)


def test_project_idempotent_and_variational() -> None:
    mset = two_sphere_set()
    rng = np.random.default_rng(9)
    feas = []
    while len(feas) < 200:
        z = rng.uniform(-1.0, 1.0, size=3)
        if np.max(mset.capped_values(0.0, z)) <= 0.0:
            feas.append(z)
    feas = np.array(feas)
    for _ in range(20):
        y = rng.uniform(-2.0, 2.0, size=3)
        x = mset.project(0.0, y)
        x2 = mset.project(0.0, x)
        assert np.linalg.norm(x2 - x) <= 1e-9
        assert np.max(mset.capped_values(0.0, x)) <= 1e-9
        # variational inequality of a Euclidean projection onto a convex set
        gaps = (feas - x) @ (y - x)
        assert np.max(gaps) <= 1e-7


def test_project_multipliers_reconstruct_displacement() -> None:
    mset = two_sphere_set()
    rng = np.random.default_rng(11)
    for _ in range(20):
        y = rng.uniform(-1.5, 1.5, size=3)
        x, lam, _ = mset.project_full(0.0, y)
        _, grads, _, _ = mset.jet_arrays(0.0, x)
        np.testing.assert_allclose(x + grads.T @ lam, y, atol=1e-7)
        assert np.all(lam >= -1e-12)
