import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from sgdlines.analysis import (Curve, ExactLine, Interpolated, argmin_refined, distance_matrix,
                               improvement, mae_distance, moving_average, polyfit,
                               proportionality, shift_to_zero)
from sgdlines.errors import NumericError, SpecificationError
from sgdlines.linescan import make_grid, scan_line
from sgdlines.nncore import Model
from sgdlines.trainer import replay_record

GRID = np.linspace(-1, 1, 21)


def test_shift_examples():
    c = Curve(GRID, np.full(21, 5.0))
    assert np.all(shift_to_zero(c).losses == 0)
    p = Curve(GRID, GRID ** 2)
    np.testing.assert_array_equal(shift_to_zero(p).losses, p.losses)
    np.testing.assert_array_equal(shift_to_zero(p + 3.7).losses, shift_to_zero(p).losses)
    with pytest.raises(SpecificationError):
        shift_to_zero(p, (5.0, 6.0))


def test_mae_examples():
    s = np.array([-1.0, 0.0, 1.0])
    a, b = Curve(s, s ** 2), Curve(s, 2 * s ** 2)
    assert mae_distance(a, b) == 2 / 3
    assert mae_distance(a, a) == 0
    assert mae_distance(a, b) == mae_distance(b, a)
    with pytest.raises(SpecificationError):
        mae_distance(a, Curve(s + 1, s))


finite = st.floats(-50, 50, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, (4, 21), elements=finite), st.floats(-1e3, 1e3))
def test_distance_axioms_and_shift(values, const):
    curves = [Curve(GRID, v) for v in values]
    mat, cons = distance_matrix(curves, (-0.5, 0.5))
    assert np.array_equal(mat, mat.T)
    assert np.all(np.diag(mat) == 0) and np.all(mat >= 0)
    np.testing.assert_array_equal(cons, [mat[i, i + 1] for i in range(3)])
    assert mae_distance(curves[0] + const, curves[1], (-0.5, 0.5)) == mat[0, 1]


def test_masked_points_ignored():
    v = GRID ** 2
    w = v.copy()
    w[3] = np.nan
    assert mae_distance(Curve(GRID, v), Curve(GRID, w)) == 0


def test_single_curve_matrix():
    mat, cons = distance_matrix([Curve(GRID, GRID ** 2)])
    assert mat.shape == (1, 1) and mat[0, 0] == 0 and cons.size == 0


def test_polyfit_exact():
    f = polyfit(Curve(GRID, 2 * GRID ** 2 - 4 * GRID + 1), 2)
    assert (f.a, f.b, f.c) == pytest.approx((2, -4, 1), abs=1e-10)
    assert f.mae < 1e-10 and f.rmse < 1e-10
    assert f.curvature == pytest.approx(4) and f.vertex == pytest.approx(1)
    g = polyfit(Curve(GRID, 3 * GRID + 1), 1)
    assert (g.b, g.c) == pytest.approx((3, 1), abs=1e-12) and g.a is None and g.rmse < 1e-12
    with pytest.raises(NumericError):
        polyfit(Curve(np.zeros(5), np.arange(5.0)), 1)


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 21, elements=finite))
def test_polyfit_nesting(values):
    c = Curve(GRID, values)
    assert polyfit(c, 2).rmse <= polyfit(c, 1).rmse + 1e-12


def test_argmin_examples():
    r = 0.006
    am = argmin_refined(Curve(np.array([-r, 0, r]), np.array([1.0, 0.0, 1.0])))
    assert am.s == 0 and not am.boundary
    g = make_grid(-0.5, 0.5, 0.006).points
    am = argmin_refined(Curve(g, 3 * (g - 0.1234) ** 2 + 0.7))
    assert am.s == pytest.approx(0.1234, abs=1e-9)
    am = argmin_refined(Curve(g, -g))
    assert am.boundary and am.s == g[-1]
    flat = argmin_refined(Curve(g, np.zeros_like(g)))
    assert flat.s == g[0]


@settings(max_examples=60, deadline=None)
@given(arrays(np.float64, 21, elements=finite))
def test_argmin_stays_in_cell(values):
    c = Curve(GRID, values)
    am = argmin_refined(c)
    assert abs(am.s - GRID[am.index]) <= 0.1 + 1e-12


def test_improvement_and_interpolation(blobs, small_config, small_run):
    assert improvement(1.0, lambda s: 0.4, 0.3) == pytest.approx(0.6)
    assert improvement(1.0, lambda s: 99.0, 0.0) == 0.0
    origin, rec = replay_record(small_config, blobs, 8, small_run.snapshots)
    model = Model(small_config.model)
    grid = make_grid(-0.3, 0.3, 0.03)
    scan = scan_line(model, origin, rec, grid, blobs)
    curve = scan.curve()
    interp, exact = Interpolated(curve), ExactLine(model, blobs, origin, rec.direction)
    gap = np.max(np.abs(np.diff(scan.full)))
    for s in np.random.default_rng(0).uniform(-0.3, 0.3, 20):
        assert abs(interp(s) - exact(s)) <= gap
    with pytest.raises(SpecificationError):
        interp(0.5)
    assert exact(0.5) < np.inf


def test_moving_average():
    np.testing.assert_array_equal(moving_average(np.full(9, 2.5), 5), np.full(9, 2.5))
    assert moving_average([0, 3, 6], 3)[1] == 3
    x = np.random.default_rng(0).standard_normal(11)
    np.testing.assert_array_equal(moving_average(x, 1), x)
    with pytest.raises(SpecificationError):
        moving_average(x, 4)


def test_proportionality():
    g = np.array([1.0, 2.0, 3.5, 0.5, 4.0])
    p = proportionality(0.05 * g, g)
    assert p.c == pytest.approx(0.05, rel=1e-15) and p.pearson == pytest.approx(1.0)
    q = proportionality(np.array([0.1, 0.2, 0.3]), np.full(3, 2.0))
    assert np.isnan(q.pearson) and q.note
    with pytest.raises(SpecificationError):
        proportionality([0.1, 0.2, 0.3], [1, 2, 3], exclude=[True, False, False])
