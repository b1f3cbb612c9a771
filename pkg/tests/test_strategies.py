import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sgdlines.analysis import Curve, argmin_refined, polyfit
from sgdlines.data import synth_blobs
from sgdlines.errors import SpecificationError
from sgdlines.linescan import LineScan, make_grid, scan_line
from sgdlines.nncore import Model, ModelSpec
from sgdlines.strategies import (StrategySpec, default_specs, evaluate_strategies, step_exact,
                                 step_fbpal, step_pal, step_sgd, strategy_step, write_strategy_csv)
from sgdlines.trainer import StepRecord, replay_record


def test_sgd_step():
    assert step_sgd(0.1, 3.0) == pytest.approx(0.3)
    assert step_sgd(0.1, 0.0) == 0.0


def test_pal_examples():
    assert step_pal(1.0, -4.0, -0.5, 0.5).s == 1.0
    res = step_pal(0.0, -1.0, -0.5, 0.5)
    assert "degenerate_curvature" in res.flags and res.s == 0.5
    res = step_pal(0.0, -1.0, -0.6, 0.5)
    assert "negative_curvature" in res.flags and res.s == 0.5 * 1.0
    with pytest.raises(SpecificationError):
        step_pal(0.0, -1.0, 0.0, 0.0)


@settings(max_examples=200, deadline=None)
@given(st.floats(0.01, 100), st.floats(-5, 5), st.floats(-5, 5), st.sampled_from([0.01, 0.1, 1.0]))
def test_pal_recovers_vertex(a, v, c, mu):
    f = lambda s: a * (s - v) ** 2 + c  # noqa: E731
    s = step_pal(f(0.0), -2 * a * v, f(mu), mu).s
    assert s == pytest.approx(v, rel=1e-9, abs=1e-9)


@pytest.fixture(scope="module")
def desk_scan(blobs, small_config, small_run):
    origin, rec = replay_record(small_config, blobs, 20, small_run.snapshots)
    grid = make_grid(-0.5, 0.5, 0.006)
    return scan_line(Model(small_config.model), origin, rec, grid, blobs)


def test_pal_matches_constrained_parabola(desk_scan):
    g = desk_scan.grid
    i0, im = g.zero_index, g.index_of(0.1)
    mu = g.points[im]
    l0, lmu = desk_scan.batch_curves["defining"][[i0, im]]
    # a*s^2 + b*s + c through l(0), l'(0) and l(mu)
    A = np.array([[0, 0, 1], [0, 1, 0], [mu ** 2, mu, 1]])
    a, b, _ = np.linalg.solve(A, [l0, desk_scan.dderiv, lmu])
    pal = strategy_step(StrategySpec("pal", mu=0.1), desk_scan)
    assert pal.s == pytest.approx(-b / (2 * a), rel=1e-9)


def test_fbpal_on_exact_parabola():
    g = make_grid(-0.5, 0.5, 0.006).points
    curve = Curve(g, 1.7 * g ** 2 - 0.4 * g + 2.0)
    vertex = polyfit(curve, 2).vertex
    res = step_fbpal(curve, 0.1)
    assert "fd_slope" in res.flags
    assert res.s == pytest.approx(vertex, abs=1e-9)
    assert step_fbpal(curve, 0.1, dderiv=-0.4).s == pytest.approx(vertex, abs=1e-9)


def test_fbpal_masked_mu():
    g = make_grid(-0.5, 0.5, 0.1).points
    losses = (g - 0.2) ** 2
    mask = np.zeros(len(g), bool)
    mask[7] = True
    res = step_fbpal(Curve(g, losses, mask), 0.2)
    assert "mu_fallback" in res.flags
    assert res.s == pytest.approx(0.2, abs=1e-12)


def test_exact_steps():
    s = np.array([-0.1, 0.0, 0.1])
    assert step_exact(Curve(s, np.array([1.0, 0.0, 1.0]))).s == 0.0


def test_quadratic_head_fbpal():
    model = Model(ModelSpec((4,), kind="quadratic"))
    theta = np.array([0.3, -0.2, 0.1, 0.25])
    d = -theta / np.linalg.norm(theta)
    ds = synth_blobs(8, 2, 2)
    rec = StepRecord(0, np.arange(4), d, 2 * np.linalg.norm(theta), -2 * np.linalg.norm(theta),
                     0.0, 0.0)
    scan = scan_line(model, theta, rec, make_grid(-0.5, 0.5, 0.006), ds)
    opt = argmin_refined(scan.curve())
    fb = strategy_step(StrategySpec("fbpal", mu=0.1), scan)
    assert abs(fb.s - opt.s) < 0.006


def parabola_scan(step, grad_norm, vertex, grid, curvature=2.0):
    g = grid.points
    full = curvature * (g - vertex) ** 2
    return LineScan(step, "gradient", np.arange(3), grad_norm, -grad_norm, grad_norm, grid,
                    full, np.zeros(len(g), bool), {"defining": full.copy()},
                    {"defining": np.arange(3)}, full_dderiv=-2 * curvature * vertex)


def test_constructed_proportionality():
    grid = make_grid(-0.5, 0.5, 0.006)
    c = 0.05
    norms = [1.0, 2.3, 4.1, 3.3, 0.7]
    scans = [parabola_scan(k, n, c * n, grid) for k, n in enumerate(norms)]
    table = evaluate_strategies(scans, [StrategySpec("sgd", lr=c)])
    np.testing.assert_allclose(table.series("sgd_lr_0.05", "distance"), 0, atol=1e-12)
    null = evaluate_strategies([parabola_scan(0, 0.0, 0.1, grid)], [StrategySpec("sgd", lr=0.1)])
    assert null.series("sgd_lr_0.1", "improvement")[0] == 0


def test_table_and_csv(tmp_path):
    grid = make_grid(-0.5, 0.5, 0.006)
    scans = [parabola_scan(k, 1.0 + k, 0.1, grid) for k in range(5)]
    table = evaluate_strategies(scans, default_specs(), kernel=3)
    out = write_strategy_csv(table, tmp_path)
    assert [p.name for p in out] == ["strategies.csv", "strategies_smoothed.csv"]
    rows = out[0].read_text().splitlines()
    assert rows[0].startswith("step,strategy") and len(rows) == 1 + 5 * 8
    big = [o for o in table.outcomes if o.label == "sgd_lr_1"]
    assert all("out_of_range" in o.flags for o in big[1:])
    summary = table.summary()
    assert summary["exact_fullbatch"]["mean_abs_distance"] == 0.0


def test_spec_validation():
    with pytest.raises(SpecificationError):
        StrategySpec("sgd")
    with pytest.raises(SpecificationError):
        StrategySpec("newton")
    assert StrategySpec("pal", mu=0.1).label == "pal_mu_0.1"
