import numpy as np
import pytest

from sgdlines.analysis import ExactLine
from sgdlines.batchsim import (BatchSizeRow, PartialMean, mean_dderiv, monotone_fraction, per_sample_dderiv,
                               ratio_study, resize, strategy_vs_batchsize, virtual_batch,
                               write_ratio_csv)
from sgdlines.errors import CapabilityError, SpecificationError
from sgdlines.linescan import make_grid, scan_line
from sgdlines.nncore import Model, fixed_mean
from sgdlines.strategies import StrategySpec, evaluate_strategies
from sgdlines.trainer import replay_record


def test_shrink_keeps_steepest():
    vb = virtual_batch([0, 1, 2, 3], 2, "shrink", np.array([-3.0, -2.0, -1.0, 0.0]))
    np.testing.assert_array_equal(vb.members, [0, 1])
    ties = virtual_batch([0, 1, 2, 3], 2, "shrink", np.array([-1.0, -1.0, -1.0, 0.0]))
    np.testing.assert_array_equal(ties.members, [0, 1])
    mag = virtual_batch([0, 1, 2], 1, "shrink", np.array([-1.0, 0.5, 4.0]), rule="magnitude")
    np.testing.assert_array_equal(mag.members, [1])


def test_identity_and_determinism():
    slopes = np.random.default_rng(0).standard_normal(30)
    base = np.array([4, 9, 2, 17])
    for mode in ("grow", "shrink"):
        np.testing.assert_array_equal(virtual_batch(base, 4, mode, slopes).members, np.sort(base))
    a = virtual_batch(base, 12, "grow", slopes, seed=5)
    b = virtual_batch(base, 12, "grow", slopes, seed=5)
    np.testing.assert_array_equal(a.members, b.members)
    assert set(base) <= set(a.members) and len(set(a.members)) == 12
    with pytest.raises(SpecificationError):
        virtual_batch(base, 31, "grow", slopes)
    with pytest.raises(SpecificationError):
        virtual_batch(base, 0, "shrink", slopes)


@pytest.mark.parametrize("f", [1, 2, 4, 8])
def test_dilution_ratio_exact(f):
    n, size = 200, 16
    slopes = np.zeros(n)
    defining = np.arange(size) * 3
    slopes[defining] = -0.37
    rows = ratio_study([(0, defining, slopes)], [f])
    assert rows[0].ratio == f


def test_zero_scaled_slope_flagged():
    slopes = np.array([1.0, -1.0, 0.0, 0.0])
    rows = ratio_study([(0, [0, 1], slopes)], [2.0])
    assert np.isnan(rows[0].ratio) and rows[0].flags == ("zero_dderiv",)


def test_partial_means_compose_exactly():
    rng = np.random.default_rng(3)
    for _ in range(100):
        x = rng.standard_normal(64) * 10.0 ** rng.uniform(-6, 6, 64)
        cuts = np.sort(rng.choice(np.arange(1, 64), 3, replace=False))
        parts = np.split(rng.permutation(x), cuts)
        total = PartialMean.of(parts[0])
        for p in parts[1:]:
            total = total + PartialMean.of(p)
        assert total.value == fixed_mean(x)


@pytest.fixture(scope="module")
def per_sample_scan(blobs, small_config, small_run):
    origin, rec = replay_record(small_config, blobs, 25, small_run.snapshots)
    model = Model(small_config.model)
    scan = scan_line(model, origin, rec, make_grid(-0.5, 0.5, 0.006), blobs, "per_sample")
    return scan, model, origin, rec


def test_per_sample_slopes(blobs, per_sample_scan):
    scan, model, origin, rec = per_sample_scan
    slopes = per_sample_dderiv(model, origin, rec.direction, blobs.full_batch())
    np.testing.assert_array_equal(slopes, scan.per_sample_dderiv)
    assert mean_dderiv(slopes, rec.batch) == pytest.approx(-rec.grad_norm, rel=1e-10)
    with pytest.raises(SpecificationError):
        per_sample_dderiv(model, origin, 2 * rec.direction, blobs.full_batch())


def test_batchsize_identity_rows(blobs, per_sample_scan):
    scan, model, origin, rec = per_sample_scan
    evs = {scan.step: ExactLine(model, blobs, origin, rec.direction)}
    rows = strategy_vs_batchsize([scan], [len(scan.batch), len(blobs)], lr=0.1, mu=0.1,
                                 evaluators=evs)
    table = evaluate_strategies([scan], [StrategySpec("sgd", lr=0.1), StrategySpec("pal", mu=0.1),
                                         StrategySpec("fbpal", mu=0.1)], evs)
    same, full = rows
    assert same.sgd_s == table.series("sgd_lr_0.1", "s_upd")[0]
    assert same.sgd_improvement == table.series("sgd_lr_0.1", "improvement")[0]
    assert same.pal_s == table.series("pal_mu_0.1", "s_upd")[0]
    assert same.pal_improvement == table.series("pal_mu_0.1", "improvement")[0]
    assert full.pal_s == table.series("fbpal_mu_0.1", "s_upd")[0]
    assert full.pal_improvement == table.series("fbpal_mu_0.1", "improvement")[0]


def test_batchsize_needs_matrix(blobs, small_config, small_run, tmp_path):
    origin, rec = replay_record(small_config, blobs, 25, small_run.snapshots)
    scan = scan_line(Model(small_config.model), origin, rec, make_grid(-0.2, 0.2, 0.05), blobs)
    with pytest.raises(CapabilityError):
        strategy_vs_batchsize([scan], [8], lr=0.1)
    rows = ratio_study([(scan.step, scan.batch, scan.per_sample_dderiv)], [0.5, 2.0])
    path = write_ratio_csv(rows, tmp_path / "ratio.csv")
    assert path.read_text().splitlines()[0] == "step,factor,base_dderiv,scaled_dderiv,ratio,expected,flags"


def test_resize_factor():
    slopes = np.linspace(-1, 1, 40)
    assert len(resize(np.arange(8), 0.5, slopes)) == 4
    assert len(resize(np.arange(8), 4, slopes)) == 32


def test_monotone_fraction():
    rows = [BatchSizeRow(k, z, 0, 0, 0, z * 0.1, ()) for k in range(3) for z in (8, 16)]
    assert monotone_fraction(rows) == 1.0
