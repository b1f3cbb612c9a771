import numpy as np
import pytest

from sgdlines.data import BatchPlan, synth_blobs
from sgdlines.errors import CapabilityError, SpecificationError
from sgdlines.linescan import (THREADS_ENV, aggregate, default_threads, fan_scan, make_grid,
                               read_scan, scan_line, write_scan)
from sgdlines.nncore import Model, ModelSpec, fixed_mean
from sgdlines.trainer import StepRecord, replay_record


@pytest.mark.parametrize("lo,hi,res,count", [(-0.5, 0.5, 0.006, 167), (-0.2, 0.2, 0.006, 67),
                                             (-1, 1, 1, 3), (-0.3, 0.7, 0.1, 11)])
def test_grid_counts(lo, hi, res, count):
    g = make_grid(lo, hi, res)
    assert g.count == count == len(g.points)
    assert g.points[g.zero_index] == 0.0
    assert lo - 1e-12 <= g.lo and g.hi <= hi + 1e-12


def test_grid_small_example_and_errors():
    np.testing.assert_array_equal(make_grid(-1, 1, 1).points, [-1.0, 0.0, 1.0])
    for args in ((0.5, -0.5, 0.1), (-0.5, 0.5, 0.0), (0.1, 0.5, 0.1), (-0.05, 0.05, 0.1)):
        with pytest.raises(SpecificationError):
            make_grid(*args)


def test_default_threads_env(monkeypatch):
    monkeypatch.setenv(THREADS_ENV, "3")
    assert default_threads() == 3
    monkeypatch.delenv(THREADS_ENV)
    assert default_threads() == 1


def quadratic_setup(size=5, seed=0):
    model = Model(ModelSpec((size,), kind="quadratic"))
    theta = np.random.default_rng(seed).standard_normal(size)
    d = -theta / np.linalg.norm(theta)
    ds = synth_blobs(12, 2, 2, seed=seed)
    rec = StepRecord(0, np.arange(4), d, 2 * np.linalg.norm(theta), -2 * np.linalg.norm(theta),
                     float(theta @ theta), 0.0)
    return model, theta, d, ds, rec


def test_quadratic_scan_closed_form():
    model, theta, d, ds, rec = quadratic_setup()
    grid = make_grid(-0.5, 0.5, 0.006)
    scan = scan_line(model, theta, rec, grid, ds)
    exact = np.array([np.sum((theta + s * d) ** 2) for s in grid.points])
    np.testing.assert_allclose(scan.full, exact, rtol=0, atol=1e-12)
    assert scan.full_dderiv == pytest.approx(-2 * np.linalg.norm(theta), rel=1e-12)


@pytest.fixture(scope="module")
def desk_scan(blobs, small_config, small_run):
    origin, rec = replay_record(small_config, blobs, 12, small_run.snapshots)
    model = Model(small_config.model)
    grid = make_grid(-0.3, 0.3, 0.05)
    return scan_line(model, origin, rec, grid, blobs, "per_sample"), origin, rec, model, grid


def test_scan_identities(blobs, desk_scan):
    scan, origin, rec, model, grid = desk_scan
    assert scan.origin_loss == model.loss(origin, blobs.full_batch())
    np.testing.assert_array_equal(aggregate(scan, np.arange(len(blobs))), scan.full)
    np.testing.assert_array_equal(aggregate(scan, rec.batch), scan.batch_curves["defining"])
    np.testing.assert_array_equal(aggregate(scan, [7]), scan.per_sample[7])
    assert scan.batch_curves["defining"][grid.zero_index] == pytest.approx(rec.batch_loss, rel=1e-14)
    assert fixed_mean(scan.per_sample_dderiv[np.sort(rec.batch)]) == pytest.approx(rec.dderiv, rel=1e-10)


def test_granularity_and_threads(blobs, desk_scan):
    scan, origin, rec, model, grid = desk_scan
    full = scan_line(model, origin, rec, grid, blobs, "full", threads=4)
    np.testing.assert_array_equal(full.full, scan.full)
    assert full.per_sample is None
    with pytest.raises(CapabilityError):
        aggregate(full, [0])
    pb = scan_line(model, origin, rec, grid, blobs, "per_batch", extra_batches={"b1": [1, 2, 3]})
    np.testing.assert_array_equal(pb.batch_curves["b1"], aggregate(scan, [1, 2, 3]))
    with pytest.raises(SpecificationError):
        scan_line(model, origin, rec, grid, blobs, "everything")


def test_overflow_is_masked(blobs, desk_scan):
    _, origin, rec, model, _ = desk_scan
    grid = make_grid(-1e308, 1e308, 1e307)
    scan = scan_line(model, origin, rec, grid, blobs)
    assert scan.mask.any() and not scan.mask[grid.zero_index]
    assert not scan.valid


def test_archive_roundtrip(tmp_path, desk_scan):
    scan = desk_scan[0]
    a = write_scan(scan, tmp_path / "a")
    back = read_scan(a)
    b = write_scan(back, tmp_path / "b")
    for f in sorted(p.name for p in a.iterdir()):
        assert (a / f).read_bytes() == (b / f).read_bytes(), f
    np.testing.assert_array_equal(back.per_sample, scan.per_sample)
    assert back.grid == scan.grid


def test_fan(blobs, small_config, small_run):
    model = Model(small_config.model)
    origin = small_run.snapshots[20][0]
    grid = make_grid(-0.2, 0.2, 0.05)
    same = [np.arange(16), np.arange(16)]
    a, b = fan_scan(model, origin, 2, blobs, BatchPlan(16), grid, batches=same)
    np.testing.assert_array_equal(a.full, b.full)
    scans = fan_scan(model, origin, 4, blobs, BatchPlan(16, seed=9), grid)
    assert len({tuple(s.batch) for s in scans}) == 4
