"""Loss along the line ``origin + s * direction`` on a uniform grid of step sizes."""

from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import BatchPlan, Dataset, batch_for_step, batches_per_epoch
from .errors import CapabilityError, IntegrityError, SpecificationError
from .nncore import Model, axpy_point, fixed_mean
from .trainer import StepRecord, fmt_float, read_f64, write_f64

THREADS_ENV = "SGDLINES_THREADS"
MASKED_LIMIT = 0.10
SNAP_RULE = "inward: points are k*resolution for ceil(lo/res) <= k <= floor(hi/res)"
_EPS = 1e-9


def default_threads() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


@dataclass(frozen=True)
class Grid:
    """Step sizes ``k * resolution`` for integer ``k`` in ``[k_lo, k_hi]``.

    Every point is an integer multiple of the resolution, so ``s = 0`` is
    always a grid point.  The requested bounds are snapped inwards.
    """

    k_lo: int
    k_hi: int
    resolution: float
    requested: tuple = (None, None)

    @property
    def lo(self) -> float:
        return self.k_lo * self.resolution

    @property
    def hi(self) -> float:
        return self.k_hi * self.resolution

    @property
    def count(self) -> int:
        return self.k_hi - self.k_lo + 1

    @property
    def points(self) -> np.ndarray:
        return np.arange(self.k_lo, self.k_hi + 1) * self.resolution

    @property
    def zero_index(self) -> int:
        return -self.k_lo

    def index_of(self, s: float) -> int:
        """Index of the grid point nearest to ``s`` (clipped to the grid)."""
        k = int(round(s / self.resolution))
        return min(max(k, self.k_lo), self.k_hi) - self.k_lo

    def snap(self, s: float) -> float:
        return float(self.points[self.index_of(s)])

    def contains(self, s: float) -> bool:
        return self.lo - _EPS <= s <= self.hi + _EPS

    def to_dict(self) -> dict:
        return {"lo": self.lo, "hi": self.hi, "resolution": self.resolution,
                "count": self.count, "k_lo": self.k_lo, "k_hi": self.k_hi,
                "requested_lo": self.requested[0], "requested_hi": self.requested[1],
                "snap_rule": SNAP_RULE}

    @classmethod
    def from_dict(cls, d: dict) -> "Grid":
        return cls(int(d["k_lo"]), int(d["k_hi"]), float(d["resolution"]),
                   (d.get("requested_lo"), d.get("requested_hi")))


def make_grid(lo: float, hi: float, resolution: float) -> Grid:
    if not resolution > 0:
        raise SpecificationError(f"resolution must be positive, got {resolution}")
    if not lo < 0 < hi:
        raise SpecificationError(f"need lo < 0 < hi, got [{lo}, {hi}]")
    k_lo = math.ceil(lo / resolution - _EPS)
    k_hi = math.floor(hi / resolution + _EPS)
    if k_lo >= 0 or k_hi <= 0:
        raise SpecificationError(f"interval [{lo}, {hi}] holds no grid point besides 0")
    return Grid(k_lo, k_hi, float(resolution), (float(lo), float(hi)))


@dataclass
class LineScan:
    """Measured losses along one line.

    ``batch_curves`` always holds the ``"defining"`` curve of the batch that
    set the direction; ``per_sample`` is the optional ``n_samples x n_grid``
    loss matrix.
    """

    step: int
    kind: str
    batch: np.ndarray
    grad_norm: float
    dderiv: float
    momentum_norm: float
    grid: Grid
    full: np.ndarray
    mask: np.ndarray
    batch_curves: dict
    batch_members: dict
    per_sample: np.ndarray | None = None
    per_sample_dderiv: np.ndarray | None = None
    full_dderiv: float | None = None
    origin: np.ndarray | None = None
    direction: np.ndarray | None = None
    dataset_fingerprint: str = ""
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def origin_loss(self) -> float:
        return float(self.full[self.grid.zero_index])

    @property
    def masked_fraction(self) -> float:
        return float(self.mask.mean())

    @property
    def valid(self) -> bool:
        return self.masked_fraction <= MASKED_LIMIT

    def curve(self, which: str = "full"):
        from .analysis import Curve
        if which == "full":
            return Curve(self.grid.points, self.full, self.mask)
        values = self.batch_curves[which]
        return Curve(self.grid.points, values, ~np.isfinite(values))


def _curve_from_rows(matrix: np.ndarray, rows) -> np.ndarray:
    sub = matrix[np.sort(np.asarray(rows, dtype=np.int64))]
    return np.array([fixed_mean(sub[:, j]) for j in range(matrix.shape[1])])


def scan_line(model: Model, origin, record: StepRecord, grid: Grid, dataset: Dataset,
              granularity: str = "full", extra_batches: dict | None = None,
              threads: int | None = None, keep_vectors: bool = True,
              config_hash: str = "") -> LineScan:
    """Evaluate every sample loss at each grid point of the line through ``origin``.

    ``granularity`` selects what is kept: ``full`` (full-batch and defining
    batch curves), ``per_batch`` (plus one curve per entry of
    ``extra_batches``) or ``per_sample`` (plus the whole loss matrix).  The
    per-sample slopes at the origin are always kept; they are cheap.
    """
    if granularity not in ("full", "per_batch", "per_sample"):
        raise SpecificationError(f"unknown granularity {granularity!r}")
    origin = model.check_params(origin)
    direction = np.asarray(record.direction, dtype=np.float64)
    if record.direction is None:
        raise SpecificationError(f"step {record.step} carries no direction")
    norm = np.linalg.norm(direction)
    if not record.zero_direction and abs(norm - 1.0) > 1e-9:
        raise SpecificationError(f"direction of step {record.step} is not unit, norm={norm}")
    full_batch = dataset.full_batch()
    points = grid.points

    def evaluate(i):
        theta = axpy_point(origin, float(points[i]), direction)
        with np.errstate(all="ignore"):
            return model.per_sample_losses(theta, full_batch, check=False)

    threads = threads or default_threads()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            columns = list(pool.map(evaluate, range(grid.count)))
    else:
        columns = [evaluate(i) for i in range(grid.count)]
    matrix = np.stack(columns, axis=1)
    full = np.array([fixed_mean(c) for c in columns])
    mask = ~np.isfinite(full)

    members = {"defining": np.sort(np.asarray(record.batch, dtype=np.int64))}
    if granularity != "full" and extra_batches:
        for key, idx in extra_batches.items():
            members[str(key)] = np.sort(np.asarray(idx, dtype=np.int64))
    curves = {key: _curve_from_rows(matrix, idx) for key, idx in members.items()}

    slopes = None
    full_dderiv = None
    if not record.zero_direction:
        slopes = model.per_sample_dderiv(origin, direction, full_batch)
        full_dderiv = fixed_mean(slopes)
    return LineScan(
        step=record.step, kind=record.kind, batch=members["defining"],
        grad_norm=record.grad_norm, dderiv=record.dderiv, momentum_norm=record.momentum_norm,
        grid=grid, full=full, mask=mask, batch_curves=curves, batch_members=members,
        per_sample=matrix if granularity == "per_sample" else None,
        per_sample_dderiv=slopes,
        full_dderiv=full_dderiv,
        origin=origin.copy() if keep_vectors else None,
        direction=direction.copy() if keep_vectors else None,
        dataset_fingerprint=dataset.fingerprint, config_hash=config_hash)


def aggregate(scan: LineScan, indices) -> np.ndarray:
    """Column means of the per-sample matrix over ``indices``."""
    if scan.per_sample is None:
        raise CapabilityError(f"scan of step {scan.step} holds no per-sample matrix")
    idx = np.asarray(indices, dtype=np.int64)
    if idx.size == 0 or idx.min() < 0 or idx.max() >= scan.per_sample.shape[0]:
        raise SpecificationError("indices must be a non-empty subset of the dataset")
    return _curve_from_rows(scan.per_sample, idx)


def fan_scan(model: Model, origin, count: int, dataset: Dataset, plan: BatchPlan, grid: Grid,
             batches=None, granularity: str = "full", threads: int | None = None) -> list:
    """Scans along ``count`` noisy negative-gradient directions from one origin.

    Batch ``j`` is the first batch of epoch ``plan.epoch + j`` unless explicit
    ``batches`` are given.
    """
    if count < 2:
        raise SpecificationError("a fan needs at least two directions")
    n = len(dataset)
    per_epoch = batches_per_epoch(n, plan.batch_size)
    if batches is None:
        batches = [batch_for_step(n, plan, j * per_epoch) for j in range(count)]
    if len(batches) != count:
        raise SpecificationError(f"expected {count} batches, got {len(batches)}")
    scans = []
    for j, idx in enumerate(batches):
        loss, grad = model.loss_and_grad(origin, dataset.batch(idx))
        gnorm = float(np.linalg.norm(grad))
        if gnorm < 1e-15:
            rec = StepRecord(j, idx, np.zeros_like(grad), gnorm, 0.0, loss, gnorm,
                             zero_direction=True)
        else:
            direction = -grad / gnorm
            rec = StepRecord(j, idx, direction, gnorm, float(np.dot(grad, direction)), loss, gnorm)
        scans.append(scan_line(model, origin, rec, grid, dataset, granularity, threads=threads))
    return scans


# ---------------------------------------------------------------------------
# Archive format
# ---------------------------------------------------------------------------


def _manifest(scan: LineScan) -> dict:
    return {
        "step": scan.step,
        "direction_kind": scan.kind,
        "grad_norm": scan.grad_norm,
        "dderiv": scan.dderiv,
        "momentum_norm": scan.momentum_norm,
        "full_dderiv": scan.full_dderiv,
        "grid": scan.grid.to_dict(),
        "dataset_fingerprint": scan.dataset_fingerprint,
        "config_hash": scan.config_hash,
        "n_samples": None if scan.per_sample is None else int(scan.per_sample.shape[0]),
        "batches": {k: [int(i) for i in v] for k, v in scan.batch_members.items()},
        "masked_fraction": scan.masked_fraction,
        "valid": scan.valid,
        "files": sorted(_files(scan)),
        "extra": scan.extra,
    }


def _files(scan: LineScan):
    files = ["manifest.json", "full.csv", "batches.csv"]
    if scan.per_sample is not None:
        files.append("per_sample.f64le")
    if scan.per_sample_dderiv is not None:
        files.append("per_sample_dderiv.f64le")
    if scan.origin is not None:
        files.append("origin.f64le")
    if scan.direction is not None:
        files.append("direction.f64le")
    return files


def write_scan(scan: LineScan, directory) -> Path:
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(_manifest(scan), indent=2, sort_keys=True) + "\n")
    points = scan.grid.points
    with (out / "full.csv").open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["s", "loss", "masked"])
        for s, v, m in zip(points, scan.full, scan.mask):
            w.writerow([fmt_float(s), fmt_float(v), int(m)])
    keys = list(scan.batch_curves)
    with (out / "batches.csv").open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["s"] + keys)
        for i, s in enumerate(points):
            w.writerow([fmt_float(s)] + [fmt_float(scan.batch_curves[k][i]) for k in keys])
    if scan.per_sample is not None:
        write_f64(out / "per_sample.f64le", scan.per_sample)
    if scan.per_sample_dderiv is not None:
        write_f64(out / "per_sample_dderiv.f64le", scan.per_sample_dderiv)
    if scan.origin is not None:
        write_f64(out / "origin.f64le", scan.origin)
    if scan.direction is not None:
        write_f64(out / "direction.f64le", scan.direction)
    return out


def read_scan(directory) -> LineScan:
    root = Path(directory)
    man_path = root / "manifest.json"
    if not man_path.exists():
        raise IntegrityError(f"missing {man_path}")
    man = json.loads(man_path.read_text())
    grid = Grid.from_dict(man["grid"])
    full, mask = [], []
    with (root / "full.csv").open() as f:
        rows = list(csv.DictReader(f))
    if len(rows) != grid.count:
        raise IntegrityError(f"{root / 'full.csv'}: {len(rows)} rows, grid has {grid.count}")
    for row, s in zip(rows, grid.points):
        if float(row["s"]) != s:
            raise IntegrityError(f"{root / 'full.csv'}: step size {row['s']} off grid")
        full.append(float(row["loss"]))
        mask.append(bool(int(row["masked"])))
    with (root / "batches.csv").open() as f:
        reader = csv.reader(f)
        header = next(reader)
        cols = list(zip(*reader)) if grid.count else []
    curves = {k: np.array([float(v) for v in cols[i + 1]]) for i, k in enumerate(header[1:])}
    members = {k: np.asarray(v, dtype=np.int64) for k, v in man["batches"].items()}
    files = set(man.get("files", []))
    n = man.get("n_samples")
    per_sample = None
    if "per_sample.f64le" in files:
        per_sample = read_f64(root / "per_sample.f64le", n * grid.count).reshape(n, grid.count)
    slopes = read_f64(root / "per_sample_dderiv.f64le") if "per_sample_dderiv.f64le" in files else None
    origin = read_f64(root / "origin.f64le") if "origin.f64le" in files else None
    direction = read_f64(root / "direction.f64le") if "direction.f64le" in files else None
    return LineScan(
        step=int(man["step"]), kind=man["direction_kind"], batch=members["defining"],
        grad_norm=man["grad_norm"], dderiv=man["dderiv"], momentum_norm=man["momentum_norm"],
        grid=grid, full=np.array(full), mask=np.array(mask, dtype=bool), batch_curves=curves,
        batch_members=members, per_sample=per_sample, per_sample_dderiv=slopes,
        full_dderiv=man.get("full_dderiv"), origin=origin, direction=direction,
        dataset_fingerprint=man.get("dataset_fingerprint", ""),
        config_hash=man.get("config_hash", ""), extra=man.get("extra", {}))
