"""Batch-size study on a fixed trajectory via resampled ("virtual") defining batches.

Growing a batch adds samples drawn without replacement from the rest of the
dataset; shrinking drops the samples whose slope along the line is highest,
so the steepest ones remain.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .analysis import Interpolated, improvement
from .errors import CapabilityError, SpecificationError
from .linescan import aggregate
from .nncore import Model, SampleBatch, fixed_mean
from .strategies import step_pal, step_sgd
from .trainer import fmt_float


def per_sample_dderiv(model: Model, params, direction, batch: SampleBatch) -> np.ndarray:
    """Exact slope of every sample loss along the unit ``direction``."""
    norm = np.linalg.norm(direction)
    if abs(norm - 1.0) > 1e-9:
        raise SpecificationError(f"direction must have unit norm, got {norm!r}")
    return model.per_sample_dderiv(params, direction, batch)


def mean_dderiv(slopes, indices) -> float:
    return fixed_mean(np.asarray(slopes)[np.asarray(indices, dtype=np.int64)])


@dataclass(frozen=True)
class PartialMean:
    """Exact running sum and count of slopes; sums of parts give the mean of the union.

    ``PartialMean.of(x) + PartialMean.of(y)`` has ``value`` equal to
    ``fixed_mean(concat(x, y))`` bit for bit, whereas combining rounded
    sub-batch means by their weights is only accurate to a few ulps.
    """

    total: Fraction
    count: int

    @classmethod
    def of(cls, values) -> "PartialMean":
        values = np.asarray(values, dtype=np.float64).ravel()
        return cls(sum((Fraction(v) for v in values.tolist()), Fraction(0)), values.size)

    def __add__(self, other: "PartialMean") -> "PartialMean":
        return PartialMean(self.total + other.total, self.count + other.count)

    @property
    def value(self) -> float:
        if self.count == 0:
            raise SpecificationError("mean of an empty set")
        # rounded sum then one division, the same two roundings fixed_mean makes
        return float(self.total) / self.count


@dataclass(frozen=True)
class VirtualBatch:
    base_step: int
    target: int
    mode: str
    members: np.ndarray
    seed: int
    rule: str = "signed"

    def __len__(self):
        return len(self.members)


def virtual_batch(defining, target: int, mode: str, slopes, seed: int = 0,
                  rule: str = "signed", base_step: int = 0) -> VirtualBatch:
    """Resize the defining batch to ``target`` samples.

    ``rule`` decides which samples a shrink removes: ``signed`` drops the
    largest signed slopes, ``magnitude`` the largest absolute slopes.  Ties
    keep the lower sample index.
    """
    defining = np.unique(np.asarray(defining, dtype=np.int64))
    slopes = np.asarray(slopes, dtype=np.float64)
    n = len(slopes)
    size = len(defining)
    if mode not in ("grow", "shrink"):
        raise SpecificationError(f"mode must be grow or shrink, got {mode!r}")
    if rule not in ("signed", "magnitude"):
        raise SpecificationError(f"unknown shrink rule {rule!r}")
    if mode == "grow":
        if not size <= target <= n:
            raise SpecificationError(f"grow target {target} outside [{size}, {n}]")
        pool = np.setdiff1d(np.arange(n), defining)
        drawn = np.random.default_rng(seed).choice(pool, target - size, replace=False)
        members = np.sort(np.concatenate([defining, drawn]))
    else:
        if not 1 <= target <= size:
            raise SpecificationError(f"shrink target {target} outside [1, {size}]")
        key = slopes[defining] if rule == "signed" else np.abs(slopes[defining])
        order = np.lexsort((defining, key))
        members = np.sort(defining[order[:target]])
    return VirtualBatch(base_step, target, mode, members, seed, rule)


def resize(defining, factor: float, slopes, seed: int = 0, rule: str = "signed",
           base_step: int = 0) -> VirtualBatch:
    size = len(np.unique(defining))
    target = int(round(factor * size))
    mode = "grow" if factor >= 1 else "shrink"
    return virtual_batch(defining, target, mode, slopes, seed, rule, base_step)


@dataclass(frozen=True)
class RatioRow:
    step: int
    factor: float
    base_dderiv: float
    scaled_dderiv: float
    ratio: float
    expected: float
    flags: tuple = ()


def ratio_study(entries, factors, seed: int = 0, rule: str = "signed") -> list:
    """``|l'_B(0)| / |l'_{fB}(0)|`` for every step and factor ``f``.

    ``entries`` yields ``(step, defining_indices, per_sample_slopes)``.
    """
    rows = []
    for step, defining, slopes in entries:
        if slopes is None:
            raise CapabilityError(f"step {step} has no per-sample slopes")
        base = mean_dderiv(slopes, np.unique(defining))
        for f in factors:
            vb = resize(defining, f, slopes, seed=seed + step, rule=rule, base_step=step)
            scaled = mean_dderiv(slopes, vb.members)
            flags = ()
            if scaled == 0 or base == 0:
                ratio = float("nan")
                flags = ("zero_dderiv",)
            else:
                ratio = abs(base) / abs(scaled)
            rows.append(RatioRow(step, float(f), base, scaled, ratio, float(f), flags))
    return rows


def scan_entries(scans):
    for scan in scans:
        yield scan.step, scan.batch, scan.per_sample_dderiv


@dataclass(frozen=True)
class BatchSizeRow:
    step: int
    size: int
    sgd_s: float
    sgd_improvement: float
    pal_s: float
    pal_improvement: float
    flags: tuple = ()


def strategy_vs_batchsize(scans, sizes, lr: float, mu: float = 0.1, seed: int = 0,
                          evaluators=None, rule: str = "signed") -> list:
    """SGD (fixed ``lr``) and PAL improvements when the defining batch is resized.

    The line stays the one of the original trajectory; only the defining-batch
    curve and its slope change.  At the original size the recorded slope and
    gradient norm are used unchanged.
    """
    evaluators = evaluators or {}
    rows = []
    for scan in scans:
        if scan.per_sample is None or scan.per_sample_dderiv is None:
            raise CapabilityError(f"scan of step {scan.step} lacks per-sample data")
        loss_at = evaluators.get(scan.step) or Interpolated(scan.curve("full"))
        l0 = scan.origin_loss
        base = np.unique(scan.batch)
        zero = scan.grid.zero_index
        i_mu = scan.grid.index_of(mu)
        if i_mu == zero:
            i_mu += 1
        mu_grid = float(scan.grid.points[i_mu])
        for size in sizes:
            factor = size / len(base)
            vb = resize(base, factor, scan.per_sample_dderiv, seed=seed + scan.step, rule=rule,
                        base_step=scan.step)
            if np.array_equal(vb.members, base):
                curve = scan.batch_curves["defining"]
                dderiv = scan.dderiv
                norm = scan.grad_norm
            else:
                curve = aggregate(scan, vb.members)
                dderiv = mean_dderiv(scan.per_sample_dderiv, vb.members)
                norm = abs(dderiv)
            flags = []
            s_sgd = step_sgd(lr, norm)
            pal = step_pal(float(curve[zero]), dderiv, float(curve[i_mu]), mu_grid)
            flags.extend(pal.flags)
            imps = []
            for s in (s_sgd, pal.s):
                try:
                    imps.append(improvement(l0, loss_at, s))
                except SpecificationError:
                    imps.append(float("nan"))
                    flags.append("out_of_range")
            rows.append(BatchSizeRow(scan.step, int(size), s_sgd, imps[0], pal.s, imps[1],
                                     tuple(flags)))
    return rows


def write_ratio_csv(rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "factor", "base_dderiv", "scaled_dderiv", "ratio", "expected", "flags"])
        for r in rows:
            w.writerow([r.step, fmt_float(r.factor), fmt_float(r.base_dderiv),
                        fmt_float(r.scaled_dderiv), fmt_float(r.ratio), fmt_float(r.expected),
                        "|".join(r.flags)])
    return path


def write_batchsize_csv(rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "batch_size", "sgd_s_upd", "sgd_improvement", "pal_s_upd",
                    "pal_improvement", "flags"])
        for r in rows:
            w.writerow([r.step, r.size, fmt_float(r.sgd_s), fmt_float(r.sgd_improvement),
                        fmt_float(r.pal_s), fmt_float(r.pal_improvement), "|".join(r.flags)])
    return path


def monotone_fraction(rows, attr: str = "pal_improvement") -> float:
    """Share of steps at which the cumulative improvement is nondecreasing in batch size."""
    table = {}
    for r in rows:
        table.setdefault(r.size, {})[r.step] = getattr(r, attr)
    sizes = sorted(table)
    steps = sorted(table[sizes[0]]) if sizes else []
    if not steps:
        return float("nan")
    cum = np.array([np.cumsum(np.nan_to_num([table[s][k] for k in steps])) for s in sizes])
    return float(np.mean(np.all(np.diff(cum, axis=0) >= 0, axis=0)))
