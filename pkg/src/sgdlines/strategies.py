"""Update-step rules scored on measured lines: SGD, PAL, FBPAL and exact searches."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .analysis import Curve, Interpolated, argmin_refined, improvement, moving_average
from .errors import SpecificationError
from .trainer import fmt_float

DEGENERATE = 1e-15
KINDS = ("sgd", "pal", "fbpal", "exact_minibatch", "exact_fullbatch")


@dataclass(frozen=True)
class StrategySpec:
    kind: str
    lr: float | None = None
    mu: float | None = None
    label: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise SpecificationError(f"unknown strategy kind {self.kind!r}")
        if self.kind == "sgd" and not (self.lr and self.lr > 0):
            raise SpecificationError("sgd needs a positive learning rate")
        if self.kind in ("pal", "fbpal") and not (self.mu and self.mu > 0):
            raise SpecificationError(f"{self.kind} needs a positive mu")
        if self.label is None:
            suffix = {"sgd": f"_lr_{self.lr:g}" if self.lr else "",
                      "pal": f"_mu_{self.mu:g}" if self.mu else "",
                      "fbpal": f"_mu_{self.mu:g}" if self.mu else ""}.get(self.kind, "")
            object.__setattr__(self, "label", self.kind + suffix)


def default_specs(lrs=(1.0, 0.1, 0.05, 0.01), mu=0.1) -> list:
    specs = [StrategySpec("sgd", lr=lr) for lr in lrs]
    specs += [StrategySpec("pal", mu=mu), StrategySpec("fbpal", mu=mu),
              StrategySpec("exact_minibatch"), StrategySpec("exact_fullbatch")]
    return specs


class StepResult(NamedTuple):
    s: float
    flags: tuple = ()


def step_sgd(lr: float, grad_norm: float) -> float:
    """Distance travelled along the unit direction by ``-lr * g``."""
    if grad_norm < 0:
        raise SpecificationError("gradient norm cannot be negative")
    return lr * grad_norm


def step_pal(l0: float, dderiv: float, l_mu: float, mu: float,
             fallback_lr: float | None = None) -> StepResult:
    """Vertex of the parabola fixed by l(0), l'(0) and l(mu).

    With no positive curvature the step falls back to ``fallback_lr * |l'(0)|``
    (``fallback_lr`` defaults to ``mu``) and the result is flagged.
    """
    if not mu > 0:
        raise SpecificationError(f"mu must be positive, got {mu}")
    if not all(np.isfinite([l0, dderiv, l_mu])):
        raise SpecificationError("PAL inputs must be finite")
    excess = l_mu - l0 - dderiv * mu
    fallback = (mu if fallback_lr is None else fallback_lr) * abs(dderiv)
    if abs(2.0 * excess) < DEGENERATE:
        return StepResult(fallback, ("degenerate_curvature",))
    if excess < 0:
        return StepResult(fallback, ("negative_curvature",))
    return StepResult(-dderiv * mu * mu / (2.0 * excess))


def _value_at(curve: Curve, s: float):
    i = int(np.argmin(np.abs(curve.s - s)))
    return i, float(curve.losses[i])


def step_fbpal(curve: Curve, mu: float, dderiv: float | None = None) -> StepResult:
    """PAL on the full-batch curve.

    ``mu`` is snapped to the nearest grid point (the nearest unmasked one if
    that is masked).  Without an exact ``dderiv`` the slope at the origin is
    the centred difference over the two neighbouring grid points.
    """
    flags = []
    zero = int(np.argmin(np.abs(curve.s)))
    if curve.s[zero] != 0 or curve.mask[zero]:
        raise SpecificationError("curve has no unmasked point at s = 0")
    l0 = float(curve.losses[zero])
    i, _ = _value_at(curve, mu)
    if curve.s[i] <= 0:
        i = zero + 1
    if curve.mask[i]:
        candidates = np.flatnonzero(curve.valid & (curve.s > 0))
        if not len(candidates):
            raise SpecificationError("no unmasked grid point with s > 0")
        i = int(candidates[np.argmin(np.abs(curve.s[candidates] - mu))])
        flags.append("mu_fallback")
    mu_grid = float(curve.s[i])
    if dderiv is None:
        if zero == 0 or zero == len(curve) - 1 or curve.mask[zero - 1] or curve.mask[zero + 1]:
            raise SpecificationError("centred difference needs both neighbours of s = 0")
        h = curve.s[zero + 1] - curve.s[zero - 1]
        dderiv = float((curve.losses[zero + 1] - curve.losses[zero - 1]) / h)
        flags.append("fd_slope")
    res = step_pal(l0, dderiv, float(curve.losses[i]), mu_grid)
    return StepResult(res.s, tuple(flags) + res.flags)


def step_exact(curve: Curve) -> StepResult:
    am = argmin_refined(curve)
    return StepResult(am.s, ("boundary",) if am.boundary else ())


@dataclass(frozen=True)
class StrategyOutcome:
    step: int
    label: str
    s_upd: float
    s_opt: float
    improvement: float
    flags: tuple = ()

    @property
    def distance(self) -> float:
        return self.s_opt - self.s_upd


@dataclass
class StrategyTable:
    outcomes: list
    labels: list
    steps: list
    kernel: int = 25
    s_opt_boundary: dict = field(default_factory=dict)

    def series(self, label: str, metric: str) -> np.ndarray:
        vals = [getattr(o, metric) for o in self.outcomes if o.label == label]
        return np.array(vals, dtype=np.float64)

    def smoothed(self, label: str, metric: str) -> np.ndarray:
        return moving_average(self.series(label, metric), min(self.kernel, _odd_floor(len(self.steps))))

    def cumulative(self, label: str, metric: str = "improvement") -> np.ndarray:
        return np.cumsum(np.nan_to_num(self.series(label, metric)))

    def summary(self) -> dict:
        out = {}
        for label in self.labels:
            dist = self.series(label, "distance")
            imp = self.series(label, "improvement")
            out[label] = {
                "mean_s_upd": _nanmean(self.series(label, "s_upd")),
                "mean_distance": _nanmean(dist),
                "mean_abs_distance": _nanmean(np.abs(dist)),
                "mean_overshoot": _nanmean(-dist),
                "mean_improvement": _nanmean(imp),
                "total_improvement": float(np.nansum(imp)),
            }
        return out


def _odd_floor(n: int) -> int:
    return max(1, n if n % 2 else n - 1)


def _nanmean(x) -> float:
    x = np.asarray(x, dtype=np.float64)
    x = x[np.isfinite(x)]
    return float(x.mean()) if x.size else float("nan")


def update_norm(scan) -> float:
    """Length of the unscaled update vector: ``||g||`` without momentum, ``||m||`` with."""
    return scan.momentum_norm if scan.kind == "momentum" else scan.grad_norm


def strategy_step(spec: StrategySpec, scan, full_curve=None) -> StepResult:
    full_curve = scan.curve("full") if full_curve is None else full_curve
    if spec.kind == "sgd":
        return StepResult(step_sgd(spec.lr, update_norm(scan)))
    if spec.kind == "pal":
        mini = scan.curve("defining")
        zero = scan.grid.zero_index
        i = scan.grid.index_of(spec.mu)
        if i == zero:
            i += 1
        if mini.mask[zero] or mini.mask[i]:
            return StepResult(float("nan"), ("masked_input",))
        return step_pal(float(mini.losses[zero]), scan.dderiv, float(mini.losses[i]),
                        float(scan.grid.points[i]))
    if spec.kind == "fbpal":
        return step_fbpal(full_curve, spec.mu, scan.full_dderiv)
    if spec.kind == "exact_minibatch":
        return step_exact(scan.curve("defining"))
    return step_exact(full_curve)


def evaluate_strategies(scans, specs, evaluators=None, kernel: int = 25) -> StrategyTable:
    """Score every strategy on every scanned line.

    ``evaluators`` maps a step index to a callable returning the exact
    full-batch loss at any step size; without one, losses are interpolated on
    the grid and steps leaving the interval get a NaN improvement.  Scans are
    never modified.
    """
    evaluators = evaluators or {}
    outcomes, steps, boundary = [], [], {}
    for scan in scans:
        full = scan.curve("full")
        opt = argmin_refined(full)
        boundary[scan.step] = opt.boundary
        steps.append(scan.step)
        l0 = scan.origin_loss
        exact = evaluators.get(scan.step)
        interp = Interpolated(full)
        for spec in specs:
            res = strategy_step(spec, scan, full)
            flags = list(res.flags)
            if opt.boundary:
                flags.append("s_opt_boundary")
            if not np.isfinite(res.s):
                imp = float("nan")
            elif exact is not None:
                imp = improvement(l0, exact, res.s)
            elif scan.grid.contains(res.s):
                imp = improvement(l0, interp, res.s)
                flags.append("interpolated")
            else:
                imp = float("nan")
                flags.append("out_of_range")
            outcomes.append(StrategyOutcome(scan.step, spec.label, float(res.s), opt.s, imp,
                                            tuple(flags)))
    return StrategyTable(outcomes, [s.label for s in specs], steps, kernel, boundary)


def write_strategy_csv(table: StrategyTable, out_dir) -> list:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    raw = out / "strategies.csv"
    with raw.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "strategy", "s_upd", "s_opt", "distance", "improvement", "flags"])
        for o in table.outcomes:
            w.writerow([o.step, o.label, fmt_float(o.s_upd), fmt_float(o.s_opt),
                        fmt_float(o.distance), fmt_float(o.improvement), "|".join(o.flags)])
    smooth = out / "strategies_smoothed.csv"
    with smooth.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["step", "strategy", "kernel", "s_upd", "distance", "improvement",
                    "cumulative_distance", "cumulative_improvement"])
        k = min(table.kernel, _odd_floor(len(table.steps)))
        for label in table.labels:
            cols = [table.smoothed(label, m) for m in ("s_upd", "distance", "improvement")]
            cum_d = table.cumulative(label, "distance")
            cum_i = table.cumulative(label, "improvement")
            for j, step in enumerate(table.steps):
                w.writerow([step, label, k] + [fmt_float(c[j]) for c in cols]
                           + [fmt_float(cum_d[j]), fmt_float(cum_i[j])])
    return [raw, smooth]
