"""Curve analytics: min-shift distances, polynomial fits, refined minima, smoothing."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .errors import NumericError, SpecificationError
from .nncore import fixed_mean

_EPS = 1e-9

DEFAULT_WINDOWS = {0.0: (-0.2, 0.2), 0.9: (-0.5, 0.5)}


def default_window(momentum: float) -> tuple:
    return DEFAULT_WINDOWS[0.0] if momentum == 0 else DEFAULT_WINDOWS[0.9]


@dataclass(frozen=True)
class Curve:
    """Losses sampled on a grid of step sizes.

    Adding a constant keeps the original samples in ``base`` and the constant
    in ``offset``; ``losses`` is their rounded sum.  Min-shifting works on
    ``base``, so it removes any added constant without rounding error.
    """

    s: np.ndarray
    losses: np.ndarray
    mask: np.ndarray | None = None
    base: np.ndarray | None = field(default=None, repr=False, compare=False)
    offset: float = 0.0

    def __post_init__(self):
        s = np.asarray(self.s, dtype=np.float64)
        losses = np.asarray(self.losses, dtype=np.float64)
        if s.shape != losses.shape or s.ndim != 1:
            raise SpecificationError("s and losses must be 1-d arrays of equal length")
        mask = ~np.isfinite(losses) if self.mask is None else (
            np.asarray(self.mask, dtype=bool) | ~np.isfinite(losses))
        if mask.shape != s.shape:
            raise SpecificationError("mask length differs from curve length")
        base = losses if self.base is None else np.asarray(self.base, dtype=np.float64)
        object.__setattr__(self, "s", s)
        object.__setattr__(self, "losses", losses)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "base", base)

    def __len__(self):
        return len(self.s)

    def __add__(self, const: float) -> "Curve":
        offset = self.offset + float(const)
        return Curve(self.s, self.base + offset, self.mask, self.base, offset)

    def restrict(self, window=None) -> "Curve":
        if window is None:
            return self
        lo, hi = window
        keep = (self.s >= lo - _EPS) & (self.s <= hi + _EPS)
        return Curve(self.s[keep], self.losses[keep], self.mask[keep], self.base[keep],
                     self.offset)

    @property
    def valid(self) -> np.ndarray:
        return ~self.mask

    @property
    def resolution(self) -> float:
        return float(self.s[1] - self.s[0]) if len(self.s) > 1 else float("nan")


def shift_to_zero(curve: Curve, window=None) -> Curve:
    """Restrict to ``window`` and subtract the smallest unmasked loss there."""
    sub = curve.restrict(window)
    if sub.valid.sum() < 3:
        raise SpecificationError(f"window {window} holds fewer than 3 unmasked points")
    low = sub.base[sub.valid].min()
    return Curve(sub.s, np.where(sub.valid, sub.base - low, sub.base), sub.mask)


def _same_grid(a: Curve, b: Curve):
    if a.s.shape != b.s.shape or not np.array_equal(a.s, b.s):
        raise SpecificationError("curves are sampled on different grids")


def _mae_shifted(a: Curve, b: Curve) -> float:
    joint = a.valid & b.valid
    if not joint.any():
        return float("nan")
    return fixed_mean(np.abs(a.losses[joint] - b.losses[joint]))


def mae_distance(a: Curve, b: Curve, window=None) -> float:
    """Mean absolute difference of the two min-shifted curves on ``window``."""
    _same_grid(a, b)
    return _mae_shifted(shift_to_zero(a, window), shift_to_zero(b, window))


def distance_matrix(curves, window=None):
    """Pairwise MAE shape distances and the series for consecutive curves.

    Returns ``(matrix, consecutive)`` where ``consecutive[i]`` is the distance
    between curves ``i`` and ``i + 1``.
    """
    curves = list(curves)
    if not curves:
        raise SpecificationError("no curves given")
    for c in curves[1:]:
        _same_grid(curves[0], c)
    shifted = [shift_to_zero(c, window) for c in curves]
    n = len(shifted)
    mat = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            mat[i, j] = mat[j, i] = _mae_shifted(shifted[i], shifted[j])
    consecutive = np.array([mat[i, i + 1] for i in range(n - 1)])
    return mat, consecutive


@dataclass(frozen=True)
class PolyFit:
    """Least-squares polynomial ``a*s**2 + b*s + c`` (``a`` is None for degree 1)."""

    degree: int
    c: float
    b: float
    a: float | None
    mae: float
    rmse: float
    window: tuple

    @property
    def curvature(self) -> float:
        return 2.0 * self.a if self.a is not None else 0.0

    @property
    def slope(self) -> float:
        return self.b

    @property
    def vertex(self) -> float:
        if self.a is None or self.a == 0:
            return float("nan")
        return -self.b / (2.0 * self.a)

    def __call__(self, s):
        s = np.asarray(s, dtype=np.float64)
        return (self.a or 0.0) * s * s + self.b * s + self.c


def polyfit(curve: Curve, degree: int, window=None) -> PolyFit:
    if degree not in (1, 2):
        raise SpecificationError(f"degree must be 1 or 2, got {degree}")
    sub = curve.restrict(window)
    s = sub.s[sub.valid]
    y = sub.losses[sub.valid]
    if len(s) < degree + 1:
        raise SpecificationError(f"need {degree + 1} unmasked points, have {len(s)}")
    vander = np.vander(s, degree + 1, increasing=True)
    coef, _, rank, _ = np.linalg.lstsq(vander, y, rcond=None)
    if rank < degree + 1:
        raise NumericError("rank-deficient polynomial fit")
    resid = y - vander @ coef
    mae = fixed_mean(np.abs(resid))
    rmse = math.sqrt(fixed_mean(resid * resid))
    win = tuple(window) if window is not None else (float(curve.s[0]), float(curve.s[-1]))
    a = float(coef[2]) if degree == 2 else None
    return PolyFit(degree, float(coef[0]), float(coef[1]), a, mae, rmse, win)


class Argmin(NamedTuple):
    s: float
    index: int
    boundary: bool
    refined: bool


def argmin_refined(curve: Curve) -> Argmin:
    """Grid minimiser (smallest s on ties) refined by a three-point parabola.

    The refinement uses the two grid neighbours and only applies when the
    three points are interior, unmasked and convex; it can move the result
    by at most half a grid cell.
    """
    valid = np.flatnonzero(curve.valid)
    if len(valid) < 3:
        raise SpecificationError("need at least 3 unmasked points")
    i = int(valid[np.argmin(curve.losses[valid])])
    s0 = float(curve.s[i])
    if i == valid[0] or i == valid[-1]:
        return Argmin(s0, i, True, False)
    if curve.mask[i - 1] or curve.mask[i + 1]:
        return Argmin(s0, i, False, False)
    fm, f0, fp = curve.losses[i - 1], curve.losses[i], curve.losses[i + 1]
    h_left = s0 - curve.s[i - 1]
    h_right = curve.s[i + 1] - s0
    h = 0.5 * (h_left + h_right)
    denom = fm - 2.0 * f0 + fp
    if not denom > 0:
        return Argmin(s0, i, False, False)
    s = s0 + 0.5 * h * (fm - fp) / denom
    s = min(max(s, float(curve.s[i - 1])), float(curve.s[i + 1]))
    return Argmin(s, i, False, True)


class Interpolated:
    """Piecewise-linear evaluation of a curve inside its sampled interval."""

    exact = False

    def __init__(self, curve: Curve):
        self.s = curve.s[curve.valid]
        self.losses = curve.losses[curve.valid]

    def __call__(self, s: float) -> float:
        if not self.s[0] - _EPS <= s <= self.s[-1] + _EPS:
            raise SpecificationError(
                f"s={s} outside scanned interval [{self.s[0]}, {self.s[-1]}]; use exact evaluation")
        return float(np.interp(s, self.s, self.losses))


class ExactLine:
    """Full-batch loss along a line, evaluated by a fresh forward pass."""

    exact = True

    def __init__(self, model, dataset, origin, direction):
        from .nncore import axpy_point
        self._point = lambda s: axpy_point(origin, s, direction)
        self.model = model
        self.batch = dataset.full_batch()

    def __call__(self, s: float) -> float:
        with np.errstate(all="ignore"):
            return fixed_mean(self.model.per_sample_losses(self._point(s), self.batch, check=False))


def improvement(origin_loss: float, loss_at: Callable[[float], float], s_upd: float) -> float:
    """Full-batch decrease ``l(0) - l(s_upd)``."""
    if s_upd == 0:
        return 0.0
    return origin_loss - loss_at(s_upd)


def moving_average(series, k: int) -> np.ndarray:
    """Centred running mean with the window truncated at both ends."""
    if k < 1 or k % 2 == 0:
        raise SpecificationError(f"kernel size must be odd and positive, got {k}")
    x = np.asarray(series, dtype=np.float64)
    half = k // 2
    return np.array([fixed_mean(x[max(0, i - half):i + half + 1]) for i in range(len(x))])


@dataclass(frozen=True)
class ProportionalitySeries:
    steps: np.ndarray
    s_opt: np.ndarray
    grad_norm: np.ndarray
    ratio: np.ndarray
    c: float
    pearson: float
    note: str = ""


def proportionality(s_opt, grad_norm, steps=None, exclude=None) -> ProportionalitySeries:
    """Relate the locally optimal step to the defining-batch gradient norm.

    ``c`` is the least-squares slope through the origin of ``s_opt`` against
    ``grad_norm``; ``pearson`` is NaN (with ``note`` explaining why) when
    either series is constant.
    """
    s_opt = np.asarray(s_opt, dtype=np.float64)
    g = np.asarray(grad_norm, dtype=np.float64)
    if s_opt.shape != g.shape:
        raise SpecificationError("series lengths differ")
    steps = np.arange(len(g)) if steps is None else np.asarray(steps)
    keep = np.isfinite(s_opt) & np.isfinite(g)
    if exclude is not None:
        keep &= ~np.asarray(exclude, dtype=bool)
    if keep.sum() < 3:
        raise SpecificationError("fewer than 3 valid (s_opt, grad norm) pairs")
    s_opt, g, steps = s_opt[keep], g[keep], steps[keep]
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(g > 1e-15, s_opt / g, np.nan)
    c = math.fsum((s_opt * g).tolist()) / math.fsum((g * g).tolist())
    note = ""
    if np.ptp(s_opt) == 0 or np.ptp(g) == 0:
        pearson = float("nan")
        note = "pearson undefined: constant series"
    else:
        pearson = float(np.corrcoef(s_opt, g)[0, 1])
    return ProportionalitySeries(steps, s_opt, g, ratio, c, pearson, note)
