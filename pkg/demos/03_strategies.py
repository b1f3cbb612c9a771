# Comparing step-size rules against the best step on each line
#
# For every scanned line we know the position of the minimum.  Fixed learning
# rates step lr * |g|; the parabolic rules fit a parabola through the loss at
# 0, its slope at 0 and one more point at distance mu.

from sgdlines.analysis import ExactLine
from sgdlines.data import BatchPlan, synth_blobs
from sgdlines.linescan import make_grid, scan_line
from sgdlines.nncore import Model, ModelSpec
from sgdlines.strategies import default_specs, evaluate_strategies, step_pal
from sgdlines.trainer import TrainConfig, iter_records, train

# A one-off parabola first: the rule lands exactly on the vertex.
a, v, c, mu = 2.0, 0.3, 1.0, 0.1
f = lambda s: a * (s - v) ** 2 + c  # noqa: E731
print("vertex recovered:", step_pal(f(0.0), -2 * a * v, f(mu), mu).s)

ds = synth_blobs(600, classes=4, dim=8, spread=1.5, seed=0)
spec = ModelSpec((8, 16, 4), "relu", seed=1)
cfg = TrainConfig(0.1, 0.0, 400, BatchPlan(64, seed=1), spec, snapshot_stride=50)
traj = train(cfg, ds, keep_directions=False)

model = Model(spec)
grid = make_grid(-0.5, 0.5, 0.006)
scans, evaluators = [], {}
for k, origin, rec in iter_records(cfg, ds, range(0, 400, 10), traj.snapshots):
    scans.append(scan_line(model, origin, rec, grid, ds))
    evaluators[k] = ExactLine(model, ds, origin, rec.direction)

# improvements are measured on the exact full-batch loss, not the grid
table = evaluate_strategies(scans, default_specs(), evaluators, kernel=5)
for label, row in table.summary().items():
    print(f"{label:18s} mean |s_opt - s_upd| {row['mean_abs_distance']:.4f}   "
          f"mean improvement {row['mean_improvement']:.5f}")
