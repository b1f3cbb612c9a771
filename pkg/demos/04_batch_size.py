# Simulating larger and smaller batches from per-sample slopes
#
# The slope of a batch loss along a direction is the mean of per-sample
# slopes.  Growing the batch that defined the direction with random extra
# samples dilutes that slope, roughly by the growth factor.

import numpy as np

from sgdlines.batchsim import PartialMean, ratio_study, scan_entries
from sgdlines.data import BatchPlan, synth_blobs
from sgdlines.linescan import make_grid, scan_line
from sgdlines.nncore import Model, ModelSpec, fixed_mean
from sgdlines.trainer import TrainConfig, iter_records, train

# Means over disjoint pieces combine into exactly the mean of the whole.
x = np.random.default_rng(0).standard_normal(1000)
pieces = PartialMean.of(x[:300]) + PartialMean.of(x[300:710]) + PartialMean.of(x[710:])
print("composed mean equals direct mean:", pieces.value == fixed_mean(x))

ds = synth_blobs(2000, classes=4, dim=8, spread=1.5, seed=0)
spec = ModelSpec((8, 16, 4), "relu", seed=1)
cfg = TrainConfig(0.1, 0.0, 200, BatchPlan(64, seed=1), spec, snapshot_stride=50)
traj = train(cfg, ds, keep_directions=False)

model = Model(spec)
grid = make_grid(-0.2, 0.2, 0.02)
scans = [scan_line(model, origin, rec, grid, ds, "per_sample")
         for _, origin, rec in iter_records(cfg, ds, range(0, 200, 20), traj.snapshots)]

rows = ratio_study(scan_entries(scans), [0.5, 2, 4, 8])
for f in (0.5, 2.0, 4.0, 8.0):
    r = np.array([row.ratio for row in rows if row.factor == f])
    print(f"factor {f:3}: median ratio {np.median(r):.2f}")
