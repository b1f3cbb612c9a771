# Many batches, one point
#
# From a single parameter vector we draw several mini-batches, scan the
# full-batch loss along each batch's negative gradient, and compare the lines.

from sgdlines.analysis import distance_matrix
from sgdlines.data import BatchPlan, synth_blobs
from sgdlines.linescan import fan_scan, make_grid
from sgdlines.nncore import Model, ModelSpec
from sgdlines.trainer import TrainConfig, train

ds = synth_blobs(600, classes=4, dim=8, spread=1.5, seed=0)
spec = ModelSpec((8, 16, 4), "relu", seed=1)
cfg = TrainConfig(0.1, 0.0, 200, BatchPlan(64, seed=1), spec, snapshot_stride=100)
traj = train(cfg, ds, keep_directions=False)

model = Model(spec)
origin = traj.snapshots[100][0]
grid = make_grid(-0.3, 0.3, 0.006)
scans = fan_scan(model, origin, 8, ds, BatchPlan(64, seed=7), grid)

mat, _ = distance_matrix([s.curve() for s in scans], (-0.2, 0.2))
print("pairwise distances between the 8 lines:")
for row in mat:
    print(" ".join(f"{v:.4f}" for v in row))
