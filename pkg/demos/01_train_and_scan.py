# Training a small classifier and looking along its update directions
#
# We train an MLP on synthetic Gaussian blobs with plain mini-batch SGD, then
# replay a few steps and measure the full-batch loss on a grid of points along
# each step's negative-gradient direction.

import numpy as np

from sgdlines.data import BatchPlan, synth_blobs
from sgdlines.linescan import make_grid, scan_line
from sgdlines.nncore import Model, ModelSpec
from sgdlines.trainer import TrainConfig, iter_records, train

ds = synth_blobs(600, classes=4, dim=8, spread=1.5, seed=0)
spec = ModelSpec((8, 16, 4), "relu", seed=1)
cfg = TrainConfig(lr=0.1, momentum=0.0, steps=300, plan=BatchPlan(64, seed=1), model=spec,
                  snapshot_stride=50)

traj = train(cfg, ds)
print("batch loss, first and last step:", traj.batch_losses[0], traj.batch_losses[-1])

# Every record stores the direction-defining gradient norm and the slope of the
# batch loss along the step direction.  For plain SGD the two agree up to sign.
worst = max(abs(r.dderiv + r.grad_norm) / r.grad_norm for r in traj.records)
print("max |slope + |g|| / |g|:", worst)

# Rebuild the parameters at a few steps (the trajectory keeps snapshots only
# every 50 steps, so replay fills in the rest) and scan the loss line.
grid = make_grid(-0.5, 0.5, 0.006)
print("grid points:", grid.count, "zero at index", grid.zero_index)

model = Model(spec)
scans = []
for k, origin, rec in iter_records(cfg, ds, [0, 100, 299], traj.snapshots):
    scan = scan_line(model, origin, rec, grid, ds)
    scans.append(scan)
    i = int(np.nanargmin(scan.full))
    print(f"step {k:3d}: loss at s=0 {scan.origin_loss:.4f}, "
          f"lowest {scan.full[i]:.4f} at s={grid.points[i]:+.3f}")

# Lines early in training are steep and curved; late ones are nearly flat.
for scan in scans:
    span = np.nanmax(scan.full) - np.nanmin(scan.full)
    print(f"step {scan.step:3d}: loss range over the grid {span:.4f}")
