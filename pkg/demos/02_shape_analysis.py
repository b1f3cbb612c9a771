# How similar are the loss lines, and how parabolic?
#
# Lines are compared after shifting each one so its minimum inside a window
# sits at zero; the distance is the mean absolute difference of the shifted
# curves.  Polynomial fits of degree 1 and 2 tell how well a parabola describes
# each line.

import numpy as np

from sgdlines.analysis import argmin_refined, distance_matrix, polyfit, proportionality
from sgdlines.data import BatchPlan, synth_blobs
from sgdlines.linescan import make_grid, scan_line
from sgdlines.nncore import Model, ModelSpec
from sgdlines.trainer import TrainConfig, iter_records, train

ds = synth_blobs(600, classes=4, dim=8, spread=1.5, seed=0)
spec = ModelSpec((8, 16, 4), "relu", seed=1)
cfg = TrainConfig(0.1, 0.0, 400, BatchPlan(64, seed=1), spec, snapshot_stride=50)
traj = train(cfg, ds, keep_directions=False)

model = Model(spec)
grid = make_grid(-0.5, 0.5, 0.006)
curves, norms = [], []
for k, origin, rec in iter_records(cfg, ds, range(0, 400, 10), traj.snapshots):
    curves.append(scan_line(model, origin, rec, grid, ds).curve())
    norms.append(rec.grad_norm)

window = (-0.2, 0.2)
mat, consecutive = distance_matrix(curves, window)
print("distance matrix shape:", mat.shape)
print("mean distance among the first 10 lines:", mat[:10, :10].sum() / 90)
print("mean distance among the last 10 lines: ", mat[-10:, -10:].sum() / 90)
print("consecutive distances (first 5):", np.round(consecutive[:5], 4))

# Adding a constant to a line does not change its distances.
print("shift invariance:", (curves[3] + 5.0).losses[0] != curves[3].losses[0],
      distance_matrix([curves[3] + 5.0, curves[7]], window)[0][0, 1] == mat[3, 7])

fits1 = [polyfit(c, 1, window) for c in curves]
fits2 = [polyfit(c, 2, window) for c in curves]
print("mean MAE, line fit:     ", np.mean([f.mae for f in fits1]))
print("mean MAE, parabola fit: ", np.mean([f.mae for f in fits2]))
print("parabola never fits worse:", all(b.rmse <= a.rmse for a, b in zip(fits1, fits2)))

# Where is the minimum, relative to the gradient norm?
s_opt = np.array([argmin_refined(c).s for c in curves])
prop = proportionality(s_opt, np.array(norms))
print(f"s_opt ~ c * |g| with c = {prop.c:.4f}, Pearson r = {prop.pearson:.3f}")
