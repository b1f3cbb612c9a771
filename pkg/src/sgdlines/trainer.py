"""SGD with heavy-ball momentum, per-step recording and deterministic replay."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import BatchPlan, Dataset, batch_for_step
from .errors import IntegrityError, NumericError, SpecificationError
from .nncore import Model, ModelSpec, init_model

ZERO_GRAD = 1e-15


@dataclass(frozen=True)
class TrainConfig:
    lr: float
    momentum: float
    steps: int
    plan: BatchPlan
    model: ModelSpec
    seed: int = 0
    snapshot_stride: int = 100
    eval_stride: int = 10
    direction_stride: int = 0  # 0: keep no directions on disk

    def __post_init__(self):
        if not self.lr > 0:
            raise SpecificationError(f"learning rate must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise SpecificationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.steps <= 0:
            raise SpecificationError("steps must be positive")
        if self.snapshot_stride <= 0 or self.eval_stride <= 0 or self.direction_stride < 0:
            raise SpecificationError("strides must be positive")

    def to_dict(self) -> dict:
        return {
            "lr": self.lr,
            "momentum": self.momentum,
            "steps": self.steps,
            "batch_size": self.plan.batch_size,
            "shuffle_seed": self.plan.seed,
            "start_epoch": self.plan.epoch,
            "model": self.model.to_dict(),
            "seed": self.seed,
            "snapshot_stride": self.snapshot_stride,
            "eval_stride": self.eval_stride,
            "direction_stride": self.direction_stride,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(
            lr=float(d["lr"]), momentum=float(d["momentum"]), steps=int(d["steps"]),
            plan=BatchPlan(int(d["batch_size"]), int(d["shuffle_seed"]), int(d.get("start_epoch", 0))),
            model=ModelSpec.from_dict(d["model"]), seed=int(d.get("seed", 0)),
            snapshot_stride=int(d.get("snapshot_stride", 100)),
            eval_stride=int(d.get("eval_stride", 10)),
            direction_stride=int(d.get("direction_stride", 0)),
        )


@dataclass
class StepRecord:
    step: int
    batch: np.ndarray
    direction: np.ndarray | None
    grad_norm: float
    dderiv: float
    batch_loss: float
    momentum_norm: float
    kind: str = "gradient"
    zero_direction: bool = False

    SCALARS = ("step", "grad_norm", "dderiv", "batch_loss", "momentum_norm", "kind",
               "zero_direction")


@dataclass
class Trajectory:
    config: TrainConfig
    records: list
    snapshots: dict = field(default_factory=dict)  # step -> (params, buffer)
    eval_curve: dict = field(default_factory=dict)  # step -> (full loss, accuracy)
    final: tuple | None = None
    dataset_fingerprint: str = ""
    dataset_source: dict = field(default_factory=dict)

    @property
    def batch_losses(self) -> np.ndarray:
        return np.array([r.batch_loss for r in self.records])


def sgd_update(params, buffer, grad, lr: float, momentum: float):
    """Return ``(params', buffer')`` with ``buffer' = momentum*buffer + grad``."""
    params = np.asarray(params, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if params.shape != grad.shape or np.shape(buffer) != grad.shape:
        raise SpecificationError("params, buffer and grad must have equal length")
    new_buffer = grad.copy() if momentum == 0 else momentum * np.asarray(buffer) + grad
    new_params = params - lr * new_buffer
    if not np.all(np.isfinite(new_params)):
        raise NumericError("non-finite parameter update")
    return new_params, new_buffer


def _step(model, dataset, config, k, params, buffer, keep_direction=True):
    idx = batch_for_step(len(dataset), config.plan, k)
    try:
        loss, grad = model.loss_and_grad(params, dataset.batch(idx))
        new_params, new_buffer = sgd_update(params, buffer, grad, config.lr, config.momentum)
    except NumericError as exc:
        raise NumericError(f"training diverged at step {k}; last valid step {k - 1}: {exc}",
                           layer=exc.layer, step=k - 1) from exc
    gnorm = float(np.linalg.norm(grad))
    mnorm = float(np.linalg.norm(new_buffer))
    kind = "gradient" if config.momentum == 0 else "momentum"
    ref, ref_norm = (grad, gnorm) if config.momentum == 0 else (new_buffer, mnorm)
    if ref_norm < ZERO_GRAD:
        direction = np.zeros_like(params)
        rec = StepRecord(k, idx, direction if keep_direction else None, gnorm, 0.0, loss,
                         mnorm, kind, zero_direction=True)
    else:
        direction = -ref / ref_norm
        dderiv = float(np.dot(grad, direction))
        rec = StepRecord(k, idx, direction if keep_direction else None, gnorm, dderiv, loss,
                         mnorm, kind)
    return rec, new_params, new_buffer


def train(config: TrainConfig, dataset: Dataset, keep_directions=True, progress=None) -> Trajectory:
    """Run SGD for ``config.steps`` steps and record every step."""
    model = Model(config.model)
    if config.model.kind == "mlp" and config.model.layers[0] != dataset.dim:
        raise SpecificationError(
            f"model input size {config.model.layers[0]} != dataset dim {dataset.dim}")
    if config.model.kind == "mlp" and config.model.layers[-1] != dataset.classes:
        raise SpecificationError(
            f"model output size {config.model.layers[-1]} != class count {dataset.classes}")
    params = init_model(config.model)
    buffer = np.zeros_like(params)
    traj = Trajectory(config, [], dataset_fingerprint=dataset.fingerprint)
    full = dataset.full_batch()
    for k in range(config.steps):
        if k % config.snapshot_stride == 0:
            traj.snapshots[k] = (params.copy(), buffer.copy())
        if k % config.eval_stride == 0:
            traj.eval_curve[k] = (model.loss(params, full), model.accuracy(params, full))
        keep = keep_directions is True or (callable(keep_directions) and keep_directions(k))
        rec, params, buffer = _step(model, dataset, config, k, params, buffer, keep)
        traj.records.append(rec)
        if progress is not None:
            progress(k)
    k = config.steps
    if k % config.snapshot_stride == 0:
        traj.snapshots[k] = (params.copy(), buffer.copy())
    traj.eval_curve[k] = (model.loss(params, full), model.accuracy(params, full))
    traj.final = (params, buffer)
    return traj


def replay_to_step(config: TrainConfig, dataset: Dataset, k: int, snapshots=None):
    """State ``(params, buffer)`` that training had right before step ``k``."""
    if not 0 <= k <= config.steps:
        raise SpecificationError(f"step {k} outside [0, {config.steps}]")
    model = Model(config.model)
    start = 0
    params = init_model(config.model)
    buffer = np.zeros_like(params)
    if snapshots:
        usable = [s for s in snapshots if s <= k]
        if usable:
            start = max(usable)
            p, b = snapshots[start]
            params, buffer = np.array(p, copy=True), np.array(b, copy=True)
    for j in range(start, k):
        _, params, buffer = _step(model, dataset, config, j, params, buffer, keep_direction=False)
    return params, buffer


def replay_record(config: TrainConfig, dataset: Dataset, k: int, snapshots=None):
    """Origin parameters of step ``k`` together with a freshly computed StepRecord."""
    if not 0 <= k < config.steps:
        raise SpecificationError(f"step {k} outside [0, {config.steps})")
    params, buffer = replay_to_step(config, dataset, k, snapshots)
    rec, _, _ = _step(Model(config.model), dataset, config, k, params, buffer)
    return params, rec


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------


def fmt_float(x) -> str:
    return repr(float(x))


def write_f64(path: Path, array):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(array, dtype="<f8").tobytes())


def read_f64(path: Path, length: int | None = None) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise IntegrityError(f"missing file {path}")
    raw = path.read_bytes()
    if len(raw) % 8 or (length is not None and len(raw) != 8 * length):
        raise IntegrityError(f"{path}: unexpected size {len(raw)} bytes")
    return np.frombuffer(raw, dtype="<f8").astype(np.float64)


def save_trajectory(traj: Trajectory, out_dir) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg = traj.config.to_dict()
    cfg["dataset_fingerprint"] = traj.dataset_fingerprint
    cfg["dataset"] = traj.dataset_source
    (out / "config.json").write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    with (out / "steps.csv").open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(list(StepRecord.SCALARS) + ["full_loss", "accuracy"])
        for r in traj.records:
            ev = traj.eval_curve.get(r.step)
            w.writerow([r.step, fmt_float(r.grad_norm), fmt_float(r.dderiv),
                        fmt_float(r.batch_loss), fmt_float(r.momentum_norm), r.kind,
                        int(r.zero_direction),
                        fmt_float(ev[0]) if ev else "", fmt_float(ev[1]) if ev else ""])
    for k, (p, b) in sorted(traj.snapshots.items()):
        write_f64(out / "snapshots" / f"step_{k}.f64le", p)
        if traj.config.momentum > 0:
            write_f64(out / "snapshots" / f"buffer_{k}.f64le", b)
    stride = traj.config.direction_stride
    if stride:
        for r in traj.records:
            if r.step % stride == 0 and r.direction is not None:
                write_f64(out / "directions" / f"step_{r.step}.f64le", r.direction)
    return out


def load_trajectory(path) -> Trajectory:
    """Read a trajectory directory; directions are loaded where present."""
    root = Path(path)
    cfg_path = root / "config.json"
    if not cfg_path.exists():
        raise IntegrityError(f"missing {cfg_path}")
    try:
        raw = json.loads(cfg_path.read_text())
        config = TrainConfig.from_dict(raw)
    except (KeyError, ValueError) as exc:
        raise IntegrityError(f"{cfg_path}: {exc}") from exc
    size = Model(config.model).size
    traj = Trajectory(config, [], dataset_fingerprint=raw.get("dataset_fingerprint", ""),
                      dataset_source=raw.get("dataset", {}))
    steps_path = root / "steps.csv"
    if not steps_path.exists():
        raise IntegrityError(f"missing {steps_path}")
    with steps_path.open() as f:
        for row in csv.DictReader(f):
            try:
                k = int(row["step"])
                d_path = root / "directions" / f"step_{k}.f64le"
                direction = read_f64(d_path, size) if d_path.exists() else None
                rec = StepRecord(k, None, direction, float(row["grad_norm"]),
                                 float(row["dderiv"]), float(row["batch_loss"]),
                                 float(row["momentum_norm"]), row["kind"],
                                 bool(int(row["zero_direction"])))
                if row["full_loss"]:
                    traj.eval_curve[k] = (float(row["full_loss"]), float(row["accuracy"]))
            except (KeyError, ValueError) as exc:
                raise IntegrityError(f"{steps_path}: bad row {row}: {exc}") from exc
            traj.records.append(rec)
    if len(traj.records) != config.steps:
        raise IntegrityError(f"{steps_path}: {len(traj.records)} rows, expected {config.steps}")
    snap_dir = root / "snapshots"
    if snap_dir.exists():
        for p in sorted(snap_dir.glob("step_*.f64le")):
            k = int(p.stem.split("_")[1])
            params = read_f64(p, size)
            b_path = snap_dir / f"buffer_{k}.f64le"
            buffer = read_f64(b_path, size) if b_path.exists() else np.zeros(size)
            traj.snapshots[k] = (params, buffer)
    return traj


def iter_records(config: TrainConfig, dataset: Dataset, steps, snapshots=None):
    """Yield ``(k, origin, record)`` for ascending ``steps``, replaying forward once."""
    model = Model(config.model)
    steps = sorted(set(int(k) for k in steps))
    if steps and not 0 <= steps[0] <= steps[-1] < config.steps:
        raise SpecificationError(f"steps must lie in [0, {config.steps})")
    k = None
    params = buffer = None
    for target in steps:
        if k is None:
            params, buffer = replay_to_step(config, dataset, target, snapshots)
            k = target
        while k < target:
            _, params, buffer = _step(model, dataset, config, k, params, buffer, keep_direction=False)
            k += 1
        rec, params_next, buffer_next = _step(model, dataset, config, k, params, buffer)
        yield k, params, rec
        params, buffer = params_next, buffer_next
        k += 1
