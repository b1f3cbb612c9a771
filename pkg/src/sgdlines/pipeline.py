"""End-to-end runs: train, scan, analyse, score strategies, batch-size study, report.

Every stage reads its inputs from a run directory and writes into a fixed
subdirectory of it::

    <out>/run.cfg          resolved configuration (key = value)
    <out>/trajectory/      trainer output
    <out>/scans/step_*/    one scan archive per scanned step
    <out>/fan/line_*/      multi-direction fan at one position
    <out>/analysis/        distance matrices, fits, proportionality
    <out>/strategies/      strategy comparison
    <out>/batchsize/       batch-size study
    <out>/report/          figure index and summary
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import shutil
from pathlib import Path

import numpy as np

from . import svgplot
from .analysis import (ExactLine, argmin_refined, default_window, distance_matrix, polyfit,
                       proportionality)
from .batchsim import (monotone_fraction, ratio_study, scan_entries, strategy_vs_batchsize,
                       write_batchsize_csv, write_ratio_csv)
from .data import BatchPlan, Dataset, load_dataset, standardize, subset, synth_blobs
from .errors import IntegrityError, SpecificationError
from .linescan import Grid, fan_scan, make_grid, read_scan, scan_line, write_scan
from .nncore import Model, ModelSpec
from .strategies import StrategySpec, default_specs, evaluate_strategies, write_strategy_csv
from .trainer import (TrainConfig, fmt_float, iter_records, load_trajectory, replay_to_step,
                      save_trajectory, train)

log = logging.getLogger(__name__)


class ConfigError(SpecificationError):
    pass


# key -> (default, parser, description)
def _floats(text):
    return tuple(float(t) for t in str(text).split(",") if t.strip())


def _ints(text):
    return tuple(int(t) for t in str(text).split(",") if t.strip())


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _auto_bool(text):
    return "auto" if str(text).strip() == "auto" else _bool(text)


def _window(text):
    if str(text).strip() == "auto":
        return "auto"
    lo, hi = _floats(text)
    return (lo, hi)


KEYS = {
    "dataset": ("synth", str, "synth | idx | cifar10bin | csv"),
    "data_path": (None, str, "data file (idx images, cifar binary batch, csv)"),
    "labels_path": (None, str, "idx label file; inferred from data_path if absent"),
    "n": (2000, int, "synthetic sample count"),
    "classes": (4, int, "class count"),
    "dim": (16, int, "synthetic feature dimension"),
    "spread": (1.5, float, "synthetic within-class standard deviation"),
    "separation": (1.0, float, "synthetic class-centre scale"),
    "data_seed": (0, int, "synthetic data seed"),
    "fraction": (1.0, float, "stratified subset fraction"),
    "subset_seed": (0, int, "subset seed"),
    "standardize": ("auto", _auto_bool, "standardize features (auto: file formats only)"),
    "model": ("mlp", str, "mlp | quadratic"),
    "layers": ((16, 32, 32, 4), _ints, "layer sizes, comma separated"),
    "activation": ("relu", str, "relu | tanh"),
    "init_seed": (1, int, "parameter initialisation seed"),
    "lr": (0.1, float, "SGD learning rate"),
    "momentum": (0.0, float, "heavy-ball momentum"),
    "steps": (2000, int, "training steps"),
    "batch_size": (128, int, "mini-batch size"),
    "shuffle_seed": (1, int, "batch shuffling seed"),
    "seed": (0, int, "master seed (recorded)"),
    "snapshot_stride": (100, int, "steps between parameter snapshots"),
    "eval_stride": (10, int, "steps between full-dataset evaluations"),
    "stride": (10, int, "scan every stride-th step"),
    "grid_lo": (-0.5, float, "scan interval lower bound"),
    "grid_hi": (0.5, float, "scan interval upper bound"),
    "grid_res": (0.006, float, "scan resolution"),
    "granularity": ("full", str, "full | per_batch | per_sample"),
    "per_sample": (True, _bool, "keep per-sample loss matrices on selected scans"),
    "per_sample_every": (20, int, "keep the matrix on every k-th scanned step"),
    "threads": (None, int, "worker threads (default: $SGDLINES_THREADS or 1)"),
    "window": ("auto", _window, "analysis window lo,hi or auto"),
    "lrs": ((1.0, 0.1, 0.05, 0.01), _floats, "learning rates compared as strategies"),
    "mu": (0.1, float, "PAL sample step"),
    "kernel": (25, int, "smoothing kernel size (odd)"),
    "factors": ((0.25, 0.5, 2.0, 4.0, 8.0), _floats, "batch-size factors for the ratio study"),
    "sizes": ((32, 64, 128, 256, 512, 1024), _ints, "batch sizes for the improvement study"),
    "batch_seed": (0, int, "seed for grown virtual batches"),
    "shrink_rule": ("signed", str, "signed | magnitude"),
    "fan_k": (10, int, "directions in a fan"),
    "fan_step": (1000, int, "training step whose origin the fan starts from"),
    "fan_window": ((-0.3, 0.3), _window, "window for fan distances"),
    "exact": (True, _bool, "re-evaluate improvements exactly instead of interpolating"),
}

SYNTH_KEYS = ("n", "classes", "dim", "spread", "separation", "data_seed")


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value, got {raw!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        out[key] = value
    return out


def resolve_config(file_values: dict | None = None, overrides: dict | None = None) -> dict:
    """Merge defaults, file values and overrides (overrides win) and parse types."""
    merged = {}
    for source in (file_values or {}, overrides or {}):
        for key, value in source.items():
            if value is None:
                continue
            if key not in KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = value
    cfg = {}
    for key, (default, parser, _) in KEYS.items():
        if key in merged:
            value = merged[key]
            try:
                cfg[key] = value if not isinstance(value, str) else parser(value)
            except ValueError as exc:
                raise ConfigError(f"config key {key!r}: {exc}") from exc
        else:
            cfg[key] = default
    if cfg["dataset"] != "synth" and not cfg["data_path"]:
        raise ConfigError(f"missing config key 'data_path' (required for dataset={cfg['dataset']})")
    if cfg["kernel"] < 1 or cfg["kernel"] % 2 == 0:
        raise ConfigError("config key 'kernel' must be odd and positive")
    if cfg["stride"] < 1:
        raise ConfigError("config key 'stride' must be positive")
    return cfg


def format_config(cfg: dict) -> str:
    lines = []
    for key in KEYS:
        value = cfg[key]
        if value is None or key == "threads":
            continue
        if isinstance(value, tuple):
            value = ",".join(fmt_float(v) if isinstance(v, float) else str(v) for v in value)
        elif isinstance(value, bool):
            value = str(value).lower()
        elif isinstance(value, float):
            value = fmt_float(value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Building blocks
# ---------------------------------------------------------------------------


def dataset_source(cfg: dict) -> dict:
    src = {"dataset": cfg["dataset"], "fraction": cfg["fraction"],
           "subset_seed": cfg["subset_seed"],
           "standardize": (cfg["dataset"] != "synth" if cfg["standardize"] == "auto"
                           else cfg["standardize"]),
           "classes": cfg["classes"]}
    if cfg["dataset"] == "synth":
        src.update({k: cfg[k] for k in SYNTH_KEYS})
    else:
        src["data_path"] = str(cfg["data_path"])
        if cfg["labels_path"]:
            src["labels_path"] = str(cfg["labels_path"])
    return src


def build_dataset(src: dict) -> Dataset:
    kind = src["dataset"]
    if kind == "synth":
        ds = synth_blobs(int(src["n"]), int(src["classes"]), int(src["dim"]),
                         float(src["spread"]), int(src["data_seed"]), float(src["separation"]))
    elif kind == "idx":
        ds = load_dataset("idx", src["data_path"], labels_path=src.get("labels_path"),
                          classes=int(src["classes"]))
    elif kind == "cifar10bin":
        ds = load_dataset("cifar10bin", src["data_path"], classes=int(src["classes"]))
    elif kind == "csv":
        ds = load_dataset("csv", src["data_path"], classes=int(src["classes"]))
    else:
        raise ConfigError(f"unknown dataset {kind!r}")
    if float(src.get("fraction", 1.0)) < 1.0:
        ds = subset(ds, float(src["fraction"]), int(src.get("subset_seed", 0)))
    if src.get("standardize"):
        ds = standardize(ds)
    return ds


def train_config(cfg: dict) -> TrainConfig:
    if cfg["model"] == "quadratic":
        spec = ModelSpec((cfg["layers"][0],), cfg["activation"], cfg["init_seed"], "quadratic")
    else:
        spec = ModelSpec(cfg["layers"], cfg["activation"], cfg["init_seed"], cfg["model"])
    return TrainConfig(cfg["lr"], cfg["momentum"], cfg["steps"],
                       BatchPlan(cfg["batch_size"], cfg["shuffle_seed"]), spec, cfg["seed"],
                       cfg["snapshot_stride"], cfg["eval_stride"], cfg["stride"])


def _csv(path: Path, header, rows):
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([fmt_float(v) if isinstance(v, (float, np.floating)) else v for v in row])
    return path


def _json(path: Path, obj) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(_plain(obj), indent=2, sort_keys=True, allow_nan=True) + "\n")
    return path


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _svg(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def file_hash(path) -> str:
    return hashlib.blake2b(Path(path).read_bytes(), digest_size=8).hexdigest()


def load_run_dataset(traj) -> Dataset:
    ds = build_dataset(traj.dataset_source)
    if traj.dataset_fingerprint and ds.fingerprint != traj.dataset_fingerprint:
        raise IntegrityError(
            f"dataset fingerprint {ds.fingerprint} != recorded {traj.dataset_fingerprint}")
    return ds


def load_scans(scans_dir) -> list:
    root = Path(scans_dir)
    dirs = sorted(p for p in root.glob("step_*") if p.is_dir()) if root.exists() else []
    if not dirs:
        raise SpecificationError(f"no scan archives under {root}")
    scans = [read_scan(d) for d in dirs]
    scans.sort(key=lambda s: s.step)
    first = scans[0].grid
    for s in scans[1:]:
        if (s.grid.k_lo, s.grid.k_hi, s.grid.resolution) != (first.k_lo, first.k_hi, first.resolution):
            raise SpecificationError(f"scan of step {s.step} uses a different grid")
    return scans


def _window_for(cfg: dict, scans) -> tuple:
    if cfg["window"] != "auto":
        return cfg["window"]
    return default_window(0.9 if scans[0].kind == "momentum" else 0.0)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------


def run_train(cfg: dict, out) -> Path:
    out = Path(out)
    dataset = build_dataset(dataset_source(cfg))
    config = train_config(cfg)
    stride = cfg["stride"]
    traj = train(config, dataset, keep_directions=lambda k: k % stride == 0)
    traj.dataset_source = dataset_source(cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.cfg").write_text(format_config(cfg))
    path = save_trajectory(traj, out / "trajectory")
    final_loss, final_acc = traj.eval_curve[config.steps]
    _json(out / "trajectory" / "final.json", {"full_loss": final_loss, "accuracy": final_acc,
                                              "steps": config.steps})
    log.info("trained %d steps: loss %.4f, accuracy %.4f", config.steps, final_loss, final_acc)
    return path


def run_scan(cfg: dict, out, trajectory_dir=None) -> list:
    out = Path(out)
    tdir = Path(trajectory_dir) if trajectory_dir else out / "trajectory"
    traj = load_trajectory(tdir)
    dataset = load_run_dataset(traj)
    config = traj.config
    grid = make_grid(cfg["grid_lo"], cfg["grid_hi"], cfg["grid_res"])
    model = Model(config.model)
    steps = list(range(0, config.steps, cfg["stride"]))
    config_hash = file_hash(tdir / "config.json")
    scan_root = out / "scans"
    if scan_root.exists():
        shutil.rmtree(scan_root)
    written = []
    for j, (k, origin, rec) in enumerate(iter_records(config, dataset, steps, traj.snapshots)):
        stored = traj.records[k]
        if stored.grad_norm != rec.grad_norm or stored.dderiv != rec.dderiv:
            raise IntegrityError(f"{tdir / 'steps.csv'}: step {k} does not replay bit-exactly")
        if stored.direction is not None and not np.array_equal(stored.direction, rec.direction):
            raise IntegrityError(f"{tdir / 'directions'}: direction of step {k} does not replay")
        if rec.zero_direction:
            log.warning("step %d has a zero direction; skipped", k)
            continue
        granularity = cfg["granularity"]
        if cfg["per_sample"] and j % cfg["per_sample_every"] == 0:
            granularity = "per_sample"
        scan = scan_line(model, origin, rec, grid, dataset, granularity,
                         threads=cfg["threads"], config_hash=config_hash)
        written.append(write_scan(scan, out / "scans" / f"step_{k:06d}"))
    return written


def run_fan(cfg: dict, out, trajectory_dir=None) -> list:
    out = Path(out)
    tdir = Path(trajectory_dir) if trajectory_dir else out / "trajectory"
    traj = load_trajectory(tdir)
    dataset = load_run_dataset(traj)
    config = traj.config
    k = min(cfg["fan_step"], config.steps)
    origin, _ = replay_to_step(config, dataset, k, traj.snapshots)
    grid = make_grid(cfg["grid_lo"], cfg["grid_hi"], cfg["grid_res"])
    plan = BatchPlan(config.plan.batch_size, config.plan.seed + 7919 * (k + 1))
    scans = fan_scan(Model(config.model), origin, cfg["fan_k"], dataset, plan, grid,
                     threads=cfg["threads"])
    fan_dir = out / "fan"
    paths = [write_scan(s, fan_dir / f"line_{j:03d}") for j, s in enumerate(scans)]
    mat, _ = distance_matrix([s.curve() for s in scans], cfg["fan_window"])
    _csv(fan_dir / "distance_matrix.csv", ["line"] + list(range(len(scans))),
         [[i] + list(row) for i, row in enumerate(mat)])
    _svg(fan_dir / "distance_matrix.svg",
         svgplot.heatmap(mat, f"Shape distances of {len(scans)} directions at step {k}",
                         labels=list(range(len(scans)))))
    _json(fan_dir / "summary.json", {"step": k, "directions": len(scans),
                                     "window": list(cfg["fan_window"]),
                                     "mean_offdiag_mae": _offdiag_mean(mat)})
    return paths


def _offdiag_mean(mat) -> float:
    n = len(mat)
    if n < 2:
        return 0.0
    return float(mat[~np.eye(n, dtype=bool)].mean())


def _block_mean(mat, limit=100):
    n = len(mat)
    if n <= limit:
        return mat
    f = -(-n // limit)
    m = -(-n // f)
    pad = np.full((m * f, m * f), np.nan)
    pad[:n, :n] = mat
    return np.nanmean(pad.reshape(m, f, m, f), axis=(1, 3))


def run_analyze(cfg: dict, out, scans_dir=None) -> dict:
    out = Path(out)
    scans = load_scans(Path(scans_dir) if scans_dir else out / "scans")
    window = _window_for(cfg, scans)
    adir = out / "analysis"
    steps = [s.step for s in scans]
    curves = [s.curve() for s in scans]
    mat, consecutive = distance_matrix(curves, window)
    _csv(adir / "distance_matrix.csv", ["step"] + steps, [[k] + list(r) for k, r in zip(steps, mat)])
    _csv(adir / "consecutive_mae.csv", ["step", "next_step", "mae"],
         [[steps[i], steps[i + 1], consecutive[i]] for i in range(len(consecutive))])
    fits = []
    for s, c in zip(scans, curves):
        f1, f2 = polyfit(c, 1, window), polyfit(c, 2, window)
        fits.append((s.step, f2.a, f2.b, f2.c, f1.mae, f2.mae, f1.rmse, f2.rmse))
    _csv(adir / "fits.csv", ["step", "a", "b", "c", "mae1", "mae2", "rmse1", "rmse2"], fits)
    opts = [argmin_refined(c) for c in curves]
    s_opt = np.array([o.s for o in opts])
    gnorm = np.array([s.grad_norm for s in scans])
    boundary = np.array([o.boundary for o in opts])
    _csv(adir / "proportionality.csv", ["step", "s_opt", "grad_norm", "ratio", "boundary"],
         [[k, so, g, so / g if g > 1e-15 else float("nan"), int(b)]
          for k, so, g, b in zip(steps, s_opt, gnorm, boundary)])
    summary = {"lines": len(scans), "window": list(window),
               "s_opt_boundary_count": int(boundary.sum())}
    if (~boundary).sum() >= 3:
        prop = proportionality(s_opt, gnorm, steps, exclude=boundary)
        summary.update({"proportionality_c": prop.c, "pearson_r": prop.pearson,
                        "proportionality_note": prop.note})
    else:
        summary.update({"proportionality_c": None, "pearson_r": None,
                        "proportionality_note": "fewer than 3 interior minima"})
    head = min(10, len(scans))
    summary["mean_distance_first_block"] = _offdiag_mean(mat[:head, :head])
    summary["mean_distance_last_block"] = _offdiag_mean(mat[-head:, -head:])
    summary["mean_consecutive_mae"] = float(consecutive.mean()) if len(consecutive) else 0.0
    fa = np.array(fits, dtype=float)
    summary["mean_mae_degree1"] = float(fa[:, 4].mean())
    summary["mean_mae_degree2"] = float(fa[:, 5].mean())
    summary["nesting_holds_all"] = bool(np.all(fa[:, 7] <= fa[:, 6]))
    _json(adir / "summary.json", summary)

    _svg(adir / "distance_matrix.svg",
         svgplot.heatmap(_block_mean(mat), "MAE shape distance between lines",
                         labels=steps if len(steps) <= 100 else None))
    first = min(50, len(scans))
    _svg(adir / "distance_matrix_first_50.svg",
         svgplot.heatmap(mat[:first, :first], f"Shape distance, first {first} lines",
                         labels=steps[:first]))
    _svg(adir / "consecutive_mae.svg",
         svgplot.line_plot([("consecutive lines", steps[:-1], consecutive)],
                           "MAE between consecutive lines", "step", "MAE"))
    _svg(adir / "fit_mae.svg",
         svgplot.line_plot([("degree 1", steps, fa[:, 4]), ("degree 2", steps, fa[:, 5])],
                           "MAE of polynomial fits", "step", "MAE"))
    _svg(adir / "fit_coefficients.svg",
         svgplot.line_plot([("curvature 2a", steps, 2 * fa[:, 1]), ("slope b", steps, fa[:, 2])],
                           "Coefficients of the degree-2 fit", "step", "value"))
    _svg(adir / "proportionality.svg",
         svgplot.line_plot([("s_opt / ||g||", steps, np.where(boundary, np.nan, s_opt / gnorm))],
                           "Optimal step over direction-defining gradient norm", "step", "ratio",
                           hlines=[(summary["proportionality_c"], "c")]
                           if summary["proportionality_c"] is not None else ()))
    picks = sorted({0, len(scans) // 2, len(scans) - 1})
    for i in picks:
        s = scans[i]
        _svg(adir / f"line_step_{s.step}.svg",
             svgplot.line_plot([("full batch", s.grid.points, s.full),
                                ("defining batch", s.grid.points, s.batch_curves["defining"])],
                               f"Loss along the line of step {s.step}", "step size s", "loss"))
    return summary


def _evaluators(scans, out, trajectory_dir, exact: bool):
    if not exact:
        return None
    tdir = Path(trajectory_dir) if trajectory_dir else Path(out) / "trajectory"
    if not (tdir / "config.json").exists():
        log.warning("no trajectory at %s; improvements are interpolated", tdir)
        return None
    traj = load_trajectory(tdir)
    dataset = load_run_dataset(traj)
    model = Model(traj.config.model)
    evs = {}
    for s in scans:
        if s.origin is None or s.direction is None:
            raise IntegrityError(f"scan of step {s.step} lacks origin/direction vectors")
        evs[s.step] = ExactLine(model, dataset, s.origin, s.direction)
    return evs


def strategy_specs(cfg: dict) -> list:
    return default_specs(cfg["lrs"], cfg["mu"])


def run_strategies(cfg: dict, out, scans_dir=None, trajectory_dir=None) -> dict:
    out = Path(out)
    scans = load_scans(Path(scans_dir) if scans_dir else out / "scans")
    evs = _evaluators(scans, out, trajectory_dir, cfg["exact"])
    table = evaluate_strategies(scans, strategy_specs(cfg), evs, cfg["kernel"])
    sdir = out / "strategies"
    write_strategy_csv(table, sdir)
    summary = {"kernel": cfg["kernel"], "lines": len(scans), "exact": evs is not None,
               "strategies": table.summary()}
    s_opt = table.series("exact_fullbatch", "s_opt")
    gnorm = np.array([s.grad_norm for s in scans])
    boundary = np.array([table.s_opt_boundary[s.step] for s in scans])
    if (~boundary).sum() >= 3:
        prop = proportionality(s_opt, gnorm, table.steps, exclude=boundary)
        summary["proportionality"] = {"c": prop.c, "pearson_r": prop.pearson, "note": prop.note}
    _json(sdir / "summary.json", summary)
    steps = table.steps
    for metric, ylabel in (("s_upd", "update step s_upd"),
                           ("distance", "s_opt - s_upd"),
                           ("improvement", "l(0) - l(s_upd)")):
        _svg(sdir / f"{metric}.svg",
             svgplot.line_plot([(lab, steps, table.smoothed(lab, metric)) for lab in table.labels],
                               f"{ylabel} (smoothed, k={cfg['kernel']})", "step", ylabel))
    _svg(sdir / "cumulative_improvement.svg",
         svgplot.line_plot([(lab, steps, table.cumulative(lab)) for lab in table.labels],
                           "Accumulated improvement", "step", "sum of l(0) - l(s_upd)"))
    _svg(sdir / "cumulative_distance.svg",
         svgplot.line_plot([(lab, steps, table.cumulative(lab, "distance")) for lab in table.labels],
                           "Accumulated distance to s_opt", "step", "sum of s_opt - s_upd"))
    return summary


def run_batchsize(cfg: dict, out, scans_dir=None, trajectory_dir=None) -> dict:
    out = Path(out)
    scans = load_scans(Path(scans_dir) if scans_dir else out / "scans")
    if any(s.kind == "momentum" for s in scans):
        raise SpecificationError("the batch-size study needs a run without momentum")
    tdir = Path(trajectory_dir) if trajectory_dir else out / "trajectory"
    lr = load_trajectory(tdir).config.lr if (tdir / "config.json").exists() else cfg["lr"]
    bdir = out / "batchsize"
    n_data = len(scans[0].per_sample_dderiv) if scans[0].per_sample_dderiv is not None else 0
    base = len(np.unique(scans[0].batch))
    factors = [f for f in cfg["factors"] if 1 <= round(f * base) <= n_data]
    for f in cfg["factors"]:
        if f not in factors:
            log.warning("factor %g needs %d samples; dataset has %d; skipped",
                        f, round(f * base), n_data)
    rows = ratio_study(scan_entries(scans), factors, cfg["batch_seed"], cfg["shrink_rule"])
    write_ratio_csv(rows, bdir / "ratio.csv")
    per_sample = [s for s in scans if s.per_sample is not None]
    n = per_sample[0].per_sample.shape[0] if per_sample else 0
    sizes = [z for z in cfg["sizes"] if z <= n]
    brows = []
    if per_sample:
        evs = _evaluators(per_sample, out, trajectory_dir, cfg["exact"])
        brows = strategy_vs_batchsize(per_sample, sizes, lr, cfg["mu"], cfg["batch_seed"], evs,
                                      cfg["shrink_rule"])
    write_batchsize_csv(brows, bdir / "batchsize_improvements.csv")
    summary = {"lr": lr, "factors": factors, "sizes": sizes,
               "per_sample_lines": len(per_sample), "ratio": {}}
    for f in factors:
        r = np.array([row.ratio for row in rows if row.factor == f])
        r = r[np.isfinite(r)]
        summary["ratio"][fmt_float(f)] = {"expected": f, "mean": float(r.mean()) if r.size else None,
                                          "median": float(np.median(r)) if r.size else None}
    if brows:
        summary["pal_cumulative_monotone_fraction"] = monotone_fraction(brows, "pal_improvement")
        summary["sgd_cumulative_monotone_fraction"] = monotone_fraction(brows, "sgd_improvement")
        summary["mean_improvement"] = {
            str(z): {"sgd": float(np.nanmean([r.sgd_improvement for r in brows if r.size == z])),
                     "pal": float(np.nanmean([r.pal_improvement for r in brows if r.size == z]))}
            for z in sizes}
    _json(bdir / "summary.json", summary)
    steps = sorted({r.step for r in rows})
    series = []
    for f in factors:
        by_step = {r.step: r.ratio for r in rows if r.factor == f}
        series.append((f"x{f:g}", steps, [by_step[k] for k in steps]))
    _svg(bdir / "ratio.svg",
         svgplot.line_plot(series, "|l'_B(0)| / |l'_fB(0)| per batch-size factor", "step", "ratio",
                           hlines=[(f, f"expected {f:g}") for f in factors]))
    if brows:
        bsteps = sorted({r.step for r in brows})
        for attr, name in (("sgd_improvement", "SGD"), ("pal_improvement", "PAL")):
            series = []
            for z in sizes:
                vals = {r.step: getattr(r, attr) for r in brows if r.size == z}
                series.append((f"batch {z}", bsteps,
                               np.cumsum(np.nan_to_num([vals[k] for k in bsteps]))))
            _svg(bdir / f"improvement_{name.lower()}.svg",
                 svgplot.line_plot(series, f"Accumulated improvement of {name} by batch size",
                                   "step", "sum of l(0) - l(s_upd)"))
    return summary


FIGURES = {
    "report/training.svg": "training loss and accuracy",
    "report/compare_training.svg": "training at two learning rates",
    "analysis/line_step_*.svg": "loss along single lines",
    "analysis/distance_matrix*.svg": "shape distance heatmap",
    "analysis/consecutive_mae.svg": "distance between consecutive lines",
    "analysis/fit_*.svg": "polynomial fit quality and coefficients",
    "analysis/proportionality.svg": "optimal step against gradient norm",
    "strategies/*.svg": "update-step strategy metrics",
    "batchsize/*.svg": "batch-size study",
    "fan/*.svg": "lines of several noisy directions",
}


def _training_series(tdir: Path):
    steps, loss, acc = [], [], []
    with (tdir / "steps.csv").open() as f:
        for row in csv.DictReader(f):
            if row["full_loss"]:
                steps.append(int(row["step"]))
                loss.append(float(row["full_loss"]))
                acc.append(float(row["accuracy"]))
    return steps, loss, acc


def run_report(cfg: dict, out, compare=None) -> dict:
    """Training figures plus an index of every emitted file and the collected summaries."""
    out = Path(out)
    rdir = out / "report"
    tdir = out / "trajectory"
    if not (tdir / "steps.csv").exists():
        raise IntegrityError(f"missing {tdir / 'steps.csv'}")
    steps, loss, acc = _training_series(tdir)
    _svg(rdir / "training.svg",
         svgplot.line_plot([("full-batch loss", steps, loss), ("accuracy", steps, acc)],
                           "Training process", "step", "value"))
    if compare:
        other = Path(compare)
        other = other / "trajectory" if (other / "trajectory").exists() else other
        s2, l2, a2 = _training_series(other)
        lr1 = json.loads((tdir / "config.json").read_text())["lr"]
        lr2 = json.loads((other / "config.json").read_text())["lr"]
        _svg(rdir / "compare_training.svg",
             svgplot.line_plot([(f"loss, lr {lr1:g}", steps, loss), (f"loss, lr {lr2:g}", s2, l2),
                                (f"accuracy, lr {lr1:g}", steps, acc),
                                (f"accuracy, lr {lr2:g}", s2, a2)],
                               "Training with two learning rates", "step", "value"))
    summary = {}
    final = tdir / "final.json"
    if final.exists():
        summary["training"] = json.loads(final.read_text())
    for part in ("analysis", "strategies", "batchsize", "fan"):
        p = out / part / "summary.json"
        if p.exists():
            summary[part] = json.loads(p.read_text())
    _json(rdir / "summary.json", summary)
    files = []
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.suffix in (".csv", ".svg") and "scans" not in p.parts \
                and not any(part.startswith("line_") for part in p.parts):
            rel = p.relative_to(out).as_posix()
            figure = next((desc for pat, desc in FIGURES.items() if Path(rel).match(pat)), "")
            files.append({"path": rel, "kind": p.suffix[1:], "mirrors": figure})
    _json(rdir / "report.json", {"files": files})
    return summary


def run_pipeline(cfg: dict, out, stages=("train", "scan", "analyze", "strategies", "batchsize",
                                         "report")) -> dict:
    results = {}
    for stage in stages:
        fn = {"train": run_train, "scan": run_scan, "fan": run_fan, "analyze": run_analyze,
              "strategies": run_strategies, "batchsize": run_batchsize,
              "report": run_report}[stage]
        results[stage] = fn(cfg, out)
    return results


__all__ = ["KEYS", "ConfigError", "resolve_config", "parse_config_text", "format_config",
           "build_dataset", "dataset_source", "train_config", "run_train", "run_scan", "run_fan",
           "run_analyze", "run_strategies", "run_batchsize", "run_report", "run_pipeline",
           "load_scans", "Grid", "StrategySpec"]
