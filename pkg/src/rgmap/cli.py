"""Command-line experiment harness.

Every subcommand reads a JSON config (``--config``) and works inside one
output directory (``--out``). The granular stages read what the earlier
stages left there, so each module can be exercised on its own::

    rgmap phantom  --config exp.json --out run/
    rgmap acquire  --config exp.json --out run/
    rgmap recon    --config exp.json --out run/
    ...

``pipeline`` chains them and writes ``manifest.json``. ``train`` builds a
synthetic training set and runs the three-step schedule; ``compare``
ranks finished pipeline runs.

Exit codes: 0 success, 1 a stage failed (named on standard error),
2 bad config or arguments, 3 the output directory is locked by another
command.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import sys
from pathlib import Path

import numpy as np
from filelock import FileLock, Timeout

from . import __version__
from . import acquisition as acq
from . import experiment as ex
from .analysis import metrics_csv, nrmse, region_stats, write_pgm
from .core import ContrastImageSet, ParamMap, check_seed, tensor_read, tensor_write

log = logging.getLogger("rgmap")

STAGES = ("phantom", "mask", "acquire", "recon", "generate", "fit", "eval")
LOCK_NAME = ".rgmap.lock"


class ConfigError(ValueError):
    pass


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {type(cause).__name__}: {cause}")
        self.stage = stage


# --------------------------------------------------------------------------
# Config and workspace
# --------------------------------------------------------------------------

def _read_json(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(d, dict):
        raise ConfigError(f"{path}: expected a JSON object")
    return d


def load_experiment_config(path, seed=None) -> ex.ExperimentConfig:
    """Parse an experiment config; a run's ``manifest.json`` is accepted too."""
    d = _read_json(path)
    if "config" in d and "r_e" in d:
        d = d["config"]
    if seed is not None:
        d = dict(d, seed=seed)
    try:
        return ex.ExperimentConfig.from_dict(d)
    except (TypeError, ValueError, KeyError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def phantom_hash(spec) -> str:
    text = json.dumps(spec.to_dict(), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class Workspace:
    """QTNS tensors and JSON files inside one output directory."""

    def __init__(self, root):
        self.root = Path(root)

    def path(self, name) -> Path:
        return self.root / name

    def write(self, name, arr):
        tensor_write(self.path(f"{name}.qtns"), arr)

    def read(self, name) -> np.ndarray:
        p = self.path(f"{name}.qtns")
        if not p.is_file():
            raise FileNotFoundError(f"{p} is missing; run the stage that produces it first")
        return tensor_read(p)

    def has(self, name) -> bool:
        return self.path(f"{name}.qtns").is_file()

    def write_json(self, name, obj):
        self.path(name).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")

    def read_json(self, name) -> dict:
        p = self.path(name)
        if not p.is_file():
            raise FileNotFoundError(f"{p} is missing; run the stage that produces it first")
        return json.loads(p.read_text())


def _acquired(cfg: ex.ExperimentConfig) -> tuple:
    return ex.acquired_indices(len(cfg.tsl_ms), cfg.r_tsl)


def _acquired_tsl(cfg) -> tuple:
    return tuple(cfg.tsl_ms[i] for i in _acquired(cfg))


# --------------------------------------------------------------------------
# Stages
# --------------------------------------------------------------------------

def stage_phantom(cfg: ex.ExperimentConfig, ws: Workspace):
    spec = cfg.phantom_spec()
    case = ex.make_slice(cfg.seed, n_coils=cfg.n_coils, tsl_ms=cfg.tsl_ms, spec=spec, phase_mode=cfg.phase_mode)
    ws.write("truth_s0", case.truth.s0)
    ws.write("truth_t1rho", case.truth.t1rho_ms)
    ws.write("truth_valid", case.truth.valid_mask)
    ws.write("labels", case.labels)
    ws.write("truth_series", case.series.images)
    ws.write("coils", case.coils.sens)
    ws.write_json("phantom.json", {"spec": spec.to_dict(), "hash": phantom_hash(spec)})
    return case


def stage_mask(cfg, ws):
    ny, nx = ws.read("truth_valid").shape
    mask = ex.acquisition_mask(ny, nx, len(_acquired(cfg)), cfg.r_k, cfg.seed)
    ws.write("mask", mask.mask)
    return mask


def _truth_series(cfg, ws) -> ContrastImageSet:
    return ContrastImageSet(ws.read("truth_series"), cfg.tsl_ms)


def _mask(cfg, ws) -> acq.SamplingMask:
    return acq.SamplingMask(ws.read("mask").astype(bool), cfg.r_k)


def stage_acquire(cfg, ws):
    if not ws.has("mask"):
        stage_mask(cfg, ws)
    y = ex.acquire_with_mask(_truth_series(cfg, ws), acq.CoilProfile(ws.read("coils")),
                             ws.read("truth_valid").astype(bool), _mask(cfg, ws), _acquired(cfg),
                             cfg.snr_db, cfg.seed)
    ws.write("kspace", y.y)
    ws.write_json("acquire.json", {"noise_std": y.noise_std,
                                   "realized_acceleration": [float(r) for r in y.mask.realized_acceleration()]})
    return y


def _kspace(cfg, ws) -> acq.KSpaceData:
    info = ws.read_json("acquire.json")
    return acq.KSpaceData(ws.read("kspace"), _mask(cfg, ws), info["noise_std"])


def stage_recon(cfg, ws):
    learned = None
    if cfg.recon == "learned-admm":
        from .recon import LearnedADMM

        learned = LearnedADMM.load(cfg.recon_model_dir)
    rec = ex.reconstruct(_kspace(cfg, ws), acq.CoilProfile(ws.read("coils")), cfg.recon, _acquired_tsl(cfg),
                         cfg.recon_config, cfg.ls_config, learned)
    ws.write("recon", rec.images)
    return rec


def stage_generate(cfg, ws):
    from .generative import GenModel, generate_full_series

    rec = ContrastImageSet(ws.read("recon"), _acquired_tsl(cfg))
    if cfg.generation == "none":
        series = rec.magnitude()
    else:
        gen = "analytic" if cfg.generation == "analytic" else GenModel.load(cfg.model_dir)
        series = generate_full_series(rec, gen, cfg.tsl_ms)
    ws.write("series", series.images)
    return series


def stage_fit(cfg, ws):
    tsl = cfg.tsl_ms if cfg.generation != "none" else _acquired_tsl(cfg)
    pm = ex.fit_series(ContrastImageSet(ws.read("series"), tsl), cfg.fit_config)
    ws.write("fit_s0", pm.s0)
    ws.write("fit_t1rho", pm.t1rho_ms)
    ws.write("fit_valid", pm.valid_mask)
    ws.write("fit_residual", pm.residual)
    return pm


def _truth_map(ws) -> ParamMap:
    valid = ws.read("truth_valid").astype(bool)
    return ParamMap(ws.read("truth_s0"), ws.read("truth_t1rho"), valid, np.zeros(valid.shape))


def _fit_map(ws) -> ParamMap:
    return ParamMap(ws.read("fit_s0"), ws.read("fit_t1rho"), ws.read("fit_valid").astype(bool),
                    ws.read("fit_residual"))


def metric_rows(cfg, ws) -> list:
    """Rows of ``metrics.csv`` recomputed from the tensors in ``ws``."""
    name, seed = cfg.name, cfg.seed
    truth = _truth_map(ws)
    roi = truth.valid_mask
    full = _truth_series(cfg, ws)
    acquired = full.select(_acquired(cfg))
    rows = []
    info = ws.read_json("acquire.json")
    rows.append((name, "acquire", "all", "realized_acceleration", float(np.mean(info["realized_acceleration"])),
                 seed))
    rows.append((name, "acquire", "all", "noise_std", info["noise_std"], seed))
    rows.append((name, "recon", "all", "image_nrmse", nrmse(ws.read("recon"), acquired.images,
                                                            np.broadcast_to(roi, acquired.images.shape)), seed))
    series = ws.read("series")
    ref = np.abs(full.images if cfg.generation != "none" else acquired.images)
    rows.append((name, "generate", "all", "image_nrmse", nrmse(series, ref, np.broadcast_to(roi, ref.shape)),
                 seed))
    est = _fit_map(ws)
    rows.append((name, "fit", "all", "t1rho_nrmse", ex.t1rho_nrmse(est, truth), seed))
    rows.append((name, "fit", "all", "s0_nrmse", nrmse(est.s0, truth.s0, roi), seed))
    rows.append((name, "fit", "all", "valid_fraction", float(np.mean(est.valid_mask[roi])), seed))
    labels = ws.read("labels")
    true_t = {r.label: r.mean for r in region_stats(truth.t1rho_ms, labels, roi)}
    for r in region_stats(est, labels):
        region = f"region{r.label}"
        for metric, value in (("t1rho_true", true_t[r.label]), ("n_valid", r.n), ("t1rho_mean", r.mean),
                              ("t1rho_median", r.median), ("t1rho_q1", r.q1), ("t1rho_q3", r.q3)):
            rows.append((name, "fit", region, metric, value, seed))
    return rows


def stage_eval(cfg, ws):
    rows = metric_rows(cfg, ws)
    ws.path("metrics.csv").write_text(metrics_csv(rows))
    truth, est = _truth_map(ws), _fit_map(ws)
    vmax = cfg.fit_config.t1rho_max
    write_pgm(ws.path("t1rho.pgm"), est.t1rho_ms, vmax)
    err = np.where(truth.valid_mask, np.abs(est.t1rho_ms - truth.t1rho_ms), 0.0)
    ws.write("t1rho_error", err)
    write_pgm(ws.path("t1rho_error.pgm"), err, vmax)
    return rows


STAGE_FUNCS = {"phantom": stage_phantom, "mask": stage_mask, "acquire": stage_acquire, "recon": stage_recon,
               "generate": stage_generate, "fit": stage_fit, "eval": stage_eval}


def run_stage(name, cfg, ws):
    log.info("%s: running", name)
    try:
        return STAGE_FUNCS[name](cfg, ws)
    except Exception as exc:
        raise StageError(name, exc) from exc


def run_pipeline(cfg: ex.ExperimentConfig, out) -> dict:
    """Run every stage into ``out`` and write ``manifest.json``."""
    ws = Workspace(out)
    ws.root.mkdir(parents=True, exist_ok=True)
    for name in STAGES:
        run_stage(name, cfg, ws)
    files = sorted(p.name for p in ws.root.iterdir() if p.is_file() and p.name not in ("manifest.json", LOCK_NAME))
    manifest = {
        "rgmap_version": __version__,
        "config": cfg.to_dict(),
        "r_e": cfg.r_e,
        "phantom_hash": ws.read_json("phantom.json")["hash"],
        "files": {f: _sha256(ws.path(f)) for f in files},
    }
    ws.write_json("manifest.json", manifest)
    return manifest


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------

def load_train_config(path, seed=None) -> ex.TrainRunConfig:
    d = _read_json(path)
    if seed is not None:
        d = dict(d, seed=seed)
    try:
        cfg = ex.TrainRunConfig.from_dict(d)
        from .generative import TrainConfig

        TrainConfig.from_dict(cfg.train)
        cfg.slice_seeds()
    except (TypeError, ValueError, KeyError, FileNotFoundError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return cfg


def build_training_cases(cfg: ex.TrainRunConfig, seeds):
    acquired = ex.acquired_indices(len(cfg.tsl_ms), 2.5)
    cases = []
    for s in seeds:
        c = ex.make_slice(s, cfg.ny, cfg.nx, cfg.n_coils, cfg.tsl_ms)
        cases.append((ex.acquire(c, cfg.r_k, acquired, cfg.snr_db, seed=s), c.coils, c.series))
    return cases


def history_csv(history) -> str:
    cols = ["step", "epoch", "train_loss1", "val_loss1", "train_loss2", "val_loss2", "train_loss3", "val_loss3"]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for row in history.rows:
        w.writerow([row[c] if c in ("step", "epoch") else repr(float(row[c])) for c in cols])
    return buf.getvalue()


def run_train(cfg: ex.TrainRunConfig, out) -> dict:
    from .generative import TrainConfig, train_pipeline
    from .recon import ReconConfig

    ws = Workspace(out)
    ws.root.mkdir(parents=True, exist_ok=True)
    train_cfg = TrainConfig.from_dict(dict(cfg.train, **({} if "seed" in cfg.train else {"seed": cfg.seed})))
    recon_cfg = ReconConfig.from_dict(dict(cfg.recon_cfg, mode="learned" if cfg.recon == "learned-admm"
                                           else "classical"))
    try:
        train_seeds, val_seeds = cfg.slice_seeds()
        train_set = build_training_cases(cfg, train_seeds)
        val_set = build_training_cases(cfg, val_seeds)
        ws.write_json("dataset.json", {"train_seeds": [str(s) for s in train_seeds],
                                       "val_seeds": [str(s) for s in val_seeds], "ny": cfg.ny, "nx": cfg.nx,
                                       "n_coils": cfg.n_coils})
    except Exception as exc:
        raise StageError("dataset", exc) from exc
    try:
        recon, model, history = train_pipeline(train_set, val_set, recon_cfg, train_cfg, eta_grid=cfg.eta_grid,
                                               tune_cases=cfg.tune_cases)
    except Exception as exc:
        raise StageError("train", exc) from exc
    model.save(ws.path("generator"))
    if cfg.recon == "learned-admm":
        recon.save(ws.path("recon_model"))
        recon_out = {"recon_model_dir": str(ws.path("recon_model"))}
    else:
        recon_out = {"recon_cfg": recon.to_dict()}
    ws.path("history.csv").write_text(history_csv(history))
    summary = {"config": cfg.to_dict(), "train": train_cfg.to_dict(), "epochs": len(history),
               "model_dir": str(ws.path("generator")), **recon_out}
    ws.write_json("train_manifest.json", summary)
    return summary


# --------------------------------------------------------------------------
# Comparison
# --------------------------------------------------------------------------

def _read_metrics(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_compare(run_dirs, out) -> list:
    """Rank finished pipeline runs by T1rho nRMSE.

    Writes ``comparison.csv`` (one row per run, best first) and
    ``region_stats.csv`` (per-region quartiles of every run).
    """
    if len(run_dirs) < 2:
        raise ConfigError("compare needs at least two run directories")
    runs = []
    for d in run_dirs:
        d = Path(d)
        if not (d / "manifest.json").is_file() or not (d / "metrics.csv").is_file():
            raise ConfigError(f"{d} is not a finished pipeline run (manifest.json / metrics.csv missing)")
        manifest = json.loads((d / "manifest.json").read_text())
        metrics = _read_metrics(d / "metrics.csv")
        t = [float(r["value"]) for r in metrics if r["stage"] == "fit" and r["region"] == "all"
             and r["metric"] == "t1rho_nrmse"]
        if len(t) != 1:
            raise ConfigError(f"{d}/metrics.csv has no T1rho nRMSE row")
        runs.append((d, manifest, metrics, t[0]))
    hashes = {m["phantom_hash"] for _, m, _, _ in runs}
    if len(hashes) != 1:
        raise ConfigError("runs use different phantoms (phantom hashes differ); they cannot be compared")
    runs.sort(key=lambda r: (r[3], str(r[0])))
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["rank", "run", "experiment", "recon", "generation", "r_k", "r_tsl", "r_e", "snr_db", "t1rho_nrmse"])
    table = []
    for rank, (d, m, _, t) in enumerate(runs, start=1):
        c = m["config"]
        row = [rank, str(d), c["name"], c["recon"], c["generation"], c["r_k"], c["r_tsl"], m["r_e"],
               "inf" if c["snr_db"] is None else c["snr_db"], repr(t)]
        w.writerow(row)
        table.append(row)
    (out / "comparison.csv").write_text(buf.getvalue())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["run", "experiment", "region", "t1rho_true", "n_valid", "q1", "median", "q3", "mean"])
    for d, m, metrics, _ in runs:
        per = {}
        for r in metrics:
            if r["stage"] == "fit" and r["region"] != "all":
                per.setdefault(r["region"], {})[r["metric"]] = r["value"]
        for region in sorted(per, key=lambda s: int(s.removeprefix("region"))):
            v = per[region]
            w.writerow([str(d), m["config"]["name"], region, v["t1rho_true"], v["n_valid"], v["t1rho_q1"],
                        v["t1rho_median"], v["t1rho_q3"], v["t1rho_mean"]])
    (out / "region_stats.csv").write_text(buf.getvalue())
    return table


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------

def _seed_arg(text) -> int:
    try:
        return check_seed(int(text))
    except (TypeError, ValueError) as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rgmap", description="T1rho mapping from two undersampled contrasts.")
    p.add_argument("--version", action="version", version=f"rgmap {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--seed", type=_seed_arg, help="override the config seed (unsigned 64-bit)")
    common.add_argument("--quiet", action="store_true", help="only report errors")
    for name in STAGES + ("pipeline", "train"):
        sp = sub.add_parser(name, parents=[common], help=f"run the {name} stage" if name in STAGES else None)
        sp.add_argument("--config", required=True, help="JSON config file")
    sp = sub.add_parser("compare", parents=[common], help="rank finished pipeline runs")
    sp.add_argument("runs", nargs="+", help="pipeline output directories")
    sp.add_argument("--config", help="unused; accepted for symmetry")
    return p


def _dispatch(args) -> int:
    out = Path(args.out)
    if args.command == "compare":
        table = run_compare(args.runs, out)
        for row in table:
            log.info("%d. %s  T1rho nRMSE %s", row[0], row[1], row[-1])
        return 0
    if args.command == "train":
        cfg = load_train_config(args.config, args.seed)
        summary = run_train(cfg, out)
        log.info("trained %d epochs; generator in %s", summary["epochs"], summary["model_dir"])
        return 0
    cfg = load_experiment_config(args.config, args.seed)
    if args.command == "pipeline":
        manifest = run_pipeline(cfg, out)
        log.info("pipeline done: R_e = %g, outputs in %s", manifest["r_e"], out)
        return 0
    out.mkdir(parents=True, exist_ok=True)
    run_stage(args.command, cfg, Workspace(out))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.ERROR if args.quiet else logging.INFO, format="%(message)s",
                        stream=sys.stderr, force=True)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        lock = FileLock(str(out / LOCK_NAME), timeout=0)
        with lock:
            return _dispatch(args)
    except Timeout:
        print(f"error: {out} is in use by another rgmap command", file=sys.stderr)
        return 3
    except ConfigError as exc:
        print(f"error: config: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
