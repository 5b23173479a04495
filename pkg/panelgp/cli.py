"""Command-line surface: simulate | fit | evaluate | select-b | bench.

Settings come from ``key = value`` files merged as defaults < --config <
--set < dedicated flags; every command writes the merged settings to
``resolved_config.txt`` in its output directory.
"""

import argparse
import json
import logging
import math
import os
import sys
from dataclasses import asdict, dataclass, fields, replace
from multiprocessing import Pool, cpu_count

from panelgp.ArdKernel import Interval
from panelgp.evaluate import mean_intensity, mise, test_log_likelihood
from panelgp.fit import fit_gp3, fit_gp4c, fit_gp4cw, fit_piecewise_constant, predict_intensity
from panelgp.FitResult import MODEL_KINDS, FitConfig, FitResult
from panelgp.funcs import DataFormatError, NumericalError
from panelgp.numerics import select_b
from panelgp.PanelDataset import (
    FLOAT_FORMAT,
    IntensitySpec,
    read_panel_csv,
    read_recurrent_csv,
    simulate_datasets,
    synthetic_intensity,
    train_test_split,
    write_panel_csv,
    write_recurrent_csv,
)

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

RESOLVED_CONFIG = "resolved_config.txt"
THREADS_ENV = "PANELGP_THREADS"
EXIT_OK = 0
EXIT_NUMERICAL = 1
EXIT_INPUT = 2


@dataclass
class ExperimentConfig:
    model: str = "gp4c"
    seed: int = 0
    out: str = "out"
    # simulate
    preset: str = "synthetic_a"
    constant_rate: float = 4.0
    n_subjects: int = 100
    n_intervals: int = 10
    window_start: float = 0.0
    window_end: float = 60.0
    multiplier_low: float = 1.0
    multiplier_high: float = 1.0
    # inputs
    train: str = ""
    test: str = ""
    model_file: str = ""
    truth: str = ""
    # fit
    n_pseudo: int = 30
    b: float = 0.3
    max_vem_iters: int = 100
    inner_opt_iters: int = 50
    rel_tol: float = 1e-6
    jitter: float = 1e-6
    weight_floor: float = 1e-6
    n_bins: int = 0
    pwc_iters: int = 500
    # evaluate
    U: int = 50
    path_grid: int = 3001
    quad_points: int = 501
    curve_points: int = 0
    credible_mass: float = 0.75
    mc_samples: int = 2000
    # select-b
    phi_min: float = 1e-6
    phi_max: float = 1e6
    phi_points: int = 5000
    b_points: int = 50
    # bench
    trials: int = 40
    train_fraction: float = 0.5
    sweep_pseudo: str = "30"
    sweep_ratio: str = "0.5"
    workers: int = 0

    def __post_init__(self):
        if self.model not in MODEL_KINDS:
            raise DataFormatError("unknown model '{}', expected one of {}".format(self.model, ", ".join(MODEL_KINDS)), column="model")

    def fit_config(self, **changes):
        cfg = FitConfig(
            n_pseudo=self.n_pseudo,
            b=self.b,
            max_vem_iters=self.max_vem_iters,
            inner_opt_iters=self.inner_opt_iters,
            rel_tol=self.rel_tol,
            jitter=self.jitter,
            seed=self.seed,
            weight_floor=self.weight_floor,
            n_bins=self.n_bins or None,
            pwc_iters=self.pwc_iters,
        )
        return replace(cfg, **changes)

    @property
    def window(self):
        return Interval(self.window_start, self.window_end)

    def to_text(self):
        return "".join("{} = {}\n".format(k, v) for k, v in asdict(self).items())

    def save(self, filename):
        with open(filename, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.to_text())


_FIELD_TYPES = {f.name: f.type for f in fields(ExperimentConfig)}


def _coerce(key, value, row=None):
    kind = _FIELD_TYPES.get(key)
    if kind is None:
        raise DataFormatError("unknown configuration key '{}'".format(key), row=row, column=key)
    if kind in (str, "str"):
        return value
    try:
        return int(value) if kind in (int, "int") else float(value)
    except ValueError:
        raise DataFormatError("'{}' is not a valid {}".format(value, getattr(kind, "__name__", kind)), row=row, column=key) from None


def parse_config_text(text):
    settings = {}
    for row, line in enumerate(text.split("\n"), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise DataFormatError("expected 'key = value'", row=row)
        settings[key.strip()] = _coerce(key.strip(), value.strip(), row)
    return settings


def load_config(path=None, overrides=(), **flags):
    """Defaults < file < ``key=value`` overrides < flags that are not None."""
    settings = {}
    if path:
        with open(path, "r", encoding="utf-8") as f:
            settings.update(parse_config_text(f.read()))
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise DataFormatError("--set expects key=value, got '{}'".format(item))
        settings[key.strip()] = _coerce(key.strip(), value.strip())
    settings.update({k: v for k, v in flags.items() if v is not None})
    return ExperimentConfig(**settings)


def _out_path(cfg, name):
    return os.path.join(cfg.out, name)


def _require(path, what):
    if not path:
        raise DataFormatError("no {} given (set '{}')".format(what, what))
    if not os.path.exists(path):
        raise FileNotFoundError("{} file not found: {}".format(what, path))
    return path


def _intensity(cfg):
    if cfg.preset == "constant":
        return IntensitySpec.constant(cfg.constant_rate)
    if cfg.preset == "table":
        return IntensitySpec.load_table(_require(cfg.truth, "truth"))
    return synthetic_intensity(cfg.preset)


def _simulate(cfg, seed):
    multipliers = None if cfg.multiplier_low == cfg.multiplier_high == 1.0 else (cfg.multiplier_low, cfg.multiplier_high)
    intensity = _intensity(cfg)
    return intensity, simulate_datasets(intensity, cfg.n_subjects, cfg.window, cfg.n_intervals, seed=seed, multiplier_range=multipliers)


def cmd_simulate(cfg):
    intensity, sim = _simulate(cfg, cfg.seed)
    write_recurrent_csv(sim.recurrent, _out_path(cfg, "recurrent.csv"))
    write_panel_csv(sim.panel, _out_path(cfg, "panel.csv"))
    intensity.save_table(_out_path(cfg, "truth.csv"), cfg.window)
    pd.DataFrame({"subject_id": sim.panel.subject_ids, "multiplier": sim.multipliers}).to_csv(
        _out_path(cfg, "multipliers.csv"), index=False, float_format=FLOAT_FORMAT, lineterminator="\n"
    )
    return ["recurrent.csv", "panel.csv", "truth.csv", "multipliers.csv"]


def run_fit(model, train, cfg):
    if model == "gp4c":
        return fit_gp4c(train, cfg)
    if model == "gp4cw":
        return fit_gp4cw(train, cfg)
    if model == "gp3":
        return fit_gp3(train, cfg)
    return fit_piecewise_constant(train, cfg.n_bins, cfg.pwc_iters)


def _read_training(cfg):
    path = _require(cfg.train, "train")
    return read_recurrent_csv(path) if cfg.model == "gp3" else read_panel_csv(path)


def cmd_fit(cfg):
    fit = run_fit(cfg.model, _read_training(cfg), cfg.fit_config())
    fit = replace(fit, extra={**fit.extra, "experiment": asdict(cfg)})
    fit.save(_out_path(cfg, "model.txt"))
    fit.save_json(_out_path(cfg, "summary.json"))
    return ["model.txt", "summary.json"]


def cmd_evaluate(cfg):
    fit = FitResult.load(_require(cfg.model_file, "model_file"))
    test = read_panel_csv(_require(cfg.test, "test"))
    truth = IntensitySpec.load_table(_require(cfg.truth, "truth")) if cfg.truth else None
    report = test_log_likelihood(fit, test, U=cfg.U, path_grid=cfg.path_grid, quad_points=cfg.quad_points, seed=cfg.seed, truth=truth)
    report.save_json(_out_path(cfg, "report.json"))
    report.save_per_subject_csv(_out_path(cfg, "per_subject.csv"))
    written = ["report.json", "per_subject.csv"]
    if cfg.curve_points > 0:
        grid = np.linspace(fit.domain.start, fit.domain.end, cfg.curve_points)
        band = predict_intensity(fit, grid, cfg.credible_mass, cfg.mc_samples, cfg.seed)
        pd.DataFrame(band._asdict()).to_csv(_out_path(cfg, "curve.csv"), index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
        written.append("curve.csv")
    return written


def cmd_select_b(cfg):
    phi = np.logspace(math.log10(cfg.phi_min), math.log10(cfg.phi_max), cfg.phi_points)
    b_star, grid = select_b(phi, np.linspace(0.0, 1.0, cfg.b_points))
    pd.DataFrame({"b": grid.b_values, "variance": grid.variances}).to_csv(_out_path(cfg, "gap_grid.csv"), index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    with open(_out_path(cfg, "b_star.json"), "w+") as f:
        json.dump({"b_star": b_star}, f, indent=2)
    logger.info("b* = %.6f", b_star)
    return ["gap_grid.csv", "b_star.json"]


def _parse_list(text, kind):
    return [kind(v) for v in text.replace(" ", "").split(",") if v]


def worker_count(requested=0):
    """Pool size: the request (or all cores), capped by PANELGP_THREADS."""
    workers = requested if requested > 0 else cpu_count()
    cap = os.environ.get(THREADS_ENV)
    if cap:
        try:
            workers = min(workers, max(1, int(cap)))
        except ValueError:
            raise DataFormatError("{} must be an integer, got '{}'".format(THREADS_ENV, cap)) from None
    return max(1, workers)


def _bench_trial(task):
    cfg, n_pseudo, ratio, trial = task
    seed = cfg.seed + trial
    row = {"n_pseudo": n_pseudo, "train_fraction": ratio, "trial": trial, "seed": seed, "error": ""}
    try:
        truth, recurrent = None, None
        if cfg.train:
            panel = read_panel_csv(cfg.train)
        else:
            truth, sim = _simulate(cfg, seed)
            panel, recurrent = sim.panel, sim.recurrent
        if cfg.truth:
            truth = IntensitySpec.load_table(cfg.truth)
        train, test = train_test_split(panel, ratio, seed) if ratio < 1.0 else (panel, None)
        if cfg.model == "gp3":
            train = recurrent.select(train.subject_ids)
        fit = run_fit(cfg.model, train, cfg.fit_config(n_pseudo=n_pseudo, seed=seed))
        row.update(
            wall_time=fit.wall_time,
            iterations=fit.iterations,
            time_per_iteration=fit.wall_time / max(fit.iterations, 1),
            time_per_evaluation=fit.wall_time / max(fit.n_evaluations, 1),
            final_bound=fit.final_bound,
        )
        if test is not None and len(test):
            row["test_ll"] = test_log_likelihood(fit, test, U=cfg.U, path_grid=cfg.path_grid, quad_points=cfg.quad_points, seed=seed).test_ll
        if truth is not None:
            row["mise"] = mise(mean_intensity(fit), truth, fit.domain)
    except (NumericalError, ValueError) as e:
        row["error"] = "{}: {}".format(type(e).__name__, e)
        logger.warning("bench cell n_pseudo=%d ratio=%g trial=%d failed: %s", n_pseudo, ratio, trial, e)
    return row


BENCH_METRICS = ["wall_time", "time_per_iteration", "time_per_evaluation", "final_bound", "test_ll", "mise"]


def summarize_bench(trials):
    """Median and 0.25 / 0.75 quantiles of every metric per sweep point, failed cells excluded."""
    ok = trials[trials["error"] == ""]
    metrics = [m for m in BENCH_METRICS if m in ok.columns]
    grouped = ok.groupby(["n_pseudo", "train_fraction"], sort=True)[metrics]
    summary = pd.concat(
        {
            "median": grouped.median(),
            "q25": grouped.quantile(0.25),
            "q75": grouped.quantile(0.75),
        },
        axis=1,
    )
    summary.columns = ["{}_{}".format(metric, stat) for stat, metric in summary.columns]
    counts = trials.groupby(["n_pseudo", "train_fraction"], sort=True).agg(trials=("trial", "size"), failed=("error", lambda e: int((e != "").sum())))
    return counts.join(summary).reset_index()


def cmd_bench(cfg):
    tasks = [(cfg, m, r, t) for m in _parse_list(cfg.sweep_pseudo, int) for r in _parse_list(cfg.sweep_ratio, float) for t in range(cfg.trials)]
    if not tasks:
        raise DataFormatError("empty bench sweep")
    if cfg.model == "gp3" and cfg.train:
        raise DataFormatError("gp3 benches run on simulated data; leave 'train' empty", column="train")
    workers = min(worker_count(cfg.workers), len(tasks))
    logger.info("bench: %d fits on %d worker(s)", len(tasks), workers)
    if workers == 1:
        rows = [_bench_trial(t) for t in tasks]
    else:
        with Pool(workers) as pool:
            rows = pool.map(_bench_trial, tasks)
    trials = pd.DataFrame(rows)
    trials.to_csv(_out_path(cfg, "bench_trials.csv"), index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    summarize_bench(trials).to_csv(_out_path(cfg, "bench.csv"), index=False, float_format=FLOAT_FORMAT, lineterminator="\n")
    return ["bench_trials.csv", "bench.csv"]


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "evaluate": cmd_evaluate,
    "select-b": cmd_select_b,
    "bench": cmd_bench,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="panelgp", description="Sparse variational GP intensities from panel count data.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value settings file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", help="output directory")
        p.add_argument("--model", choices=MODEL_KINDS)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", dest="overrides")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, args.overrides, seed=args.seed, out=args.out, model=args.model)
        os.makedirs(cfg.out, exist_ok=True)
        cfg.save(_out_path(cfg, RESOLVED_CONFIG))
        logger.info("%s started, output in %s", args.command, cfg.out)
        written = COMMANDS[args.command](cfg)
        logger.info("%s finished, wrote %s", args.command, ", ".join(written))
    except NumericalError as e:
        logger.error("numerical failure: %s", e)
        return EXIT_NUMERICAL
    except (DataFormatError, OSError, ValueError, KeyError) as e:
        logger.error("input error: %s", e)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
