"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 data or configuration error,
3 numerical or convergence error.
"""

import argparse
import copy
import math
import sys

import numpy as np

from . import curves
from .exceptions import (
    ConvergenceError,
    DataFormatError,
    DegenerateSubspaceError,
    DimensionError,
    NumericalError,
    OptimizationError,
)
from .io import (
    atomic_write_text,
    load_dataset,
    load_json,
    model_document,
    model_from_document,
    save_dataset,
    save_json,
)
from .kernels import KernelSpec
from .model import MLGPModel, MultiTaskDataset, TrainConfig, fit, mle_subspace_angle, predict, stationarity_residual
from .synth import SynthConfig, synth_generate
from .tensreg import als_fit, principal_angles

__all__ = ["RunConfig", "ConfigError", "run_command", "main"]

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3

COMMANDS = ("train", "predict", "synth", "tensreg", "equiv", "curve-theory", "curve-sim")

DEFAULTS = {
    "mode_dims": None,
    "ranks": None,
    "kernel": None,
    "seed": 0,
    "train": {
        "max_iters": 500,
        "grad_tol": 1e-6,
        "tie_noise": False,
        "reorthonormalize": True,
        "init_scale": 1.0,
    },
    "tensreg": {"sweeps": 20, "ridge": None, "tol": 0.0},
    "synth": {"n_per_task": 10, "noise_var": 0.01, "core_amp": 1.0, "n_outputs": 1},
    "curve": {
        "structure": "ar1",
        "modes": 3,
        "rho": 0.5,
        "n_tasks": 16,
        "k": 10,
        "decay": 2.0,
        "spectrum": None,
        "noise_var": 0.05,
        "allocation": None,
        "grid": [0, 16, 32, 64, 128, 256],
        "replicates": 50,
        "rank": None,
        "mode_ranks": None,
        "assignment": "random",
    },
}

# keys whose value may be a scalar or a list
_FLEXIBLE = {"synth.n_per_task", "synth.noise_var", "curve.noise_var"}


class ConfigError(ValueError):
    """Invalid run configuration; the message names the offending key."""


class UsageError(Exception):
    pass


def _check_value(key, value, default):
    if value is None or default is None or key in _FLEXIBLE:
        return value
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key '{key}' must be true or false")
    elif isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key '{key}' must be an integer")
    elif isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key '{key}' must be a number")
        value = float(value)
    elif isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"config key '{key}' must be a string")
    elif isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"config key '{key}' must be a list")
    return value


def _merge(defaults, given, prefix=""):
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        path = prefix + key
        if key not in defaults:
            raise ConfigError(f"unknown config key '{path}'")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key '{path}' must be an object")
            out[key] = _merge(defaults[key], value, path + ".")
        else:
            out[key] = _check_value(path, value, defaults[key])
    return out


class RunConfig:
    """Validated run configuration.

    Built from a JSON object with the top-level keys ``mode_dims``,
    ``ranks``, ``kernel``, ``seed`` and the sections ``train``,
    ``tensreg``, ``synth`` and ``curve``.  Missing keys take their
    defaults; unknown keys raise :class:`ConfigError` naming the key.
    """

    def __init__(self, values):
        self.values = values

    @classmethod
    def from_dict(cls, d):
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        values = _merge(DEFAULTS, d)
        for key in ("mode_dims", "ranks"):
            v = values[key]
            if v is not None and (
                not isinstance(v, list) or not all(isinstance(i, int) and not isinstance(i, bool) for i in v)
            ):
                raise ConfigError(f"config key '{key}' must be a list of integers")
        if values["kernel"] is not None:
            try:
                KernelSpec.from_dict(values["kernel"])
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"config key 'kernel' is invalid: {exc}") from None
        try:
            TrainConfig(**values["train"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"config section 'train' is invalid: {exc}") from None
        return cls(values)

    @classmethod
    def load(cls, path):
        if path is None:
            return cls.from_dict({})
        return cls.from_dict(load_json(path))

    def to_dict(self):
        return copy.deepcopy(self.values)

    def __getitem__(self, key):
        return self.values[key]

    def override(self, key, value, section=None):
        if section is None:
            self.values[key] = value
        else:
            self.values[section][key] = value

    def require(self, *keys):
        for key in keys:
            if self.values[key] is None:
                raise ConfigError(f"config key '{key}' is required for this command")

    @property
    def kernel(self):
        k = self.values["kernel"]
        return None if k is None else KernelSpec.from_dict(k)

    def train_config(self):
        return TrainConfig(seed=self.values["seed"], **self.values["train"])


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser():
    parser = _Parser(prog="mlgp", description="Multi-linear Gaussian processes and learning curves.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    helps = {
        "train": "fit an MLGP model by marginal likelihood",
        "predict": "posterior mean and variance from a trained model",
        "synth": "draw a dataset from the MLGP prior",
        "tensreg": "fit the Tucker tensor-regression baseline",
        "equiv": "compare the fitted MLGP with the output subspace and tensor regression",
        "curve-theory": "learning curves from the self-consistency equations",
        "curve-sim": "learning curves by Monte Carlo, next to the theory",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=helps[name], description=helps[name])
        p.add_argument("--config", metavar="PATH", help="run configuration (JSON)")
        p.add_argument("--out", metavar="PATH", required=True, help="output file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        if name in ("train", "predict", "tensreg", "equiv"):
            p.add_argument("--data", metavar="PATH", required=True, help="dataset CSV")
        if name in ("train", "tensreg", "equiv", "synth"):
            p.add_argument("--ranks", type=_int_list, metavar="R1,R2,R3", help="overrides the config ranks")
        if name == "predict":
            p.add_argument("--model", metavar="PATH", required=True, help="trained model (JSON)")
            p.add_argument("--queries", metavar="PATH", help="query CSV; defaults to the training inputs")
        if name == "synth":
            p.add_argument("--model", metavar="PATH", help="also write the generating model here")
        if name.startswith("curve"):
            p.add_argument("--rho", type=float, help="overrides curve.rho")
            p.add_argument("--grid", type=_int_list, metavar="N1,N2,...", help="overrides curve.grid")
        if name == "curve-sim":
            p.add_argument("--replicates", type=int, help="overrides curve.replicates")
    return parser


def _meta(config, command):
    return {"command": command, "config": config.to_dict(), "seed": config["seed"]}


def _write_csv_with_meta(path, text, config, command):
    atomic_write_text(path, text)
    save_json(_meta(config, command), str(path) + ".meta.json")


def _dataset_for(config, path):
    config.require("mode_dims")
    return load_dataset(path, config["mode_dims"][1:])


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(args, config):
    config.require("mode_dims", "ranks")
    data = _dataset_for(config, args.data)
    model = fit(data, config["mode_dims"], config["ranks"], config.train_config(), config.kernel)
    save_json(model_document(model, _meta(config, "train")), args.out)


def cmd_predict(args, config):
    doc = load_json(args.model)
    model = model_from_document(doc)
    if not isinstance(model, MLGPModel):
        raise DataFormatError("predict needs an MLGP model document")
    data = load_dataset(args.data, model.task_shape)
    queries = data if args.queries is None else load_dataset(args.queries, model.task_shape)
    post = predict(model, data, queries.X, queries.tasks)
    mean = post.mean.reshape(len(queries.tasks), -1)
    P = mean.shape[1]
    cols = ["mean"] if P == 1 else [f"mean{p + 1}" for p in range(P)]
    lines = [",".join(["task"] + cols + ["variance"])]
    for t, m, v in zip(queries.tasks, mean, post.variance):
        lines.append(",".join([str(int(t))] + [repr(float(x)) for x in m] + [repr(float(v))]))
    _write_csv_with_meta(args.out, "\n".join(lines) + "\n", config, "predict")


def cmd_synth(args, config):
    config.require("mode_dims", "ranks")
    s = config["synth"]
    sc = SynthConfig(config["mode_dims"], config["ranks"], s["n_per_task"], s["noise_var"],
                     s["core_amp"], s["n_outputs"], config.kernel)
    result = synth_generate(sc, config["seed"])
    save_dataset(result.dataset, args.out)
    save_json(_meta(config, "synth"), str(args.out) + ".meta.json")
    if args.model:
        save_json(model_document(result.model, _meta(config, "synth")), args.model)


def cmd_tensreg(args, config):
    config.require("mode_dims", "ranks")
    data = _dataset_for(config, args.data)
    t = config["tensreg"]
    model = als_fit(_first_output(data), config["ranks"], t["sweeps"], t["ridge"], config["seed"], t["tol"])
    save_json(model_document(model, _meta(config, "tensreg")), args.out)


def _first_output(data):
    if data.n_outputs == 1:
        return data
    return MultiTaskDataset(data.task_shape, data.X, data.Y[:, 0], data.tasks)


def cmd_equiv(args, config):
    config.require("mode_dims", "ranks")
    data = _dataset_for(config, args.data)
    model = fit(data, config["mode_dims"], config["ranks"], config.train_config(), config.kernel)
    t = config["tensreg"]
    tucker = als_fit(_first_output(data), config["ranks"], t["sweeps"], t["ridge"], config["seed"], t["tol"])
    report = {
        "nll": model.fit_info["nll"],
        "fit_status": model.fit_info["status"],
        "stationarity_residual": stationarity_residual(model, data),
    }
    try:
        report["mle_subspace_angle_deg"] = math.degrees(mle_subspace_angle(model, data))
    except (DimensionError, DegenerateSubspaceError) as exc:
        report["mle_subspace_angle_deg"] = None
        report["mle_subspace_angle_note"] = str(exc)
    if config.kernel is None:
        angles = principal_angles(model.factors[0], tucker.factors[0])
        report["feature_angles_deg"] = [math.degrees(a) for a in angles]
    doc = _meta(config, "equiv")
    doc["report"] = report
    save_json(doc, args.out)


def curve_problem(config):
    """Build the :class:`~mlgp.curves.CurveProblem` described by ``curve``."""
    c = config["curve"]
    # noise and allocation are set below, so the benchmark gets placeholders
    base = curves.benchmark_problem(c["rho"], c["modes"], 1.0, c["k"], c["decay"], c["n_tasks"], c["structure"])
    spectrum = base.spectrum if c["spectrum"] is None else np.asarray(c["spectrum"], dtype=float)
    problem = curves.CurveProblem(spectrum, base.task_factors, c["noise_var"], c["allocation"])
    if c["rank"] is not None and c["mode_ranks"] is not None:
        raise ConfigError("set at most one of 'curve.rank' and 'curve.mode_ranks'")
    if c["rank"] is not None:
        problem = curves.lowrank_truncate(problem, c["rank"])
    elif c["mode_ranks"] is not None:
        problem = curves.lowrank_truncate_modes(problem, c["mode_ranks"])
    return problem


def _curve_grid(config):
    grid = config["curve"]["grid"]
    if not grid or any(not isinstance(g, int) or g < 0 for g in grid):
        raise ConfigError("config key 'curve.grid' must be a non-empty list of non-negative integers")
    return grid


def cmd_curve_theory(args, config):
    problem = curve_problem(config)
    grid = _curve_grid(config)
    if config["curve"]["assignment"] == "fixed":
        alloc = np.array([curves.allocate(N, problem.allocation) for N in grid])
        theory = curves.lc_theory_multi(problem, alloc)
    else:
        theory = curves.lc_theory_multi(problem, grid)
    res = curves.CurveResult(np.asarray(grid, dtype=float), theory, None, None, 0, config["seed"])
    _write_csv_with_meta(args.out, res.to_csv(), config, "curve-theory")


def cmd_curve_sim(args, config):
    problem = curve_problem(config)
    c = config["curve"]
    res = curves.lc_simulate(problem, _curve_grid(config), c["replicates"], config["seed"], c["assignment"])
    _write_csv_with_meta(args.out, res.to_csv(), config, "curve-sim")
    if res.failures:
        print(f"curve-sim: {res.failures} replicate(s) failed and were excluded", file=sys.stderr)


HANDLERS = {
    "train": cmd_train,
    "predict": cmd_predict,
    "synth": cmd_synth,
    "tensreg": cmd_tensreg,
    "equiv": cmd_equiv,
    "curve-theory": cmd_curve_theory,
    "curve-sim": cmd_curve_sim,
}

_NUMERICAL = (NumericalError, ConvergenceError, OptimizationError, FloatingPointError, np.linalg.LinAlgError)
_DATA = (ConfigError, DataFormatError, DegenerateSubspaceError, OSError, KeyError, IndexError, ValueError,
         TypeError)


def run_command(argv):
    """Run one subcommand and return its exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required")
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mlgp: error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    stage = "config"
    try:
        config = RunConfig.load(args.config)
        if args.seed is not None:
            config.override("seed", args.seed)
        if getattr(args, "ranks", None) is not None:
            config.override("ranks", args.ranks)
        if getattr(args, "rho", None) is not None:
            config.override("rho", args.rho, "curve")
        if getattr(args, "grid", None) is not None:
            config.override("grid", args.grid, "curve")
        if getattr(args, "replicates", None) is not None:
            if args.replicates < 1:
                raise ConfigError("--replicates must be >= 1")
            config.override("replicates", args.replicates, "curve")
        stage = args.command
        HANDLERS[args.command](args, config)
    except _NUMERICAL as exc:
        print(f"mlgp {args.command}: {stage} stage: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except _DATA as exc:
        print(f"mlgp {args.command}: {stage} stage: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


def main():
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
