"""Experiment runner driven by a JSON config.

One config describes one run: where the data comes from (a CSV or a synthetic
recipe), the subspace model, the noise and optimizer settings, and the
command to execute:

  synth        generate a synthetic dataset and write it out
  fit          estimate transition parameters (iterative or recursive)
  impute       filter with missing entries and fill them in
  forecast     fit on the head of the data, roll predictions over the tail
  converge     factorization filter vs clairvoyant Kalman filter
  gp-features  extract latent features with the Matern-3/2 subspace

Flags: --config PATH (required), --seed N (overrides the config),
--output DIR (overrides the config), --sweep N (run N consecutive seeds in a
worker pool; PSMF_THREADS caps the pool size). Every run writes summary.json;
on failure it contains a machine-readable error record and the exit code is
nonzero. Reruns with the same config and seed produce byte-identical numeric
output; only the runtime field varies.
"""

from __future__ import annotations

import argparse
import json
import multiprocessing
import os
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import DataMatrix, NoiseConfig
from .errors import ConfigError, ContractError, NumericalError, ParseError
from .estimation import (
    FitResult,
    OptimizerConfig,
    iterative_fit,
    masked_frobenius,
    recursive_fit,
)
from .evaluation import (
    SyntheticSpec,
    column_mean_baseline,
    convergence_experiment,
    generate_segment_mask,
    generate_synthetic,
    imputation_metrics,
    rng_stream,
)
from .filtering import FilterRun, FilterState, forecast, initial_state, run_filter
from .io import load_matrix, write_json, write_matrix, write_table
from .robust import robust_initial_state, run_robust_filter
from .subspace import GPMaternParams, SubspaceModel

COMMANDS = ("synth", "fit", "impute", "forecast", "converge", "gp-features")

_STREAM_THETA0 = 5
_STREAM_C0 = 6


# --------------------------------------------------------------------- config


@dataclass(frozen=True)
class RunConfig:
    command: str
    seed: int
    output_dir: str
    data_path: str | None
    synthetic: SyntheticSpec | None
    model: dict | None
    noise: dict
    optimizer: OptimizerConfig
    robust: bool
    lambda0: float | None
    missing: dict | None
    n_forecast: int


def _expect(cfg: dict, key: str, types, default=None, required=False):
    if key not in cfg or cfg[key] is None:
        if required:
            raise ConfigError(key, "is required")
        return default
    value = cfg[key]
    if not isinstance(value, types):
        tn = types.__name__ if isinstance(types, type) else "/".join(
            t.__name__ for t in types)
        raise ConfigError(key, f"must be {tn}, got {type(value).__name__}")
    return value


def _expect_number(cfg: dict, key: str, default=None, required=False,
                   minimum=None):
    value = _expect(cfg, key, (int, float), default=default, required=required)
    if value is None:
        return None
    if isinstance(value, bool):
        raise ConfigError(key, "must be a number, got a boolean")
    if minimum is not None and value < minimum:
        raise ConfigError(key, f"must be >= {minimum}")
    return float(value)


def _parse_synthetic(raw: dict) -> SyntheticSpec:
    known = {"d", "r", "n", "n_forecast", "theta_true", "noise", "noise_dof",
             "noise_scale", "model_kind", "process_noise_scale", "gp"}
    for key in raw:
        if key not in known:
            raise ConfigError(f"synthetic.{key}", "is not a recognized field")
    gp = None
    if raw.get("gp") is not None:
        g = raw["gp"]
        try:
            gp = GPMaternParams(float(g["sigma2"]), float(g["ell"]),
                                float(g["step"]), int(g["rank"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError("synthetic.gp", f"is malformed: {exc}")
    try:
        return SyntheticSpec(
            d=int(_expect_number(raw, "d", required=True, minimum=1)),
            r=int(_expect_number(raw, "r", required=True, minimum=1)),
            n=int(_expect_number(raw, "n", required=True, minimum=1)),
            n_forecast=int(_expect_number(raw, "n_forecast", default=0, minimum=0)),
            theta_true=tuple(_expect(raw, "theta_true", list, default=[])),
            noise=_expect(raw, "noise", str, default="gaussian"),
            noise_dof=_expect_number(raw, "noise_dof", default=3.0),
            noise_scale=_expect_number(raw, "noise_scale", default=0.1),
            model_kind=_expect(raw, "model_kind", str, default="cosine_periodic"),
            process_noise_scale=_expect_number(raw, "process_noise_scale",
                                               default=0.0),
            gp=gp,
        )
    except ContractError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("synthetic", str(exc))


def _parse_optimizer(raw: dict | None) -> OptimizerConfig:
    raw = raw or {}
    known = {"gamma", "beta1", "beta2", "epsilon", "mode", "outer_iterations",
             "reinit_noise_each_outer", "gradient"}
    for key in raw:
        if key not in known:
            raise ConfigError(f"optimizer.{key}", "is not a recognized field")
    try:
        return OptimizerConfig(
            gamma=_expect_number(raw, "gamma", default=1e-3, minimum=0.0),
            beta1=_expect_number(raw, "beta1", default=0.9),
            beta2=_expect_number(raw, "beta2", default=0.999),
            epsilon=_expect_number(raw, "epsilon", default=1e-8),
            mode=_expect(raw, "mode", str, default="iterative"),
            outer_iterations=int(_expect_number(raw, "outer_iterations",
                                                default=100, minimum=1)),
            reinit_noise_each_outer=_expect(raw, "reinit_noise_each_outer",
                                            bool, default=True),
            gradient=_expect(raw, "gradient", str, default="analytic"),
        )
    except ContractError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError("optimizer", str(exc))


def parse_config(raw: dict) -> RunConfig:
    """Validate a raw config dict; every failure names the offending field."""
    if not isinstance(raw, dict):
        raise ConfigError("<root>", "config must be a JSON object")
    known = {"command", "seed", "output_dir", "data_path", "synthetic",
             "model", "noise", "optimizer", "robust", "lambda0", "missing",
             "n_forecast"}
    for key in raw:
        if key not in known:
            raise ConfigError(key, "is not a recognized field")
    command = _expect(raw, "command", str, required=True)
    if command not in COMMANDS:
        raise ConfigError("command", f"must be one of {COMMANDS}")
    seed = int(_expect_number(raw, "seed", default=0, minimum=0))
    output_dir = _expect(raw, "output_dir", str, default="out")
    data_path = _expect(raw, "data_path", str)
    synthetic = None
    if raw.get("synthetic") is not None:
        synthetic = _parse_synthetic(_expect(raw, "synthetic", dict))
    if command != "converge":
        if data_path is None and synthetic is None:
            raise ConfigError("data_path",
                              "either data_path or synthetic is required")
        if data_path is not None and synthetic is not None:
            raise ConfigError("data_path",
                              "data_path and synthetic are mutually exclusive")
    model = _expect(raw, "model", dict)
    noise = _expect(raw, "noise", dict, default={})
    optimizer = _parse_optimizer(raw.get("optimizer"))
    robust = _expect(raw, "robust", bool, default=False)
    lambda0 = _expect_number(raw, "lambda0", minimum=1e-12)
    if robust and lambda0 is None:
        raise ConfigError("lambda0", "is required when robust is true")
    missing = _expect(raw, "missing", dict)
    if missing is not None:
        for key in missing:
            if key not in ("segment_len", "target_fraction"):
                raise ConfigError(f"missing.{key}", "is not a recognized field")
        _expect_number(missing, "segment_len", required=True, minimum=1)
        _expect_number(missing, "target_fraction", required=True)
    n_forecast = int(_expect_number(raw, "n_forecast", default=0, minimum=0))
    return RunConfig(command, seed, output_dir, data_path, synthetic, model,
                     noise, optimizer, robust, lambda0, missing, n_forecast)


# ----------------------------------------------------------- component builders


def _reseed_synthetic(spec: SyntheticSpec, seed: int) -> SyntheticSpec:
    from dataclasses import replace

    return replace(spec, seed=seed)


def _build_model(config: RunConfig, rank: int) -> SubspaceModel:
    raw = config.model or {}
    known = {"kind", "theta", "theta_uniform", "rank", "A", "gp"}
    for key in raw:
        if key not in known:
            raise ConfigError(f"model.{key}", "is not a recognized field")
    kind = _expect(raw, "kind", str, default="random_walk")
    rank = int(_expect_number(raw, "rank", default=rank, minimum=1))
    theta = raw.get("theta")
    uniform = raw.get("theta_uniform")
    if theta is not None and uniform is not None:
        raise ConfigError("model.theta", "theta and theta_uniform are exclusive")

    def initial_theta(size: int) -> np.ndarray:
        if theta is not None:
            arr = np.asarray(theta, dtype=float)
            if arr.shape != (size,):
                raise ConfigError("model.theta", f"must have {size} entries")
            return arr
        if uniform is not None:
            if (not isinstance(uniform, list) or len(uniform) != 2
                    or uniform[0] > uniform[1]):
                raise ConfigError("model.theta_uniform", "must be [low, high]")
            rng = rng_stream(config.seed, _STREAM_THETA0)
            return rng.uniform(uniform[0], uniform[1], size=size)
        raise ConfigError("model.theta", f"is required for kind '{kind}'")

    if kind == "random_walk":
        return SubspaceModel.random_walk(rank)
    if kind == "cosine_periodic":
        return SubspaceModel.cosine_periodic(initial_theta(rank))
    if kind == "sin_cos_periodic":
        return SubspaceModel.sin_cos_periodic(initial_theta(6), rank)
    if kind == "linear":
        if raw.get("A") is not None:
            return SubspaceModel.linear(A=np.asarray(raw["A"], dtype=float))
        return SubspaceModel.linear(theta=initial_theta(rank * rank),
                                    state_dim=rank)
    if kind == "gp_matern32":
        g = raw.get("gp")
        if g is None:
            raise ConfigError("model.gp", "is required for kind 'gp_matern32'")
        try:
            params = GPMaternParams(float(g["sigma2"]), float(g["ell"]),
                                    float(g["step"]), int(g.get("rank", rank)))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError("model.gp", f"is malformed: {exc}")
        return SubspaceModel.gp_matern32(params)
    raise ConfigError("model.kind", f"unknown kind '{kind}'")


def _build_noise(config: RunConfig, model: SubspaceModel, d: int) -> NoiseConfig:
    raw = config.noise or {}
    known = {"v0", "r_scale", "q_scale", "p0_scale", "mu0", "c0_scale", "c0"}
    for key in raw:
        if key not in known:
            raise ConfigError(f"noise.{key}", "is not a recognized field")
    r_feat = model.out_dim
    s = model.state_dim
    v0 = _expect_number(raw, "v0", default=0.1, minimum=0.0)
    r_scale = _expect_number(raw, "r_scale", default=1.0, minimum=0.0)
    q_scale = _expect_number(raw, "q_scale", default=0.0, minimum=0.0)
    p0_scale = _expect_number(raw, "p0_scale", default=0.0, minimum=0.0)
    c0_scale = _expect_number(raw, "c0_scale", default=1.0, minimum=0.0)
    mu0 = raw.get("mu0")
    if mu0 is None:
        mu0 = np.zeros(s)
    else:
        mu0 = np.asarray(mu0, dtype=float)
        if mu0.shape != (s,):
            raise ConfigError("noise.mu0", f"must have {s} entries")
    if raw.get("c0") is not None:
        C0 = np.asarray(raw["c0"], dtype=float)
        if C0.shape != (d, r_feat):
            raise ConfigError("noise.c0", f"must be {d} x {r_feat}")
    else:
        C0 = c0_scale * rng_stream(config.seed, _STREAM_C0).standard_normal(
            (d, r_feat))
    if model.kind == "gp_matern32":
        Q = model.static.Q_model
    else:
        Q = q_scale ** 2 * np.eye(s)
    return NoiseConfig(Q=Q, R=r_scale * np.eye(d), P0=p0_scale * np.eye(s),
                       V0=v0 * np.eye(r_feat), mu0=mu0, C0=C0)


# ------------------------------------------------------------------- artifacts


def _trace_rows(entries) -> tuple[list[str], list[list]]:
    robust = entries and entries[0].omega is not None
    header = ["k", "eta", "innovation_norm", "nll_increment", "observed_count"]
    if robust:
        header += ["omega", "phi", "lambda"]
    rows = []
    for e in entries:
        row = [e.k, e.eta, e.innovation_norm, e.nll_increment, e.observed_count]
        if robust:
            row += [e.omega, e.phi, e.lam]
        rows.append(row)
    return header, rows


def _write_fit_artifacts(outdir: Path, result: FitResult,
                         data: DataMatrix) -> dict:
    header, rows = _trace_rows(result.last_run.entries)
    write_table(outdir / "trace.csv", header, rows)
    p = len(result.theta)
    rep_header = (["iteration", "total_nll", "frobenius_error"]
                  + [f"theta_{i}" for i in range(p)])
    rep_rows = [[r.iteration, r.total_nll, r.frobenius_error, *r.theta]
                for r in result.report]
    write_table(outdir / "fit_report.csv", rep_header, rep_rows)
    recon = result.state.dictionary.mean @ result.last_run.coef_means
    write_matrix(outdir / "reconstruction.csv", recon)
    frob = masked_frobenius(data, result.state.dictionary.mean,
                            result.last_run.coef_means)
    obs = data.mask == 1
    rmse = float(np.sqrt(np.mean((data.values[obs] - recon[obs]) ** 2)))
    return {
        "theta_initial": list(result.report[0].theta) if result.report else [],
        "theta_final": [float(t) for t in result.theta],
        "total_nll_first": result.report[0].total_nll if result.report else None,
        "total_nll_final": result.report[-1].total_nll if result.report else None,
        "frobenius_first": result.report[0].frobenius_error if result.report else None,
        "frobenius_final": frob,
        "rmse": rmse,
    }


def _fit(config: RunConfig, data: DataMatrix, model: SubspaceModel,
         noise: NoiseConfig) -> FitResult:
    if config.optimizer.mode == "recursive":
        return recursive_fit(data, model, noise, config.optimizer,
                             robust=config.robust, lam0=config.lambda0)
    return iterative_fit(data, model, noise, config.optimizer,
                         robust=config.robust, lam0=config.lambda0)


def _load_input(config: RunConfig) -> tuple[DataMatrix, DataMatrix | None, dict]:
    """Returns (train, test-or-None, extras). Synthetic extras carry truth."""
    if config.synthetic is not None:
        spec = _reseed_synthetic(config.synthetic, config.seed)
        data, C_true, X_true = generate_synthetic(spec)
        n = spec.n
        train = DataMatrix(data.values[:, :n], data.mask[:, :n])
        test = None
        if spec.n_forecast > 0:
            test = DataMatrix(data.values[:, n:], data.mask[:, n:])
        return train, test, {"spec": spec, "C_true": C_true, "X_true": X_true}
    data = load_matrix(config.data_path)
    if config.n_forecast > 0:
        if config.n_forecast >= data.n:
            raise ConfigError("n_forecast", "must be smaller than the series")
        split = data.n - config.n_forecast
        train = DataMatrix(data.values[:, :split], data.mask[:, :split])
        test = DataMatrix(data.values[:, split:], data.mask[:, split:])
        return train, test, {}
    return data, None, {}


def _rank_hint(config: RunConfig) -> int:
    if config.synthetic is not None:
        return config.synthetic.r
    raw = config.model or {}
    if raw.get("rank") is None and raw.get("kind") not in ("gp_matern32",):
        if raw.get("A") is None:
            raise ConfigError("model.rank", "is required with data_path input")
    return int(raw.get("rank", 1))


# -------------------------------------------------------------------- commands


def _cmd_synth(config: RunConfig, outdir: Path) -> dict:
    spec = _reseed_synthetic(config.synthetic, config.seed)
    data, C_true, X_true = generate_synthetic(spec)
    n = spec.n
    write_matrix(outdir / "train.csv", data.values[:, :n], data.mask[:, :n])
    if spec.n_forecast > 0:
        write_matrix(outdir / "test.csv", data.values[:, n:], data.mask[:, n:])
    write_matrix(outdir / "c_true.csv", C_true)
    write_matrix(outdir / "x_true.csv", X_true)
    return {"d": spec.d, "r": spec.r, "n": spec.n,
            "n_forecast": spec.n_forecast,
            "observed_fraction": data.observed_fraction()}


def _cmd_fit(config: RunConfig, outdir: Path) -> dict:
    train, _, _ = _load_input(config)
    model = _build_model(config, _rank_hint(config))
    noise = _build_noise(config, model, train.d)
    result = _fit(config, train, model, noise)
    return _write_fit_artifacts(outdir, result, train)


def _cmd_forecast(config: RunConfig, outdir: Path) -> dict:
    train, test, _ = _load_input(config)
    if test is None:
        raise ConfigError("n_forecast", "forecast needs held-out columns")
    model = _build_model(config, _rank_hint(config))
    noise = _build_noise(config, model, train.d)
    result = _fit(config, train, model, noise)
    fitted = result.model
    Yhat, Yvar = forecast(result.state, fitted, test.n)
    write_matrix(outdir / "forecast.csv", Yhat)
    write_matrix(outdir / "forecast_var.csv", Yvar)
    summary = _write_fit_artifacts(outdir, result, train)
    obs = test.mask == 1
    summary["forecast_rmse"] = float(
        np.sqrt(np.mean((test.values[obs] - Yhat[obs]) ** 2)))
    return summary


def _cmd_impute(config: RunConfig, outdir: Path) -> dict:
    train, _, _ = _load_input(config)
    holdout = None
    if config.missing is not None:
        seg = int(config.missing["segment_len"])
        frac = float(config.missing["target_fraction"])
        seg_mask = generate_segment_mask(train.d, train.n, seg, frac,
                                         config.seed)
        holdout = (seg_mask == 0) & (train.mask == 1)
        train = DataMatrix(train.values, train.mask * seg_mask)
    model = _build_model(config, _rank_hint(config))
    noise = _build_noise(config, model, train.d)
    result = _fit(config, train, model, noise)
    run = result.last_run
    imputed = np.where(train.mask == 1, train.values, run.predictive_mean)
    write_matrix(outdir / "imputed.csv", imputed)
    header, rows = _trace_rows(run.entries)
    write_table(outdir / "trace.csv", header, rows)
    summary: dict = {"observed_fraction": train.observed_fraction(),
                     "theta_final": [float(t) for t in result.theta]}
    if holdout is not None and holdout.any():
        # the held-out truth is still present in train.values; the filter
        # only ignored it through the mask
        metrics = imputation_metrics(train.values, run.predictive_mean,
                                     run.predictive_var, holdout)
        summary.update({"rmse": metrics.rmse, "coverage": metrics.coverage,
                        "holdout_count": metrics.count})
    return summary


def _cmd_converge(config: RunConfig, outdir: Path) -> dict:
    result = convergence_experiment(config.seed)
    rows = [[k + 1, w] for k, w in enumerate(result.w2_running)]
    write_table(outdir / "w2_series.csv", ["k", "w2_running_mean"], rows)
    n = len(result.w2_running)
    return {"c_err_initial": result.c_err_initial,
            "c_err_final": result.c_err_final,
            "w2bar_100": float(result.w2_running[min(99, n - 1)]),
            "w2bar_final": float(result.w2_running[-1])}


def _cmd_gp_features(config: RunConfig, outdir: Path) -> dict:
    train, _, _ = _load_input(config)
    model = _build_model(config, _rank_hint(config))
    if model.kind != "gp_matern32":
        raise ConfigError("model.kind", "gp-features requires kind gp_matern32")
    noise = _build_noise(config, model, train.d)
    if config.robust:
        rstate = robust_initial_state(noise, config.lambda0)
        _, run = run_robust_filter(rstate, model, train)
    else:
        run = run_filter(initial_state(noise), model, train)
    write_matrix(outdir / "features.csv", run.coef_means)
    header, rows = _trace_rows(run.entries)
    write_table(outdir / "trace.csv", header, rows)
    return {"n": train.n, "rank": model.out_dim,
            "total_nll": run.total_nll}


_DISPATCH = {
    "synth": _cmd_synth,
    "fit": _cmd_fit,
    "impute": _cmd_impute,
    "forecast": _cmd_forecast,
    "converge": _cmd_converge,
    "gp-features": _cmd_gp_features,
}


def run_experiment(config: RunConfig) -> dict:
    """Execute one command; returns the summary dict written to summary.json."""
    outdir = Path(config.output_dir)
    outdir.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    summary = _DISPATCH[config.command](config, outdir)
    summary.update({
        "command": config.command,
        "seed": config.seed,
        "robust": config.robust,
        "runtime_seconds": time.perf_counter() - start,
    })
    write_json(outdir / "summary.json", summary)
    return summary


def _run_raw(raw: dict, seed: int | None, output: str | None) -> dict:
    if seed is not None:
        raw = dict(raw, seed=seed)
    if output is not None:
        raw = dict(raw, output_dir=output)
    return run_experiment(parse_config(raw))


def _sweep_worker(args) -> tuple[int, str | None]:
    raw, seed, outdir = args
    try:
        _run_raw(raw, seed, outdir)
        return seed, None
    except Exception as exc:  # noqa: BLE001 - reported per seed
        _write_error_summary(Path(outdir), raw.get("command", "?"), seed, exc)
        return seed, f"{type(exc).__name__}: {exc}"


def _write_error_summary(outdir: Path, command: str, seed, exc: Exception):
    try:
        outdir.mkdir(parents=True, exist_ok=True)
        write_json(outdir / "summary.json", {
            "command": command,
            "seed": seed,
            "error": {"type": type(exc).__name__, "message": str(exc)},
        })
    except OSError:
        pass


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="psmf",
        description="Sequential matrix-factorization experiments from a JSON config")
    parser.add_argument("--config", required=True, help="path to the JSON config")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--output", default=None,
                        help="override the config output directory")
    parser.add_argument("--sweep", type=int, default=None, metavar="N",
                        help="run N consecutive seeds in a worker pool")
    args = parser.parse_args(argv)

    try:
        with open(args.config) as fh:
            raw = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 2

    if args.sweep is not None and args.sweep > 1:
        base_seed = args.seed if args.seed is not None else int(raw.get("seed", 0))
        base_out = Path(args.output or raw.get("output_dir", "out"))
        jobs = [(raw, base_seed + i, str(base_out / f"seed_{base_seed + i}"))
                for i in range(args.sweep)]
        workers = min(len(jobs), _thread_cap())
        with multiprocessing.Pool(workers) as pool:
            results = pool.map(_sweep_worker, jobs)
        failures = [(s, err) for s, err in results if err is not None]
        write_json(base_out / "sweep.json", {
            "seeds": [s for s, _ in results],
            "failures": {str(s): err for s, err in failures},
        })
        for s, err in failures:
            print(f"seed {s}: {err}", file=sys.stderr)
        return 1 if failures else 0

    try:
        _run_raw(raw, args.seed, args.output)
        return 0
    except (ContractError, NumericalError, ParseError, OSError) as exc:
        outdir = Path(args.output or raw.get("output_dir", "out"))
        _write_error_summary(outdir, raw.get("command", "?"),
                             args.seed if args.seed is not None else raw.get("seed"),
                             exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1


def _thread_cap() -> int:
    cap = os.environ.get("PSMF_THREADS")
    if cap:
        try:
            return max(1, int(cap))
        except ValueError:
            pass
    return os.cpu_count() or 1


if __name__ == "__main__":
    sys.exit(main())
