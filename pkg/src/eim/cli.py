"""Command-line front end: dataset generation, fitting, evaluation, sweeps.

Configuration is flat INI (sections per module); every run directory gets the
resolved config snapshot, the seed, the init and final models, the trace CSV
and a metrics CSV, and reruns with identical inputs are bit-identical.
Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import configparser
import csv
import functools
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields as dc_fields, is_dataclass

import click
import numpy as np

from . import io as model_io
from .conditional import CondEimConfig, init_moe_from_data, run_eim_moe, run_ml_moe
from .gmm import (EimGmmConfig, GanConfig, init_gmm_from_data, run_eim_ablation,
                  run_eim_gmm, run_em_gmm, run_fgan_gmm)
from .metrics import mc_i_projection, task_metrics, test_log_likelihood
from .ratio import TrainConfig
from .tasks import (TaskSpec, feature_map_from_name, gen_obstacle_task,
                    gen_random_gmm_task, gen_robot_line_task)
from .validation import InputError, NumericalError

METHODS = ("eim", "em", "fgan", "eim-no-kl", "eim-joint", "eim-joint-no-kl",
           "eim-cond", "ml-cond")

# (type, default) per key; booleans are "true"/"false", int lists comma separated
SCHEMA = {
    "run": {"method": (str, "eim"), "components": (int, 5), "seed": (int, 0),
            "iterations": (int, 100), "use_features": (bool, False)},
    "ratio": {"learning_rate": (float, 1e-3), "batch_size": (int, 1000),
              "max_epochs": (int, 200), "l2": (float, 1e-3),
              "validation_fraction": (float, 0.2), "patience": (int, 10),
              "hidden_sizes": (str, "50,50,50"), "activation": (str, "relu")},
    "eim": {"epsilon": (float, 0.05), "weight_epsilon": (float, 0.05),
            "samples_per_component": (int, 1000),
            "resample_coefficients": (bool, False), "joint_steps": (int, 10),
            "joint_learning_rate": (float, 1e-3), "eval_samples": (int, 2000)},
    "em": {"covariance_floor": (float, 1e-6)},
    "fgan": {"generator_learning_rate": (float, 1e-3),
             "discriminator_learning_rate": (float, 1e-3),
             "batch_size": (int, 1000), "steps_per_alternation": (int, 1)},
    "conditional": {"learning_rate": (float, 1e-3), "beta1": (float, 0.5),
                    "epochs_per_iteration": (int, 10),
                    "contexts_per_batch": (int, 256),
                    "samples_per_context": (int, 4),
                    "hidden_sizes": (str, "64,64"),
                    "init_sigma_scale": (float, 0.5),
                    "update_gating_first": (bool, True)},
    "sweep": {"task": (str, "random-gmm"), "dims": (str, "2,6,10"),
              "components": (int, 5), "seeds": (str, "0,1,2,3,4"),
              "methods": (str, "eim,fgan"), "iterations": (int, 200),
              "train_samples": (int, 10000), "test_samples": (int, 5000),
              "validation_samples": (int, 5000), "eval_n": (int, 10000),
              "out": (str, "sweep_out")},
}


class ConfigError(InputError):
    pass


def load_config(path=None, overrides=None) -> dict:
    """Defaults, overlaid by the INI file, overlaid by CLI overrides."""
    cfg = {sec: {k: d for k, (_, d) in keys.items()} for sec, keys in SCHEMA.items()}
    if path:
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise ConfigError(f"config file {path!r} not found or unreadable")
        for sec in parser.sections():
            if sec not in SCHEMA:
                raise ConfigError(f"unknown config section [{sec}]; "
                                  f"valid: {sorted(SCHEMA)}")
            for key, raw in parser.items(sec):
                if key not in SCHEMA[sec]:
                    raise ConfigError(f"unknown key {key!r} in [{sec}]; valid keys: "
                                      f"{sorted(SCHEMA[sec])}")
                typ = SCHEMA[sec][key][0]
                try:
                    if typ is bool:
                        if raw.lower() not in ("true", "false"):
                            raise ValueError(raw)
                        cfg[sec][key] = raw.lower() == "true"
                    else:
                        cfg[sec][key] = typ(raw)
                except ValueError as exc:
                    raise ConfigError(f"[{sec}] {key}={raw!r} is not a valid "
                                      f"{typ.__name__}") from exc
    for (sec, key), value in (overrides or {}).items():
        if value is not None:
            cfg[sec][key] = value
    return cfg


def write_config(cfg: dict, path):
    parser = configparser.ConfigParser()
    for sec in sorted(cfg):
        parser[sec] = {}
        for key in sorted(cfg[sec]):
            v = cfg[sec][key]
            parser[sec][key] = (str(v).lower() if isinstance(v, bool)
                                else format(v, ".17g") if isinstance(v, float)
                                else str(v))
    with open(path, "w") as fh:
        parser.write(fh)


def config_hash(cfg: dict) -> str:
    text = json.dumps(cfg, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def _ints(csv_text):
    return [int(tok) for tok in str(csv_text).split(",") if tok.strip() != ""]


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([format(v, ".17g") if isinstance(v, float) else v
                             for v in row])


def _read_csv_matrix(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return data


def save_dataset(task: TaskSpec, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    def dump(name, arr):
        header = [f"x{i}" for i in range(arr.shape[1])]
        _write_csv(os.path.join(out_dir, name), header, arr.tolist())
    dump("train.csv", task.train)
    dump("test.csv", task.test)
    dump("validation.csv", task.validation)
    if task.context_dim:
        for split in ("train", "test", "validation"):
            ctx = getattr(task, f"{split}_contexts")
            header = [f"y{i}" for i in range(ctx.shape[1])]
            _write_csv(os.path.join(out_dir, f"{split}_contexts.csv"), header,
                       ctx.tolist())
    if task.target is not None:
        model_io.save_model(task.target, os.path.join(out_dir, "target_model.json"))
    meta = {"name": task.name, "dim": task.dim, "context_dim": task.context_dim,
            "seed": task.seed, "metric": task.metric,
            "feature_map": None if task.feature_map is None else task.feature_map.name,
            "constants": task.constants}
    with open(os.path.join(out_dir, "meta.json"), "w") as fh:
        fh.write(model_io.dumps(meta))


def load_dataset(task_dir) -> TaskSpec:
    meta_path = os.path.join(task_dir, "meta.json")
    if not os.path.exists(meta_path):
        raise ConfigError(f"{task_dir!r} does not contain meta.json")
    with open(meta_path) as fh:
        meta = json.load(fh)
    parts = {}
    for split in ("train", "test", "validation"):
        parts[split] = _read_csv_matrix(os.path.join(task_dir, f"{split}.csv"))
        ctx_path = os.path.join(task_dir, f"{split}_contexts.csv")
        parts[f"{split}_contexts"] = (_read_csv_matrix(ctx_path)
                                      if os.path.exists(ctx_path) else None)
    target_path = os.path.join(task_dir, "target_model.json")
    target = model_io.load_model(target_path) if os.path.exists(target_path) else None
    fmap = (feature_map_from_name(meta["feature_map"])
            if meta.get("feature_map") else None)
    test_ctx_set = None
    if parts["test_contexts"] is not None:
        _, first = np.unique(parts["test_contexts"], axis=0, return_index=True)
        test_ctx_set = parts["test_contexts"][np.sort(first)]
    return TaskSpec(name=meta["name"], dim=meta["dim"],
                    context_dim=meta.get("context_dim", 0),
                    train=parts["train"], test=parts["test"],
                    validation=parts["validation"],
                    train_contexts=parts["train_contexts"],
                    test_contexts=parts["test_contexts"],
                    validation_contexts=parts["validation_contexts"],
                    test_context_set=test_ctx_set, seed=meta["seed"],
                    target=target, feature_map=fmap, metric=meta.get("metric"),
                    constants=meta.get("constants", {}))


def trace_to_rows(records):
    """Long-format (iteration, metric, value) rows; wall clock excluded."""
    rows = []
    for rec in records:
        if is_dataclass(rec):
            items = [(f.name, getattr(rec, f.name)) for f in dc_fields(rec)
                     if f.name not in ("iteration", *getattr(rec, "CSV_EXCLUDE", ()))]
            iteration = rec.iteration
        else:
            iteration = rec.get("iteration", 0)
            items = [(k, v) for k, v in rec.items()
                     if k not in ("iteration", "wall_clock")]
        for name, value in items:
            arr = np.asarray(value)
            if arr.ndim == 0:
                rows.append((iteration, name, float(arr)))
            else:
                rows.extend((iteration, f"{name}_{i}", float(v))
                            for i, v in enumerate(arr.reshape(-1)))
    return rows


def write_trace(records, path):
    _write_csv(path, ["iteration", "metric", "value"], trace_to_rows(records))


def _train_config(cfg) -> TrainConfig:
    r = cfg["ratio"]
    return TrainConfig(learning_rate=r["learning_rate"], batch_size=r["batch_size"],
                       max_epochs=r["max_epochs"], l2=r["l2"],
                       validation_fraction=r["validation_fraction"],
                       patience=r["patience"],
                       hidden_sizes=tuple(_ints(r["hidden_sizes"])),
                       activation=r["activation"])


def run_fit(cfg: dict, task: TaskSpec, out_dir):
    """Dispatch one fit; writes config snapshot, models and trace under out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    method = cfg["run"]["method"]
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; valid: {METHODS}")
    seed = cfg["run"]["seed"]
    k = cfg["run"]["components"]
    iterations = cfg["run"]["iterations"]
    feature_map = task.feature_map if cfg["run"]["use_features"] else None
    target_logpdf = task.target_log_density()
    write_config(cfg, os.path.join(out_dir, "config.ini"))

    if method in ("eim-cond", "ml-cond"):
        if task.train_contexts is None:
            raise ConfigError(f"method {method} needs a conditional task")
        c = cfg["conditional"]
        cond_cfg = CondEimConfig(
            iterations=max(iterations, 1), learning_rate=c["learning_rate"],
            beta1=c["beta1"], epochs_per_iteration=c["epochs_per_iteration"],
            contexts_per_batch=c["contexts_per_batch"],
            samples_per_context=c["samples_per_context"],
            update_gating_first=c["update_gating_first"],
            train=_train_config(cfg), feature_map=feature_map, seed=seed)
        init = init_moe_from_data(task.train_contexts, task.train, k,
                                  hidden_sizes=tuple(_ints(c["hidden_sizes"])),
                                  seed=seed, init_sigma_scale=c["init_sigma_scale"])
        model_io.save_model(init, os.path.join(out_dir, "init_model.json"))
        if iterations == 0:
            model, records = init, []
        elif method == "eim-cond":
            model, records = run_eim_moe(task.train_contexts, task.train, init, cond_cfg)
        else:
            model, records = run_ml_moe(task.train_contexts, task.train, init, cond_cfg)
    else:
        init = init_gmm_from_data(task.train, k, seed)
        model_io.save_model(init, os.path.join(out_dir, "init_model.json"))
        if method == "em":
            model, trace = run_em_gmm(task.train, init, iterations,
                                      cfg["em"]["covariance_floor"], seed)
            records = [{"iteration": i, "train_log_likelihood": ll}
                       for i, ll in enumerate(trace["log_likelihood"])]
        elif method == "fgan":
            f = cfg["fgan"]
            gan_cfg = GanConfig(
                generator_learning_rate=f["generator_learning_rate"],
                discriminator_learning_rate=f["discriminator_learning_rate"],
                steps_per_alternation=f["steps_per_alternation"],
                batch_size=f["batch_size"], iterations=iterations, seed=seed,
                hidden_sizes=tuple(_ints(cfg["ratio"]["hidden_sizes"])),
                l2=cfg["ratio"]["l2"], eval_samples=cfg["eim"]["eval_samples"])
            model, trace = run_fgan_gmm(task.train, init, gan_cfg, target_logpdf)
            records = trace["records"]
        else:
            e = cfg["eim"]
            eim_cfg = EimGmmConfig(
                iterations=iterations,
                samples_per_component=e["samples_per_component"],
                component_epsilon=e["epsilon"], weight_epsilon=e["weight_epsilon"],
                train=_train_config(cfg), seed=seed, feature_map=feature_map,
                resample_coefficients=e["resample_coefficients"],
                joint_steps=e["joint_steps"],
                joint_learning_rate=e["joint_learning_rate"],
                eval_samples=e["eval_samples"])
            variant = {"eim": None, "eim-no-kl": "no_kl", "eim-joint": "joint",
                       "eim-joint-no-kl": "joint_no_kl"}[method]
            if variant is None:
                model, records = run_eim_gmm(task.train, init, eim_cfg, target_logpdf)
            else:
                model, records = run_eim_ablation(task.train, init, eim_cfg, variant,
                                                  target_logpdf)
    model_io.save_model(model, os.path.join(out_dir, "model.json"))
    write_trace(records, os.path.join(out_dir, "trace.csv"))
    return model, records


def run_eval(model, task: TaskSpec, metrics, n, seed, label, out_path=None):
    chash = ""
    rows = []
    for metric in metrics:
        if metric == "i_projection":
            if task.target is None:
                raise ConfigError("task has no analytic target for the I-projection")
            est = mc_i_projection(model, task.target_log_density(), n, seed,
                                  contexts=task.test_context_set
                                  if task.context_dim else None)
            rows.append((label, task.name, seed, "i_projection", est.value,
                         est.stderr, est.n))
        elif metric == "log_likelihood":
            value = test_log_likelihood(model, task.test,
                                        task.test_contexts if task.context_dim else None)
            rows.append((label, task.name, seed, "log_likelihood", value, 0.0, len(task.test)))
        elif metric in ("line_rmse", "success_rate"):
            out = task_metrics(model, task, n, seed, chash)
            for key, value in out.items():
                if key in ("n", "seed", "config_hash"):
                    continue
                rows.append((label, task.name, seed, key, value, 0.0, n))
        else:
            raise ConfigError(f"unsupported metric {metric!r}; valid: i_projection, "
                              "log_likelihood, line_rmse, success_rate")
    if out_path:
        _write_csv(out_path, ["method", "task", "seed", "metric", "value",
                              "stderr", "n"], rows)
    return rows


def _exit_codes(fn):
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except (ConfigError, InputError, FileNotFoundError) as exc:
            click.echo(f"config error: {exc}", err=True)
            sys.exit(2)
        except NumericalError as exc:
            click.echo(f"numerical failure: {exc}", err=True)
            sys.exit(3)
    return wrapper


@click.group()
def main():
    """Fit and evaluate mixture models by I-projection and baselines."""


@main.command("gen-data")
@click.option("--task", "task_name", required=True,
              type=click.Choice(["random-gmm", "robot-line", "obstacle"]))
@click.option("--dim", type=int, default=10)
@click.option("--components", type=int, default=5)
@click.option("--train-n", type=int, default=10000)
@click.option("--test-n", type=int, default=5000)
@click.option("--validation-n", type=int, default=5000)
@click.option("--contexts", type=int, default=200)
@click.option("--samples-per-context", type=int, default=10)
@click.option("--seed", type=int, default=0)
@click.option("--out", required=True)
@_exit_codes
def cmd_gen_data(task_name, dim, components, train_n, test_n, validation_n,
                 contexts, samples_per_context, seed, out):
    """Generate a dataset directory for one synthetic task."""
    if task_name == "random-gmm":
        task = gen_random_gmm_task(dim, components, seed, train_n, test_n, validation_n)
    elif task_name == "robot-line":
        task = gen_robot_line_task(train_n, seed, test_n, validation_n)
    else:
        task = gen_obstacle_task(contexts, samples_per_context, seed,
                                 test_contexts=max(1, contexts // 2),
                                 validation_contexts=max(1, contexts // 2))
    save_dataset(task, out)
    click.echo(f"wrote {task.name} dataset to {out}")


@main.command("fit")
@click.option("--method", type=click.Choice(METHODS), default=None)
@click.option("--task", "task_dir", required=True)
@click.option("--components", type=int, default=None)
@click.option("--config", "config_path", default=None)
@click.option("--iterations", type=int, default=None)
@click.option("--seed", type=int, default=None)
@click.option("--use-features/--no-features", default=None)
@click.option("--resample-coeff", "resample", flag_value=True, default=None)
@click.option("--out", required=True)
@_exit_codes
def cmd_fit(method, task_dir, components, config_path, iterations, seed,
            use_features, resample, out):
    """Fit one model to a dataset directory."""
    overrides = {("run", "method"): method, ("run", "components"): components,
                 ("run", "iterations"): iterations, ("run", "seed"): seed,
                 ("run", "use_features"): use_features,
                 ("eim", "resample_coefficients"): resample}
    cfg = load_config(config_path, overrides)
    task = load_dataset(task_dir)
    run_fit(cfg, task, out)
    click.echo(f"fit {cfg['run']['method']} written to {out}")


@main.command("eval")
@click.option("--model", "model_path", required=True)
@click.option("--task", "task_dir", required=True)
@click.option("--metrics", default="i_projection")
@click.option("--n", type=int, default=10000)
@click.option("--seed", type=int, default=0)
@click.option("--label", default=None)
@click.option("--out", default=None)
@_exit_codes
def cmd_eval(model_path, task_dir, metrics, n, seed, label, out):
    """Evaluate a saved model on a dataset directory."""
    if not os.path.exists(model_path):
        raise ConfigError(f"model file {model_path!r} not found")
    model = model_io.load_model(model_path)
    task = load_dataset(task_dir)
    label = label or os.path.splitext(os.path.basename(model_path))[0]
    rows = run_eval(model, task, [m.strip() for m in metrics.split(",")], n, seed,
                    label, out)
    for row in rows:
        click.echo(",".join(str(v) for v in row))


def _sweep_job(args):
    """One (dim, method, seed) cell; returns aggregate rows. Must stay picklable."""
    cfg, dim, method, seed, out_dir = args
    task = gen_random_gmm_task(dim, cfg["sweep"]["components"], seed,
                               cfg["sweep"]["train_samples"],
                               cfg["sweep"]["test_samples"],
                               cfg["sweep"]["validation_samples"])
    job_cfg = {sec: dict(keys) for sec, keys in cfg.items()}
    job_cfg["run"]["method"] = method
    job_cfg["run"]["seed"] = seed
    job_cfg["run"]["components"] = cfg["sweep"]["components"]
    job_cfg["run"]["iterations"] = cfg["sweep"]["iterations"]
    job_dir = os.path.join(out_dir, f"dim{dim}_seed{seed}_{method}")
    model, _ = run_fit(job_cfg, task, job_dir)
    est = mc_i_projection(model, task.target_log_density(), cfg["sweep"]["eval_n"],
                          seed)
    _write_csv(os.path.join(job_dir, "metrics.csv"),
               ["method", "task", "seed", "metric", "value", "stderr", "n"],
               [(method, f"random-gmm-d{dim}", seed, "i_projection", est.value,
                 est.stderr, est.n)])
    return [(method, dim, cfg["sweep"]["components"], seed, "i_projection",
             est.value, est.stderr, est.n)]


@main.command("sweep")
@click.option("--config", "config_path", required=True)
@click.option("--jobs", type=int, default=1)
@_exit_codes
def cmd_sweep(config_path, jobs):
    """Run the (dims x methods x seeds) grid from a sweep config."""
    cfg = load_config(config_path)
    sweep = cfg["sweep"]
    out_dir = sweep["out"]
    os.makedirs(out_dir, exist_ok=True)
    write_config(cfg, os.path.join(out_dir, "config.ini"))
    methods = [m.strip() for m in sweep["methods"].split(",")]
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"unknown sweep method {m!r}")
    job_args = [(cfg, dim, method, seed, out_dir)
                for dim in _ints(sweep["dims"])
                for method in methods
                for seed in _ints(sweep["seeds"])]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_job, job_args))
    else:
        results = [_sweep_job(a) for a in job_args]
    rows = [row for chunk in results for row in chunk]
    rows.sort(key=lambda r: (r[0], r[1], r[3], r[4]))
    _write_csv(os.path.join(out_dir, "aggregate.csv"),
               ["method", "dim", "components", "seed", "metric", "value",
                "stderr", "n"], rows)
    click.echo(f"sweep wrote {len(rows)} rows to {out_dir}/aggregate.csv")


if __name__ == "__main__":
    main()
