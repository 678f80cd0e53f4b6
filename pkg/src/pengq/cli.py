"""Command-line entry point: ``pengq {run,verify,solve,sample}``.

Configuration files are JSON; the schema is described in the README.
"""
import argparse
import copy
import csv
import hashlib
import io
import itertools
import json
import os
import platform
import shutil
import sys
import tempfile
import time
from concurrent.futures import ProcessPoolExecutor

import numpy as np

from . import __version__, diagnostics, envs, estimators, operators, schedules, verify
from .mdp import (
    TabularMdp,
    bellman,
    bellman_opt,
    deterministic_policy,
    greedy,
    optimal_q,
    policy_q,
    uniform_policy,
)

SCHEDULES = (
    "pql_fixed_behavior",
    "lambda_pi",
    "pql_behavior_updates",
    "double_loop_pql",
    "hql_iterate",
    "tabular_learner",
)
METRICS = ("sup_dist", "regret_sup", "regret_init", "value_init", "return_undiscounted")


class ConfigError(ValueError):
    """Invalid experiment configuration."""


def config_hash(config):
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def load_config(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc


def _section(config, key, required=True):
    value = config.get(key)
    if value is None:
        if required:
            raise ConfigError(f"config is missing the '{key}' section")
        return {}
    if not isinstance(value, dict):
        raise ConfigError(f"config section '{key}' must be an object")
    return value


def _substitute_seed(params, seed):
    return {k: (seed if v == "$seed" else v) for k, v in params.items()}


def build_environment(spec, seed=0):
    if isinstance(spec, str):
        spec = {"name": spec}
    if "mdp" in spec:
        return TabularMdp.from_dict(spec["mdp"])
    try:
        return envs.make_env(spec["name"], **_substitute_seed(spec.get("params", {}), seed))
    except KeyError:
        raise ConfigError("environment spec needs a 'name'") from None
    except TypeError as exc:
        raise ConfigError(f"bad environment parameters: {exc}") from exc


def build_policy(spec, mdp, q=None):
    """Policy from a config spec: uniform, constant row, full matrix, actions or greedy."""
    if spec is None:
        return None
    if isinstance(spec, str):
        spec = {"kind": spec}
    kind = spec.get("kind")
    if kind == "uniform":
        return uniform_policy(*mdp.shape)
    if kind == "constant":
        row = np.asarray(spec["probs"], dtype=float)
        return np.tile(row, (mdp.n_states, 1))
    if kind == "matrix":
        return np.asarray(spec["probs"], dtype=float)
    if kind == "actions":
        return deterministic_policy(spec["actions"], mdp.n_actions)
    if kind == "greedy":
        if q is None:
            raise ConfigError("a greedy policy spec needs a Q-function")
        return greedy(q)
    raise ConfigError(f"unknown policy kind {kind!r}")


def build_q0(spec, mdp, gamma):
    if spec is None:
        return None
    if isinstance(spec, list):
        return np.asarray(spec, dtype=float)
    if spec.get("kind") == "zeros":
        return np.zeros(mdp.shape)
    if spec.get("kind") == "oscillation":
        return envs.oscillation_initial_q(gamma, spec.get("delta"))
    raise ConfigError(f"unknown q0 spec {spec!r}")


def build_target(spec):
    if spec is None:
        raise ConfigError("tabular_learner needs a 'target'")
    if spec.get("kind") == "nstep":
        return schedules.NStepTarget(int(spec["n"]))
    if spec.get("kind") == "one_step":
        return operators.TraceConfig("retrace", lam=0.0)
    return operators.TraceConfig.from_dict(spec)


def _delta_schedule(spec):
    if isinstance(spec, list):
        return spec
    if isinstance(spec, dict) and spec.get("kind") == "geometric":
        base, scale = float(spec.get("base", 0.5)), float(spec.get("scale", 1.0))
        return lambda k: scale * base**k
    raise ConfigError("delta schedule must be a list or {'kind': 'geometric', 'base': b}")


def run_schedule(config, seed):
    """Run one (grid point, seed) pair and return its IterationReport."""
    env_spec = _section(config, "environment")
    algo = _section(config, "algorithm")
    run = _section(config, "run", required=False)
    mdp = build_environment(env_spec, seed)
    name = algo.get("schedule")
    if name not in SCHEDULES:
        raise ConfigError(f"unknown schedule {name!r}; choose from {SCHEDULES}")
    params = dict(algo.get("params", {}))
    noise_spec = dict(run.get("noise", {}))
    noise_spec.setdefault("seed", seed)
    noise = schedules.NoiseSpec(**noise_spec)
    q0 = build_q0(algo.get("q0"), mdp, mdp.discount)
    behavior = build_policy(algo.get("behavior"), mdp)
    K = int(run.get("K", params.pop("K", 100)))
    lam = float(params.pop("lambda", params.pop("lam", 0.5)))

    if name == "pql_fixed_behavior":
        mu = behavior if behavior is not None else uniform_policy(*mdp.shape)
        return schedules.pql_fixed_behavior(mdp, mu, lam, q0=q0, K=K, noise=noise)
    if name == "lambda_pi":
        return schedules.lambda_pi(mdp, lam, q0=q0, K=K, noise=noise)
    if name == "pql_behavior_updates":
        return schedules.pql_behavior_updates(
            mdp,
            lam,
            float(params.pop("alpha")),
            mu_init=behavior,
            q0=q0,
            K=K,
            noise=noise,
            allow_unsupported_alpha=bool(params.pop("allow_unsupported_alpha", False)),
        )
    if name == "double_loop_pql":
        return schedules.double_loop_pql(
            mdp,
            lam,
            _delta_schedule(params.pop("delta", {"kind": "geometric", "base": 0.5})),
            q0=q0,
            K=K,
            inner_tol=float(params.pop("inner_tol", 1e-12)),
            noise=noise,
        )
    if name == "hql_iterate":
        return schedules.hql_iterate(
            mdp, lam, q0=q0, K=K, behavior_mode=params.pop("behavior_mode", "fixed"), mu=behavior
        )
    horizon = params.pop("horizon", None)
    if horizon is None and env_spec.get("name") == "tree":
        horizon = int(env_spec.get("params", {})["depth"])
    mu = behavior if behavior is not None else uniform_policy(*mdp.shape)
    return schedules.tabular_learner(
        mdp,
        build_target(algo.get("target")),
        mu,
        lr=float(params.pop("lr", 0.1)),
        iterations=int(run.get("iterations", params.pop("iterations", 1000))),
        episodes_per_iter=int(params.pop("episodes_per_iter", 1)),
        horizon=horizon,
        seed=seed,
        q0=q0,
        record_every=run.get("record_every"),
    )


def _set_dotted(config, path, value):
    keys = path.split(".")
    node = config
    for key in keys[:-1]:
        node = node.setdefault(key, {})
        if not isinstance(node, dict):
            raise ConfigError(f"grid path {path!r} crosses a non-object")
    node[keys[-1]] = value


def expand_grid(config):
    """List of ``(point_params, point_config)`` for the Cartesian product in ``config["grid"]``."""
    grid = config.get("grid") or {}
    if not isinstance(grid, dict) or any(not isinstance(v, list) or not v for v in grid.values()):
        raise ConfigError("'grid' must map dotted paths to non-empty lists")
    keys = sorted(grid)
    points = []
    for values in itertools.product(*(grid[k] for k in keys)):
        cfg = copy.deepcopy(config)
        cfg.pop("grid", None)
        for key, value in zip(keys, values):
            _set_dotted(cfg, key, value)
        points.append((dict(zip(keys, values)), cfg))
    return points


def _run_job(job):
    """Worker body: run one (point, seed) and write its report file."""
    point_id, cfg, seed, path, fmt = job
    report = run_schedule(cfg, seed)
    if fmt == "json":
        report.to_json(path)
    else:
        report.to_csv(path)
    return point_id, seed, report.steps, {m: getattr(report, m) for m in METRICS}


def _fmt(value):
    return repr(float(value)) if isinstance(value, (float, np.floating)) else str(value)


def _mean_stderr(values):
    arr = np.asarray(values, dtype=float)
    mean = float(np.mean(arr, axis=0)) if arr.ndim == 1 else np.mean(arr, axis=0)
    if arr.shape[0] < 2:
        return mean, float("nan")
    return mean, float(np.std(arr, ddof=1) / np.sqrt(arr.shape[0]))


def write_aggregates(outdir, points, results):
    """``aggregate.csv`` (per point and k) and ``final.csv`` (per point, last record)."""
    grid_keys = sorted(points[0][1]) if points else []
    agg_path = os.path.join(outdir, "aggregate.csv")
    fin_path = os.path.join(outdir, "final.csv")
    metric_cols = [f"{m}_{s}" for m in METRICS for s in ("mean", "stderr")]
    with open(agg_path, "w", newline="") as agg, open(fin_path, "w", newline="") as fin:
        wa = csv.writer(agg, lineterminator="\n")
        wf = csv.writer(fin, lineterminator="\n")
        wa.writerow(["point", *grid_keys, "k", "n_seeds", *metric_cols])
        wf.writerow(["point", *grid_keys, "k", "n_seeds", *metric_cols])
        for point_id, params in points:
            per_seed = [results[key] for key in sorted(results) if key[0] == point_id]
            steps = per_seed[0][0]
            last = None
            for i, k in enumerate(steps):
                cells = []
                for m in METRICS:
                    mean, se = _mean_stderr([run[1][m][i] for run in per_seed])
                    cells += [_fmt(mean), _fmt(se)]
                row = [point_id, *(_fmt(params[g]) for g in grid_keys), k, len(per_seed), *cells]
                wa.writerow(row)
                last = row
            wf.writerow(last)
    return [agg_path, fin_path]


def command_run(args):
    config = load_config(args.config)
    run = _section(config, "run", required=False)
    seeds = [args.seed] if args.seed is not None else list(run.get("seeds", [0]))
    if not seeds or any(int(s) != s for s in seeds):
        raise ConfigError("run.seeds must be a non-empty list of integers")
    fmt = args.format or (config.get("output", {}) or {}).get("format", "csv")
    if fmt not in ("csv", "json"):
        raise ConfigError(f"unknown format {fmt!r}")
    points = [(f"p{i:03d}", params, cfg) for i, (params, cfg) in enumerate(expand_grid(config))]
    # validate every point before any work is scheduled
    for _, _, cfg in points:
        algo = _section(cfg, "algorithm")
        if algo.get("schedule") not in SCHEDULES:
            raise ConfigError(f"unknown schedule {algo.get('schedule')!r}; choose from {SCHEDULES}")
        build_environment(_section(cfg, "environment"), seeds[0])

    created_out = not os.path.exists(args.out)
    os.makedirs(args.out, exist_ok=True)
    staging = tempfile.mkdtemp(prefix=".staging-", dir=args.out)
    start = time.time()
    try:
        os.makedirs(os.path.join(staging, "runs"))
        jobs = []
        for point_id, _, cfg in points:
            for seed in seeds:
                name = f"{point_id}_seed{int(seed)}.{fmt}"
                jobs.append((point_id, cfg, int(seed), os.path.join(staging, "runs", name), fmt))
        if args.workers > 1:
            with ProcessPoolExecutor(max_workers=args.workers) as pool:
                outputs = list(pool.map(_run_job, jobs))
        else:
            outputs = [_run_job(job) for job in jobs]
        results = {(pid, seed): (steps, metrics) for pid, seed, steps, metrics in outputs}
        write_aggregates(staging, [(pid, params) for pid, params, _ in points], results)
        files = sorted(
            os.path.relpath(os.path.join(root, f), staging)
            for root, _, names in os.walk(staging)
            for f in names
        )
        for entry in os.listdir(staging):
            target = os.path.join(args.out, entry)
            if os.path.isdir(target):
                shutil.rmtree(target)
            os.replace(os.path.join(staging, entry), target)
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        if created_out:
            shutil.rmtree(args.out, ignore_errors=True)
        raise
    shutil.rmtree(staging, ignore_errors=True)
    manifest = {
        "config": config,
        "config_hash": config_hash(config),
        "seeds": seeds,
        "points": {pid: params for pid, params, _ in points},
        "format": fmt,
        "files": files,
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "wall_time_s": time.time() - start,
    }
    with open(os.path.join(args.out, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    print(f"wrote {len(files)} files to {args.out}")
    return 0


def command_verify(args):
    names = args.suite or ["all"]
    if "all" in names:
        names = list(verify.SUITES)
    unknown = [n for n in names if n not in verify.SUITES]
    if unknown:
        raise ConfigError(f"unknown suites {unknown}; choose from {sorted(verify.SUITES)}")
    claims = []
    for name in names:
        claims += verify.SUITES[name]()
    records = [c.to_dict() for c in claims]
    if args.format == "csv":
        buf = io.StringIO()
        writer = csv.DictWriter(buf, fieldnames=list(records[0]), lineterminator="\n")
        writer.writeheader()
        writer.writerows(records)
        text = buf.getvalue()
    else:
        text = json.dumps({"claims": records, "passed": all(c.passed for c in claims)}, indent=2)
    _emit(text, args.out, f"verify.{args.format or 'json'}")
    failed = [c for c in claims if not c.passed]
    for c in failed:
        print(f"FAIL {c.suite}: {c.name} (measured {c.measured:.6g}, bound {c.bound:.6g})", file=sys.stderr)
    return 1 if failed else 0


def _emit(text, out, filename):
    if out:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, filename), "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text if text.endswith("\n") else text + "\n")


def _load_mdp(spec):
    if isinstance(spec, str):
        return TabularMdp.from_json(spec)
    if isinstance(spec, dict) and "transition" in spec:
        return TabularMdp.from_dict(spec)
    if isinstance(spec, dict):
        return build_environment(spec)
    raise ConfigError("'mdp' must be a path, an MDP document or an environment spec")


def solve(config):
    """One-shot operator application; returns a JSON-ready dict."""
    mdp = _load_mdp(config.get("mdp"))
    op = dict(config.get("operator") or {})
    name = op.pop("name", None)
    q = np.zeros(mdp.shape) if config.get("q") is None else np.asarray(config["q"], dtype=float)
    mu = build_policy(config.get("behavior", "uniform"), mdp, q)
    pi = build_policy(config.get("target", "greedy"), mdp, q)
    lam = float(op.get("lambda", 0.5))
    n = int(op.get("n", 1))
    extra = {}
    if name == "bellman":
        out = bellman(mdp, pi, q)
    elif name == "bellman_opt":
        out = bellman_opt(mdp, q)
    elif name == "n_step":
        out = operators.n_step_op(mdp, pi, n, q)
    elif name == "lambda_return":
        out = operators.lambda_return_op(mdp, pi, lam, q)
    elif name == "uncorrected_n_step":
        out = operators.uncorrected_n_step_op(mdp, mu, pi, n, q)
    elif name == "pql":
        out = operators.pql_op(mdp, mu, pi, lam, q)
    elif name == "general_retrace":
        trace = operators.TraceConfig.from_dict(op["trace"])
        res = operators.general_retrace_op(mdp, trace, mu, q, target=None if config.get("target") in (None, "greedy") else pi)
        out = res.q
        extra = {"c": res.c.tolist(), "target_policy": res.target.tolist()}
        if config.get("report_conservative", True):
            rep = operators.validate_conservative(res.c, mu, res.target)
            extra["conservative"] = rep.is_conservative
            extra["violations"] = rep.violations
    elif name == "policy_q":
        out = policy_q(mdp, pi)
    elif name == "optimal_q":
        out = optimal_q(mdp)
    elif name == "fixed_point":
        fp = diagnostics.fixed_point(mdp, mu, lam, tol=float(op.get("tol", 1e-10)))
        out = fp.q_fix
        extra = {"residual": fp.residual, "iterations": fp.iterations_used}
    else:
        raise ConfigError(f"unknown operator {name!r}")
    return {"operator": name, "q": out.tolist(), "greedy_actions": np.argmax(out, axis=1).tolist(), **extra}


def command_solve(args):
    result = solve(load_config(args.config))
    _emit(json.dumps(result, indent=2), args.out, "solve.json")
    return 0


def command_sample(args):
    config = load_config(args.config)
    seed = args.seed if args.seed is not None else int(config.get("seed", 0))
    mdp = build_environment(_section(config, "environment"), seed)
    mu = build_policy(config.get("behavior", "uniform"), mdp)
    h = int(config.get("horizon", 10))
    n = int(config.get("n_trajectories", 1))
    start = config.get("start")
    batch = estimators.sample_batch(mdp, mu, h, n, seed=seed, start=start)
    lines = "".join(json.dumps(batch.trajectory(i).to_record()) + "\n" for i in range(n))
    _emit(lines, args.out, "trajectories.jsonl")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(prog="pengq", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"pengq {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment config over seeds and grid points")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, help="run a single seed instead of run.seeds")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--format", choices=("csv", "json"))
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=command_run)

    p = sub.add_parser("verify", help="run verification suites")
    p.add_argument("--suite", action="append", help=f"one of {sorted(verify.SUITES)} or 'all' (repeatable)")
    p.add_argument("--out", help="directory for the report (default: stdout)")
    p.add_argument("--format", choices=("csv", "json"), default="json")
    p.set_defaults(func=command_verify)

    p = sub.add_parser("solve", help="apply one operator to a serialized MDP")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.set_defaults(func=command_solve)

    p = sub.add_parser("sample", help="dump behaviour trajectories as JSON lines")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=command_sample)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ValueError, KeyError, TypeError) as exc:
        print(f"pengq {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
