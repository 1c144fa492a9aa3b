"""Run experiments end to end and write machine-readable artifacts.

One run produces a fresh directory containing the fully resolved config
echo, a deterministic result file (no timings, so reruns are checksum
identical), solver traces, trajectory/observation CSVs, and a plain-text
rendering of the learned equations.  Sweeps fan runs out over a worker
pool and write an aggregate CSV.
"""

import copy
import json
import os
import time
import traceback
from concurrent.futures import ProcessPoolExecutor

import numpy as np
import yaml

from . import __version__
from .config import ExperimentConfig, parse_config
from .driver import HyperFit, FitResult, fit, fit_hyperparameters, forward_simulate
from .errors import RKHSIDError
from .kernel import KernelSpec
from .library import generate
from .metrics import MetricReport, UndefinedMetricError, coeff_error, state_error, support_stats
from .simulate import integrate, make_system, sample_observations
from .trajectory import build_eval_operator

__all__ = ["run_experiment", "run_sweep", "simulate_only", "next_run_dir"]

PRNG_ID = "numpy PCG64 via SeedSequence(seed).spawn([system, noise, fit])"


def _spawned_rngs(seed: int):
    children = np.random.SeedSequence(seed).spawn(3)
    return (
        np.random.default_rng(children[0]),
        np.random.default_rng(children[1]),
        np.random.default_rng(children[2]),
    )


def _float_list(arr):
    return [float(v) for v in np.asarray(arr).ravel()]


def render_equations(theta, support, features, p: int, d: int) -> list:
    """Human-readable equations like 'dx1/dt = -9.607 x1 + 9.689 x2'."""
    lines = []
    lhs_tpl = "dx{i}/dt" if p == 1 else f"d{p}x{{i}}/dt{p}"
    for i in range(d):
        terms = []
        for q in np.nonzero(support[i])[0]:
            coef = theta[i, q]
            name = features[q].name
            body = f"{abs(coef):.3f}" if name == "1" else f"{abs(coef):.3f} {name}"
            terms.append((coef < 0, body))
        if not terms:
            rhs = "0"
        else:
            parts = []
            for k, (neg, body) in enumerate(terms):
                if k == 0:
                    parts.append(("-" if neg else "") + body)
                else:
                    parts.append(("- " if neg else "+ ") + body)
            rhs = " ".join(parts)
        lines.append(lhs_tpl.format(i=i + 1) + " = " + rhs)
    return lines


def _resolve_kernel(cfg: ExperimentConfig, obs) -> HyperFit:
    if cfg.kernel_mode == "fixed":
        fx = cfg.kernel_fixed
        return HyperFit(c0=fx["c0"], c1=fx["c1"], ell=fx["ell"],
                        sigma2=fx["sigma2"] if fx["sigma2"] is not None else 0.0,
                        log_marginal=float("nan"), trace=[])
    return fit_hyperparameters(obs, n=cfg.kernel_n, multistarts=cfg.kernel_multistarts,
                               sigma2_max_rel=cfg.kernel_sigma2_max_rel)


def _truth_states_at(result, times) -> np.ndarray:
    return np.stack([result.at(t) for t in np.atleast_1d(times)])


def run_experiment(cfg: ExperimentConfig, out_dir: str = None, seed: int = None) -> dict:
    """Simulate, fit, evaluate; optionally write the run directory."""
    timings = {}
    t_total = time.perf_counter()
    seed = cfg.seed if seed is None else seed
    rng_system, rng_noise, rng_fit = _spawned_rngs(seed)

    system = make_system(cfg.system_name, cfg.system_params, rng=rng_system)
    obs_times = cfg.pattern.times()
    t_last = float(obs_times[-1])
    train_horizon = max(cfg.horizon, t_last)
    eval_times = np.linspace(0.0, train_horizon, cfg.eval_points)

    t_star = t_last
    forward_times = None
    if cfg.forward_t_end > t_star:
        forward_times = np.linspace(t_star, cfg.forward_t_end, cfg.forward_points)

    all_times = np.unique(np.concatenate(
        [obs_times, eval_times] + ([forward_times] if forward_times is not None else [])
    ))
    t0 = time.perf_counter()
    truth = integrate(system, system.x0, (0.0, float(all_times[-1])), cfg.solver,
                      t_eval=all_times)
    timings["simulate"] = time.perf_counter() - t0

    obs = sample_observations(truth, system, cfg.pattern, cfg.noise, rng=rng_noise)

    t0 = time.perf_counter()
    hyper = _resolve_kernel(cfg, obs)
    timings["hyperparameters"] = time.perf_counter() - t0

    kernel = KernelSpec(c0=hyper.c0, c1=hyper.c1, ell=hyper.ell, n=cfg.kernel_n,
                        max_order=2 * cfg.p + 2)
    features = generate(cfg.library)

    t0 = time.perf_counter()
    fit_result = fit(
        obs,
        d=system.d,
        p=system.p,
        horizon=train_horizon,
        features=features,
        weights=cfg.weights,
        kernel=kernel,
        grid_size=cfg.grid_size,
        sparsifier=cfg.sparsifier,
        lm_config=cfg.lm,
        rng=rng_fit,
        max_outer=cfg.max_outer,
        hidden_init_scale=cfg.hidden_init_scale,
    )
    fit_result.hyper = hyper
    timings["fit"] = time.perf_counter() - t0

    report, est_states, true_states = _evaluate(cfg, system, fit_result, truth, eval_times)
    forward = _forward(cfg, system, fit_result, truth, t_star, forward_times)

    equations = render_equations(fit_result.theta_hat.theta, fit_result.theta_hat.support,
                                 features, system.p, system.d)
    timings["total"] = time.perf_counter() - t_total

    record = _result_record(cfg, seed, system, hyper, fit_result, report, forward, equations)
    out = {
        "record": record,
        "metrics": report.as_dict(),
        "forward": forward,
        "seed": seed,
        "equations": equations,
        "fit": fit_result,
        "timings": timings,
    }
    if out_dir is not None:
        run_dir = next_run_dir(out_dir, cfg.name)
        _write_run(run_dir, cfg, seed, record, fit_result, obs, truth, system,
                   eval_times, est_states, true_states, forward, timings, equations)
        out["run_dir"] = run_dir
    return out


def _evaluate(cfg, system, fit_result: FitResult, truth, eval_times):
    d0 = build_eval_operator(fit_result.table, fit_result.grid, eval_times, 0, fit_result.p)
    est_states = d0.matrix @ fit_result.z_hat.z
    true_states = _truth_states_at(truth, eval_times)[:, :system.d]

    coords = cfg.metric_coords
    report = MetricReport()
    try:
        report.e_x, report.e_x_printed = state_error(est_states, true_states,
                                                     eval_times, coords=coords)
    except UndefinedMetricError:
        pass
    theta_true = system.true_theta(fit_result.features)
    if theta_true is not None:
        report.e_theta = coeff_error(fit_result.theta_hat.theta, theta_true)
        exact, precision, recall = support_stats(fit_result.theta_hat.theta, theta_true)
        report.support_exact = exact
        report.support_precision = precision
        report.support_recall = recall
    return report, est_states, true_states


def _forward(cfg, system, fit_result: FitResult, truth, t_star, forward_times):
    if forward_times is None:
        return None
    ops = [
        build_eval_operator(fit_result.table, fit_result.grid, np.array([t_star]), r,
                            fit_result.p)
        for r in range(system.p)
    ]
    u_star = np.concatenate([op.matrix @ fit_result.z_hat.z for op in ops], axis=0).ravel()
    sim = forward_simulate(fit_result.theta_hat, fit_result.features, u_star,
                           (t_star, float(forward_times[-1])), system.d, system.p,
                           solver=cfg.solver, t_eval=forward_times)
    true_fw = _truth_states_at(truth, forward_times)[:, :system.d]
    n_sim = sim.states.shape[0]
    coords = cfg.metric_coords if cfg.metric_coords is not None else list(range(system.d))
    rel_l2 = None
    if n_sim >= 2:
        ts = forward_times[:n_sim]
        diff = sim.states[:, :system.d][:, coords] - true_fw[:n_sim][:, coords]
        num = np.trapezoid(np.sum(diff**2, axis=1), ts)
        den = np.trapezoid(np.sum(true_fw[:n_sim][:, coords] ** 2, axis=1), ts)
        rel_l2 = float(np.sqrt(num / den)) if den > 0 else None
    return {
        "t_start": float(t_star),
        "t_end": float(forward_times[-1]),
        "rel_l2": rel_l2,
        "divergence_time": sim.divergence_time,
        "n_points": int(n_sim),
        "times": forward_times[:n_sim],
        "states": sim.states[:, :system.d] if n_sim else np.zeros((0, system.d)),
        "true_states": true_fw,
    }


def _result_record(cfg, seed, system, hyper: HyperFit, fit_result: FitResult,
                   report: MetricReport, forward, equations) -> dict:
    echo = copy.deepcopy(cfg.echo)
    echo["seed"] = seed
    support_hist = [
        [[int(i), int(q)] for i, q in zip(*np.nonzero(s))]
        for s in fit_result.support_history
    ]
    fw = None
    if forward is not None:
        fw = {k: forward[k] for k in ("t_start", "t_end", "rel_l2", "divergence_time", "n_points")}
    return {
        "tool_version": __version__,
        "prng": PRNG_ID,
        "config": echo,
        "hyperparameters": {
            "c0": hyper.c0,
            "c1": hyper.c1,
            "ell": hyper.ell,
            "sigma2": hyper.sigma2,
            "log_marginal": hyper.log_marginal,
        },
        "gram_jitter": fit_result.gram.jitter,
        "grid_nodes": int(fit_result.grid.n_nodes),
        "feature_names": [f.name for f in fit_result.features],
        "theta": [[float(v) for v in row] for row in fit_result.theta_hat.theta],
        "support": [[bool(v) for v in row] for row in fit_result.theta_hat.support],
        "support_history": support_hist,
        "objective_history": _float_list(fit_result.objective_history),
        "termination": fit_result.termination,
        "converged": fit_result.converged,
        "n_outer": fit_result.n_outer,
        "metrics": report.as_dict(),
        "forward": fw,
        "equations": equations,
    }


def next_run_dir(out_dir: str, name: str) -> str:
    """Fresh run directory under out_dir/name; existing runs are never reused."""
    base = os.path.join(out_dir, name)
    os.makedirs(base, exist_ok=True)
    k = 0
    while True:
        candidate = os.path.join(base, f"run_{k:04d}")
        try:
            os.mkdir(candidate)
            return candidate
        except FileExistsError:
            k += 1


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_csv(path: str, header: list, rows):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(",".join(_fmt(v) for v in row) + "\n")


def _write_run(run_dir, cfg, seed, record, fit_result, obs, truth, system,
               eval_times, est_states, true_states, forward, timings, equations):
    d = system.d
    with open(os.path.join(run_dir, "config_echo.yaml"), "w", encoding="utf-8") as fh:
        yaml.safe_dump(record["config"], fh, sort_keys=True)
    with open(os.path.join(run_dir, "result.json"), "w", encoding="utf-8") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(run_dir, "equations.txt"), "w", encoding="utf-8") as fh:
        fh.write("\n".join(equations) + "\n")
    with open(os.path.join(run_dir, "diagnostics.json"), "w", encoding="utf-8") as fh:
        json.dump(
            {
                "timings_s": timings,
                "wall_time_fit_s": fit_result.wall_time,
                "lm_iterations": [len(t) for t in fit_result.lm_traces],
                "integrator": {
                    "n_steps": truth.n_steps,
                    "n_rejected": truth.n_rejected,
                    "status": truth.status,
                },
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")

    rows = []
    for outer, trace in enumerate(fit_result.lm_traces):
        for row in trace:
            rows.append([
                outer, row["iteration"], row["objective"], row["gamma"], row["rho"],
                int(row["accepted"]), row["grad_norm"], row["step_norm"],
            ])
    write_csv(os.path.join(run_dir, "traces.csv"),
              ["outer", "iteration", "objective", "gamma", "rho", "accepted",
               "grad_norm", "step_norm"], rows)

    _write_trajectory_csv(os.path.join(run_dir, "trajectory_true.csv"),
                          eval_times, true_states, system)
    write_csv(os.path.join(run_dir, "trajectory_est.csv"),
              ["t"] + [f"x{i + 1}" for i in range(d)],
              [[t] + list(row) for t, row in zip(eval_times, est_states)])
    _write_observations_csv(os.path.join(run_dir, "observations.csv"), obs, d)

    if forward is not None and forward["n_points"] > 1:
        header = ["t"] + [f"x{i + 1}_true" for i in range(d)] + [f"x{i + 1}_sim" for i in range(d)]
        rows = [
            [t] + list(xt) + list(xs)
            for t, xt, xs in zip(forward["times"], forward["true_states"], forward["states"])
        ]
        write_csv(os.path.join(run_dir, "forward.csv"), header, rows)


def _write_trajectory_csv(path, times, states, system):
    from .simulate import hamiltonian

    d = system.d
    header = ["t"] + [f"x{i + 1}" for i in range(d)]
    rows = [[t] + list(row) for t, row in zip(times, states)]
    write_csv(path, header, rows)


def _write_observations_csv(path, obs, d):
    header = ["n", "t", "coord_mask"] + [f"y{i + 1}" for i in range(d)]
    rows = []
    for n in range(obs.n_times):
        v = obs.mats[n]
        y = obs.ys[n]
        mask = ["0"] * d
        yvals = [""] * d
        for j in range(v.shape[1]):
            c = int(np.argmax(np.abs(v[:, j])))
            mask[c] = "1"
            yvals[c] = repr(float(y[j]))
        rows.append([n + 1, obs.times[n], "".join(mask)] + yvals)
    write_csv(path, header, rows)


def simulate_only(cfg: ExperimentConfig, out_dir: str, seed: int = None) -> str:
    """Data generation alone: trajectory and observation CSVs."""
    seed = cfg.seed if seed is None else seed
    rng_system, rng_noise, _ = _spawned_rngs(seed)
    system = make_system(cfg.system_name, cfg.system_params, rng=rng_system)
    obs_times = cfg.pattern.times()
    horizon = max(cfg.horizon, float(obs_times[-1]))
    dense = np.linspace(0.0, horizon, cfg.eval_points)
    all_times = np.unique(np.concatenate([obs_times, dense]))
    truth = integrate(system, system.x0, (0.0, horizon), cfg.solver, t_eval=all_times)
    obs = sample_observations(truth, system, cfg.pattern, cfg.noise, rng=rng_noise)

    run_dir = next_run_dir(out_dir, cfg.name)
    dense_states = _truth_states_at(truth, dense)
    d = system.d
    header = ["t"] + [f"x{i + 1}" for i in range(d)]
    rows = [[t] + list(row[:d]) for t, row in zip(dense, dense_states)]
    if system.name == "coupled_duffing":
        from .simulate import hamiltonian

        header.append("energy")
        for row, st in zip(rows, dense_states):
            row.append(hamiltonian(system, st[:d], st[d:]))
    write_csv(os.path.join(run_dir, "trajectory_true.csv"), header, rows)
    _write_observations_csv(os.path.join(run_dir, "observations.csv"), obs, d)
    with open(os.path.join(run_dir, "config_echo.yaml"), "w", encoding="utf-8") as fh:
        echo = copy.deepcopy(cfg.echo)
        echo["seed"] = seed
        yaml.safe_dump(echo, fh, sort_keys=True)
    return run_dir


# -- sweeps ------------------------------------------------------------------


def _sweep_cells(cfg: ExperimentConfig) -> list:
    seeds = cfg.sweep_seeds or [cfg.seed]
    sigmas = cfg.sweep_sigmas or [cfg.noise.sigma]
    horizons = cfg.sweep_horizons or [cfg.horizon]
    cells = []
    for horizon in horizons:
        for sigma in sigmas:
            for seed in seeds:
                raw = copy.deepcopy(cfg.echo)
                raw["seed"] = int(seed)
                raw["noise"]["sigma"] = float(sigma)
                if cfg.sweep_horizons:
                    raw["horizon"] = float(horizon)
                    raw["observation"]["t_end"] = float(horizon)
                    raw["observation"]["n_samples"] = None
                    raw["forward"]["t_end"] = 0.0
                raw["sweep"] = {"seeds": [], "sigmas": [], "horizons": []}
                raw["name"] = f"{cfg.name}_T{horizon:g}_s{sigma:g}_seed{seed}"
                cells.append({"horizon": float(horizon), "sigma": float(sigma),
                              "seed": int(seed), "raw": raw})
    return cells


def _run_cell(args):
    raw, out_dir = args
    try:
        cfg = parse_config(copy.deepcopy(raw), source="<sweep-cell>")
        out = run_experiment(cfg, out_dir=out_dir)
        m = out["metrics"]
        return {"ok": True, "metrics": m, "run_dir": out.get("run_dir")}
    except Exception as err:  # cell failures are recorded, not fatal
        return {"ok": False, "error": f"{type(err).__name__}: {err}",
                "traceback": traceback.format_exc()}


def run_sweep(cfg: ExperimentConfig, out_dir: str, workers: int = 1) -> dict:
    """Cartesian sweep over seeds/noise/horizons with an aggregate CSV."""
    cells = _sweep_cells(cfg)
    os.makedirs(out_dir, exist_ok=True)
    jobs = [(cell["raw"], out_dir) for cell in cells]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(job) for job in jobs]

    groups = {}
    failures = []
    for cell, res in zip(cells, results):
        key = (cell["horizon"], cell["sigma"])
        groups.setdefault(key, []).append(res)
        if not res["ok"]:
            failures.append({"cell": {k: cell[k] for k in ("horizon", "sigma", "seed")},
                             "error": res["error"]})

    rows = []
    for (horizon, sigma), cell_results in sorted(groups.items()):
        ok = [r["metrics"] for r in cell_results if r["ok"]]
        ex = [m["e_x"] for m in ok if m["e_x"] is not None]
        et = [m["e_theta"] for m in ok if m["e_theta"] is not None]
        exact = [bool(m["support_exact"]) for m in ok if m["support_exact"] is not None]
        rows.append([
            horizon, sigma, len(cell_results), len(cell_results) - len(ok),
            float(np.mean(ex)) if ex else "",
            float(np.std(ex)) if ex else "",
            float(np.median(ex)) if ex else "",
            float(np.mean(et)) if et else "",
            float(np.std(et)) if et else "",
            float(np.mean(exact)) if exact else "",
        ])
    agg_path = os.path.join(out_dir, f"{cfg.name}_aggregate.csv")
    write_csv(agg_path,
              ["horizon", "sigma", "n_runs", "n_failed", "e_x_mean", "e_x_std",
               "e_x_median", "e_theta_mean", "e_theta_std", "exact_support_rate"],
              rows)
    if failures:
        with open(os.path.join(out_dir, f"{cfg.name}_failures.json"), "w",
                  encoding="utf-8") as fh:
            json.dump(failures, fh, indent=2)
    return {"aggregate_csv": agg_path, "n_cells": len(cells), "n_failed": len(failures),
            "results": results, "cells": cells}
