"""Benchmark command line: run the solver experiments from config files.

Verbs: ``bench-lq`` (quantized DP against the closed-form value across grid
sizes), ``bench-portfolio`` (mean-variance strategy tables against the
baselines), ``quantize-cache`` (precompute grids and codebooks keyed by the
config hash), ``dump-riccati`` (closed-form coefficient dump).

Outputs are CSV plus a JSON report with a full provenance block.  Re-running
a verb with the same config and seed reproduces every output file bit for
bit; wall-clock timings therefore go to the log, never into output files.
"""
from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .dp import quantized_dp
from .lq_analytic import riccati_backward, standard_initial_moments, w0_value
from .model import LQParams, PortfolioParams, lq_model, portfolio_model
from .quantize import (
    Grids,
    KernelCache,
    codebook_build,
    config_hash,
    initial_joint_quantized,
    lloyd,
)
from .simkit import (
    ConstantControl,
    QuantizedPolicy,
    baseline_buy_and_hold,
    baseline_trending,
    evaluate_policy_cost,
)

log = logging.getLogger("mfcontrol.cli")

SCHEMA_VERSION = "v1"

LQ_DEFAULTS = {
    "dim": 2,
    "horizon": 3,
    "state_gain": [[0.0, 0.0], [0.0, 0.0]],
    "mean_gain": [[0.0, 0.0], [0.0, 0.0]],
    "control_gain": [[1.0, 1.0], [0.0, 1.0]],
    "obs_gain": [[1.0, 1.0], [0.0, 1.0]],
    "quad": [[1.0, 1.0], [1.0, 1.0]],
    "mean_quad": [[1.0, 1.0], [1.0, 1.0]],
    "control_quad": [[1.0, 0.0], [0.0, 1.0]],
    "control_set": [[-2.0, -2.0], [-1.0, -1.0], [1.0, 1.0], [2.0, 2.0]],
    "grid_sizes": [2, 4, 10, 20],
    "codebook_max": 64,
    "codebook_level_cap": 64,
    "optimizer_mode": "auto",
    "n_mc": 10000,
    "init_mc": 100000,
}

# The wealth-fraction control set: the dynamics' own description and the
# reported tables are only consistent with a maximal unit allocation, so the
# benchmark defaults to the fraction ladder.  Any other set can be configured.
PORTFOLIO_DEFAULTS = {
    "drift": 0.02,
    "volatility": 0.05,
    "time_step": 0.5,
    "horizon": 5,
    "risk_aversions": [2.0, 4.0, 8.0, 16.0],
    "control_set": [0.25, 0.5, 0.75, 1.0],
    "initial_wealth": 1.0,
    "obs_noise_std": 1.0,
    "grid_size": 2,
    "n_mc": 10000,
    "init_mc": 10000,
    "codebook_max": 256,
    "codebook_level_cap": 256,
    "optimizer_mode": "auto",
    "n_paths": [250, 10000],
    "pilot_paths": 10000,
    "pilot_control": 1.0,
    "grid_std_floor": 1e-6,
}


def load_config(path) -> dict:
    path = Path(path)
    if path.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # stdlib from 3.11; fallback below
            import tomli as tomllib

        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    else:
        with open(path) as fh:
            raw = json.load(fh)
    if raw.get("schema", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ValueError("unsupported config schema %r" % raw.get("schema"))
    return raw


def resolve_config(raw: dict) -> dict:
    """Fill every default so the serialized config is self-contained."""
    out = {
        "schema": SCHEMA_VERSION,
        "kind": raw.get("kind", "lq_benchmark"),
        "seed": int(raw.get("seed", 0)),
        "output_dir": raw.get("output_dir", "out"),
    }
    if out["kind"] not in ("lq_benchmark", "portfolio"):
        raise ValueError("unknown experiment kind %r" % out["kind"])
    section = "lq" if out["kind"] == "lq_benchmark" else "portfolio"
    defaults = LQ_DEFAULTS if section == "lq" else PORTFOLIO_DEFAULTS
    merged = copy.deepcopy(defaults)
    for key, value in raw.get(section, {}).items():
        if key not in defaults:
            raise ValueError("unknown %s config key %r" % (section, key))
        merged[key] = value
    out[section] = merged
    return out


def _provenance(config: dict) -> dict:
    try:
        rev = (
            subprocess.run(
                ["git", "rev-parse", "HEAD"],
                capture_output=True,
                text=True,
                cwd=Path(__file__).resolve().parent,
                timeout=10,
            ).stdout.strip()
            or "unknown"
        )
    except Exception:
        rev = "unknown"
    section = "lq" if config["kind"] == "lq_benchmark" else "portfolio"
    return {
        "schema": SCHEMA_VERSION,
        "package_version": __version__,
        "git_revision": rev,
        "config": config,
        "config_hash": config_hash(config),
        "seed": config["seed"],
        "kernel_n_mc": config[section]["n_mc"],
    }


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def lq_params_from_config(section: dict) -> LQParams:
    return LQParams(
        dim=int(section["dim"]),
        horizon=int(section["horizon"]),
        state_gain=np.asarray(section["state_gain"], dtype=float),
        mean_gain=np.asarray(section["mean_gain"], dtype=float),
        control_gain=np.asarray(section["control_gain"], dtype=float),
        obs_gain=np.asarray(section["obs_gain"], dtype=float),
        quad=np.asarray(section["quad"], dtype=float),
        mean_quad=np.asarray(section["mean_quad"], dtype=float),
        control_quad=np.asarray(section["control_quad"], dtype=float),
        control_set=[np.asarray(a, dtype=float) for a in section["control_set"]],
    )


def build_lq_pipeline(section: dict, n_grid: int, seed: int):
    """Grids, kernels, initial marginal and codebook for one grid size."""
    params = lq_params_from_config(section)
    model = lq_model(params)
    grid = lloyd(params.dim, n_grid)
    grids = Grids(grid, grid, params.horizon)
    kernels = KernelCache(model, grids, n_mc=int(section["n_mc"]), seed=seed)
    m0 = initial_joint_quantized(model, grids, n_mc=int(section["init_mc"]), seed=seed)
    book = codebook_build(
        model,
        grids,
        kernels,
        m0,
        params.horizon,
        max_codewords=int(section["codebook_max"]),
        rng=seed,
        level_cap=int(section["codebook_level_cap"]),
    )
    return params, model, grids, kernels, m0, book


def run_lq_benchmark(config: dict, out_dir=None) -> dict:
    """Quantized value vs the closed-form value across grid sizes."""
    section = config["lq"]
    seed = config["seed"]
    out_dir = Path(out_dir or config["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    params = lq_params_from_config(section)
    sol = riccati_backward(params)
    reference = w0_value(sol, standard_initial_moments(params.dim))

    rows = []
    for n_grid in section["grid_sizes"]:
        t0 = time.time()
        try:
            _, model, grids, kernels, m0, book = build_lq_pipeline(section, n_grid, seed)
            res = quantized_dp(
                model, grids, kernels, book, m0, optimizer_mode=section["optimizer_mode"]
            )
        except ValueError as exc:
            log.warning("grid size %d skipped: %s", n_grid, exc)
            rows.append(
                {
                    "n_grid": int(n_grid),
                    "status": "skipped",
                    "reason": str(exc),
                }
            )
            continue
        elapsed = time.time() - t0
        rel_err = abs(res.value - reference) / abs(reference)
        log.info(
            "N=%d: value=%.6f reference=%.6f rel_err=%.2f%% (%.1fs)",
            n_grid,
            res.value,
            reference,
            100 * rel_err,
            elapsed,
        )
        rows.append(
            {
                "n_grid": int(n_grid),
                "status": "ok",
                "quantized_value": float(res.value),
                "reference_value": float(reference),
                "rel_error": float(rel_err),
                "rel_error_pct": float(100 * rel_err),
                "projection": "lossless" if res.lossless_codebook else "clustered",
                "optimizer_mode": res.optimizer_mode,
                "optimizer_warnings": res.optimizer_warnings,
                "codebook_size": int(book.size),
            }
        )

    prov = _provenance(config)
    report = {"provenance": prov, "reference_value": float(reference), "rows": rows}
    _write_json(out_dir / "lq_benchmark.json", report)
    header = [
        "n_grid",
        "status",
        "quantized_value",
        "reference_value",
        "rel_error",
        "projection",
        "optimizer_mode",
        "codebook_size",
        "config_hash",
        "seed",
    ]
    csv_rows = []
    plot_rows = []
    for row in rows:
        if row["status"] != "ok":
            csv_rows.append(
                [row["n_grid"], "skipped:" + row["reason"], "", "", "", "", "", "", prov["config_hash"], seed]
            )
            continue
        csv_rows.append(
            [
                row["n_grid"],
                row["status"],
                row["quantized_value"],
                row["reference_value"],
                row["rel_error"],
                row["projection"],
                row["optimizer_mode"],
                row["codebook_size"],
                prov["config_hash"],
                seed,
            ]
        )
        plot_rows.append([row["n_grid"], row["rel_error_pct"]])
    _write_csv(out_dir / "lq_benchmark.csv", header, csv_rows)
    _write_csv(out_dir / "lq_benchmark_plot.csv", ["n_grid", "rel_error_pct"], plot_rows)
    return report


def build_portfolio_grids(section: dict, model, seed: int) -> Grids:
    """Per-time grids moment-matched to a unit-control pilot simulation.

    The standard-normal Lloyd grid is rescaled per time step to the running
    mean/std of the pilot wealth; observation grids widen by the observation
    noise.  Degenerate steps (deterministic start) get a tiny floor so the
    centers stay distinct.
    """
    from .simkit import simulate_batch

    base = lloyd(1, int(section["grid_size"]))
    pilot = simulate_batch(
        model, ConstantControl(section["pilot_control"]), int(section["pilot_paths"]), seed
    )
    floor = float(section["grid_std_floor"])
    obs_var = float(section["obs_noise_std"]) ** 2
    hidden_grids, obs_grids = [], []
    for k in range(model.horizon + 1):
        mean = pilot.hidden_means[k]
        std = max(np.sqrt(max(pilot.hidden_covs[k][0, 0], 0.0)), floor)
        hidden_grids.append(base.scaled(mean, std))
        if k == 0:
            obs_grids.append(base.scaled(mean, std))
        else:
            obs_grids.append(base.scaled(mean, np.sqrt(std**2 + obs_var)))
    return Grids(hidden_grids, obs_grids, model.horizon)


def run_portfolio(config: dict, out_dir=None) -> dict:
    """Strategy tables (proposed vs baselines) per risk aversion."""
    section = config["portfolio"]
    seed = config["seed"]
    out_dir = Path(out_dir or config["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)

    def model_for(gamma: float):
        return portfolio_model(
            PortfolioParams(
                drift=section["drift"],
                volatility=section["volatility"],
                time_step=section["time_step"],
                risk_aversion=float(gamma),
                horizon=int(section["horizon"]),
                control_set=section["control_set"],
                initial_wealth=section["initial_wealth"],
                obs_noise_std=section["obs_noise_std"],
            )
        )

    # Grids, kernels and codebook depend on the dynamics only, not on the
    # risk aversion; build them once and share across the gamma column runs.
    base_model = model_for(section["risk_aversions"][0])
    t0 = time.time()
    grids = build_portfolio_grids(section, base_model, seed)
    kernels = KernelCache(base_model, grids, n_mc=int(section["n_mc"]), seed=seed)
    m0 = initial_joint_quantized(base_model, grids, n_mc=int(section["init_mc"]), seed=seed)
    book = codebook_build(
        base_model,
        grids,
        kernels,
        m0,
        base_model.horizon,
        max_codewords=int(section["codebook_max"]),
        rng=seed,
        level_cap=int(section["codebook_level_cap"]),
    )
    log.info("portfolio pipeline built: codebook %d (%.1fs)", book.size, time.time() - t0)

    tables = []
    for i_gamma, gamma in enumerate(section["risk_aversions"]):
        model = model_for(gamma)
        t0 = time.time()
        res = quantized_dp(
            model, grids, kernels, book, m0, optimizer_mode=section["optimizer_mode"]
        )
        log.info(
            "gamma=%s: dp value %.6f, policy %s (%.1fs)",
            gamma,
            res.value,
            [a.tolist() for a in res.policy],
            time.time() - t0,
        )
        strategies = [
            ("proposed", QuantizedPolicy(res.policy, grids)),
            ("buy_and_hold", baseline_buy_and_hold()),
            ("trending", baseline_trending()),
        ]
        for j_paths, n_paths in enumerate(section["n_paths"]):
            sim_seed = seed + 104729 * (i_gamma + 1) + 1299709 * (j_paths + 1)
            columns = {}
            for name, strategy in strategies:
                est, boot_se, batch = evaluate_policy_cost(
                    model, strategy, int(n_paths), sim_seed
                )
                columns[name] = {
                    "mean_terminal": float(batch.mean_terminal[0]),
                    "var_terminal": float(batch.var_terminal[0]),
                    "criterion": float(batch.criterion),
                    "criterion_bootstrap_se": float(boot_se),
                }
            tables.append(
                {
                    "risk_aversion": float(gamma),
                    "n_paths": int(n_paths),
                    "sim_seed": int(sim_seed),
                    "dp_value": float(res.value),
                    "dp_policy": [a.tolist() for a in res.policy],
                    "projection": "lossless" if res.lossless_codebook else "clustered",
                    "optimizer_mode": res.optimizer_mode,
                    "columns": columns,
                }
            )

    prov = _provenance(config)
    report = {"provenance": prov, "tables": tables}
    _write_json(out_dir / "portfolio.json", report)
    for table in tables:
        gamma = table["risk_aversion"]
        n_paths = table["n_paths"]
        name = "portfolio_gamma%g_paths%d.csv" % (gamma, n_paths)
        header = ["statistic", "proposed", "buy_and_hold", "trending"]
        cols = table["columns"]
        rows = [
            ["mean_terminal"] + [cols[c]["mean_terminal"] for c in header[1:]],
            ["var_terminal"] + [cols[c]["var_terminal"] for c in header[1:]],
            ["criterion"] + [cols[c]["criterion"] for c in header[1:]],
            ["criterion_bootstrap_se"]
            + [cols[c]["criterion_bootstrap_se"] for c in header[1:]],
            ["config_hash", prov["config_hash"], "", ""],
            ["sim_seed", table["sim_seed"], "", ""],
        ]
        _write_csv(out_dir / name, header, rows)
    return report


def run_quantize_cache(config: dict, out_dir=None) -> dict:
    """Precompute grids and codebooks; cache keyed by the config hash."""
    out_dir = Path(out_dir or config["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    prov = _provenance(config)
    payload = {"provenance": prov, "grids": {}, "codebooks": {}}
    seed = config["seed"]
    if config["kind"] == "lq_benchmark":
        section = config["lq"]
        for n_grid in section["grid_sizes"]:
            _, _, grids, _, _, book = build_lq_pipeline(section, int(n_grid), seed)
            payload["grids"][str(n_grid)] = grids.to_json_dict()
            payload["codebooks"][str(n_grid)] = book.to_json_dict()
    else:
        section = config["portfolio"]
        params = PortfolioParams(
            drift=section["drift"],
            volatility=section["volatility"],
            time_step=section["time_step"],
            risk_aversion=float(section["risk_aversions"][0]),
            horizon=int(section["horizon"]),
            control_set=section["control_set"],
            initial_wealth=section["initial_wealth"],
            obs_noise_std=section["obs_noise_std"],
        )
        model = portfolio_model(params)
        grids = build_portfolio_grids(section, model, seed)
        kernels = KernelCache(model, grids, n_mc=int(section["n_mc"]), seed=seed)
        m0 = initial_joint_quantized(model, grids, n_mc=int(section["init_mc"]), seed=seed)
        book = codebook_build(
            model,
            grids,
            kernels,
            m0,
            model.horizon,
            max_codewords=int(section["codebook_max"]),
            rng=seed,
            level_cap=int(section["codebook_level_cap"]),
        )
        payload["grids"]["portfolio"] = grids.to_json_dict()
        payload["codebooks"]["portfolio"] = book.to_json_dict()
    path = out_dir / ("cache_%s.json" % prov["config_hash"])
    _write_json(path, payload)
    return payload


def run_dump_riccati(config: dict, out_dir=None) -> dict:
    if config["kind"] != "lq_benchmark":
        raise ValueError("dump-riccati needs an lq_benchmark config")
    out_dir = Path(out_dir or config["output_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    params = lq_params_from_config(config["lq"])
    sol = riccati_backward(params)
    payload = {
        "provenance": _provenance(config),
        "solution": sol.to_json_dict(),
        "value_at_standard_initial": w0_value(
            sol, standard_initial_moments(params.dim)
        ),
    }
    _write_json(out_dir / "riccati.json", payload)
    return payload


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mfcontrol", description="mean-field control benchmarks"
    )
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in ("bench-lq", "bench-portfolio", "quantize-cache", "dump-riccati"):
        p = sub.add_parser(verb)
        p.add_argument("--config", required=True, help="JSON or TOML config file")
        p.add_argument("--seed", type=int, default=None, help="override master seed")
        p.add_argument("--out", default=None, help="override output directory")
        p.add_argument("--paths", type=int, default=None, help="override n_paths")
        p.add_argument(
            "--mode",
            choices=["enumerate", "cd", "constant"],
            default=None,
            help="override optimizer mode",
        )
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")

    config = resolve_config(load_config(args.config))
    if args.seed is not None:
        config["seed"] = int(args.seed)
    if args.out is not None:
        config["output_dir"] = args.out
    section = "lq" if config["kind"] == "lq_benchmark" else "portfolio"
    if args.mode is not None:
        mode = {"cd": "coordinate_descent"}.get(args.mode, args.mode)
        config[section]["optimizer_mode"] = mode
    if args.paths is not None and section == "portfolio":
        config["portfolio"]["n_paths"] = [int(args.paths)]

    started = time.time()
    if args.verb == "bench-lq":
        run_lq_benchmark(config)
    elif args.verb == "bench-portfolio":
        run_portfolio(config)
    elif args.verb == "quantize-cache":
        run_quantize_cache(config)
    elif args.verb == "dump-riccati":
        run_dump_riccati(config)
    log.info("%s finished in %.1fs", args.verb, time.time() - started)
    return 0


if __name__ == "__main__":
    sys.exit(main())
