"""Command-line front end.

Subcommands: estimate, compare, gates, repro, simulate, validate-config. Every
run is driven by a JSON config (schema-validated, unknown keys rejected) plus
a handful of overriding flags; every report embeds the resolved config and the
master seed, is schema-versioned, and is written atomically. Exit codes:
0 success, 1 usage/config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from importlib import resources

import numpy as np
from jsonschema import Draft202012Validator

from . import adaptive as adaptive_mod
from . import compare as compare_mod
from . import gates as gates_mod
from . import repro as repro_mod
from . import sim
from .data import Roles, ingest_csv
from .errors import ConfigInvalid, DataError, SplitInferError
from .inference import named_reduction, normal_ci
from .learners import builtin, train_all
from .moments import builtin_moment
from .report import SCHEMA_VERSION, report_schema_version, write_report
from .rng import derived_seed, substream
from .splits import generate_plan
from .zestim import solve

DEFAULTS = {
    "plan": {"M": 100, "K": 3, "b": None, "seed": 0},
    "learner": "ols",
    "moment": "mse",
    "variant": 2,
    "h": "identity",
    "alpha": 0.05,
}


def load_schema(name: str) -> dict:
    with resources.files("splitinfer.schemas").joinpath(name).open("r") as fh:
        return json.load(fh)


def validate_config(config: dict) -> None:
    validator = Draft202012Validator(load_schema("config.schema.json"))
    errors = sorted(validator.iter_errors(config), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        pointer = "/" + "/".join(str(p) for p in err.absolute_path)
        raise ConfigInvalid(pointer, err.message)


def resolve_config(config: dict, args) -> dict:
    resolved = {**config}
    plan = {**DEFAULTS["plan"], **resolved.get("plan", {})}
    if args.seed is not None:
        plan["seed"] = args.seed
    resolved["plan"] = plan
    for key in ("learner", "moment", "variant", "h", "alpha"):
        resolved.setdefault(key, DEFAULTS[key])
    if getattr(args, "adaptive", False):
        resolved.setdefault("estimate", {})
        resolved["estimate"]["adaptive"] = True
    output = resolved.setdefault("output", {})
    if args.out:
        output["path"] = args.out
    if getattr(args, "emit_plan", False):
        output["emit_plan"] = True
    if getattr(args, "emit_sigma", False):
        output["emit_sigma"] = True
    resolved["threads"] = args.threads
    return resolved


def build_dataset(config: dict):
    data_cfg = config.get("data") or {}
    if "path" in data_cfg:
        roles = Roles.from_mapping(data_cfg.get("schema", {}))
        return ingest_csv(
            data_cfg["path"], roles,
            missing_policy=data_cfg.get("missing_policy", "strict"),
            missing_values=tuple(data_cfg.get("missing_values", ("", "NA"))),
        )
    synth = data_cfg.get("synthetic", {"kind": "base", "n": 400, "seed": 0})
    kind = synth.get("kind", "base")
    n = int(synth.get("n", 400))
    seed = int(synth.get("seed", 0))
    if kind == "base":
        return sim.synthetic_base(n=n, seed=seed)
    if kind == "copula":
        base = sim.synthetic_base(n=max(n, 200), seed=derived_seed(seed, 10))
        dgp = sim.CopulaDGP(base, mode=synth.get("mode", "asis"),
                            outcome_p=float(synth.get("outcome_p", 0.07)))
        return sim.copula_sample(dgp, n, seed)
    if kind == "hte":
        return sim.hte_sample(sim.HteDGP(hte_mode=synth.get("mode", "predictable")), n, seed)
    if kind == "linear_cate":
        return sim.linear_cate_sample(n, seed)
    raise ConfigInvalid("/data/synthetic/kind", f"unknown synthetic kind {kind!r}")


# ---------------------------------------------------------------------------
# subcommand implementations


def run_estimate(config: dict) -> dict:
    d = build_dataset(config)
    plan_cfg = config["plan"]
    plan = generate_plan(d.n, plan_cfg["M"], plan_cfg["K"], plan_cfg["b"], plan_cfg["seed"])
    learner = builtin(config["learner"])
    mf = builtin_moment(config["moment"])
    models = train_all(plan, d, learner, seed=derived_seed(plan_cfg["seed"], 1),
                       threads=config.get("threads", 1))
    est = solve(config["variant"], mf, models, plan, d)
    h = named_reduction(config["h"], mf.dim)
    report = normal_ci(mf, models, plan, d, est, h, config["alpha"])
    results = {"estimate": est.to_jsonable(), "inference": report.to_jsonable()}
    est_cfg = config.get("estimate", {})
    if est_cfg.get("adaptive"):
        cfg = adaptive_mod.AdaptiveConfig(
            c_gamma=est_cfg.get("c_gamma"),
            grid_points=est_cfg.get("grid_points", 2001),
            alpha=config["alpha"],
        )
        ci = adaptive_mod.adaptive_ci(mf, models, plan, d, est, cfg)
        results["adaptive"] = ci.to_jsonable()
    return {"results": results, "plan": plan}


def run_compare(config: dict) -> dict:
    d = build_dataset(config)
    plan_cfg = config["plan"]
    plan = generate_plan(d.n, plan_cfg["M"], plan_cfg["K"], plan_cfg["b"], plan_cfg["seed"])
    mf = builtin_moment(config["moment"])
    h = named_reduction(config["h"], mf.dim)
    cmp_cfg = config.get("compare", {})
    mc_draws = cmp_cfg.get("mc_draws", 100_000)
    slack = cmp_cfg.get("slack", 0.0)
    seed = derived_seed(plan_cfg["seed"], 2)
    if "against_learner" in cmp_cfg:
        res = compare_mod.compare_two_learners(
            mf, plan, d, builtin(config["learner"]), builtin(cmp_cfg["against_learner"]),
            seed=seed, h=h, alpha=config["alpha"], mc_draws=mc_draws, slack=slack,
        )
        results = {
            "theta_a": res.theta_a.tolist(),
            "theta_b": res.theta_b.tolist(),
            "deltas_ab": res.delta_ab.deltas.tolist(),
            "deltas_ba": res.delta_ba.deltas.tolist(),
            "test_ab": {"T": res.test_ab.statistic, "critical_value": res.test_ab.critical_value,
                        "reject": res.test_ab.reject},
            "test_ba": {"T": res.test_ba.statistic, "critical_value": res.test_ba.critical_value,
                        "reject": res.test_ba.reject},
        }
        return {"results": results, "plan": plan}
    learner = builtin(config["learner"])
    models = train_all(plan, d, learner, seed=derived_seed(plan_cfg["seed"], 1),
                       threads=config.get("threads", 1))
    baseline = builtin(cmp_cfg.get("baseline", "mean")).train(d, derived_seed(plan_cfg["seed"], 3))
    res = compare_mod.compare_models(mf, models, plan, d, baseline, h=h,
                                     alpha=config["alpha"], mc_draws=mc_draws,
                                     seed=seed, slack=slack)
    emit_sigma = config.get("output", {}).get("emit_sigma", False)
    return {"results": res.to_jsonable(emit_sigma=emit_sigma), "plan": plan}


def run_gates(config: dict) -> dict:
    d = build_dataset(config)
    plan_cfg = config["plan"]
    gates_cfg = config.get("gates", {})
    learner_names = config.get("learners") or [config["learner"]]
    learners = tuple(gates_mod.CateLearner(builtin(name)) for name in learner_names)
    cfg = gates_mod.GatesConfig(
        learners=learners,
        M=plan_cfg["M"], K=plan_cfg["K"],
        L=gates_cfg.get("L", 2), J=gates_cfg.get("J", 3),
        alpha=config["alpha"],
        controls=tuple(gates_cfg.get("controls", ("const", "propensity"))),
    )
    result, het, _ = gates_mod.run_gates(
        cfg, d, seed=plan_cfg["seed"],
        run_het=gates_cfg.get("het_test", False),
        mc_draws=gates_cfg.get("mc_draws", 20_000),
    )
    results = {"gates": result.to_jsonable()}
    if het is not None:
        results["het_test"] = het.to_jsonable()
    if gates_cfg.get("baselines"):
        results["baselines"] = gates_mod.baselines(cfg, d, seed=derived_seed(plan_cfg["seed"], 4))
    return {"results": results, "plan": None}


def run_repro(config: dict) -> dict:
    d = build_dataset(config)
    plan_cfg = config["plan"]
    plan = generate_plan(d.n, plan_cfg["M"], plan_cfg["K"], plan_cfg["b"], plan_cfg["seed"])
    mf = builtin_moment(config["moment"])
    h = named_reduction(config["h"], mf.dim)
    learner = builtin(config["learner"])
    models = train_all(plan, d, learner, seed=derived_seed(plan_cfg["seed"], 1),
                       threads=config.get("threads", 1))
    est = solve(2, mf, models, plan, d)
    rep_cfg = config.get("repro", {})
    tau = rep_cfg.get("tau", 0.0)
    comps = repro_mod.sigma_D_hat(mf, models, plan, d, est.theta_hat, h, tau)
    measure = repro_mod.repro_measure(comps, rep_cfg.get("beta", 0.2),
                                      rep_cfg.get("test_type", "two_sided"))
    return {
        "results": {"components": comps.to_jsonable(), "measure": measure.to_jsonable()},
        "plan": plan,
    }


def run_simulate(config: dict) -> dict:
    sim_cfg = config["simulate"]
    csv_path = sim_cfg.get("csv_path") or (config.get("output", {}).get("path", "grid") + ".csv")
    grid = sim.ExperimentGrid(
        dgp=sim_cfg.get("dgp", {"kind": "gauss_linear"}),
        n_list=tuple(sim_cfg["n_list"]),
        K_list=tuple(sim_cfg["K_list"]),
        M=config["plan"]["M"],
        methods=tuple(sim_cfg["methods"]),
        iterations=sim_cfg["iterations"],
        seed=config["plan"]["seed"],
        out_csv=csv_path,
        out_json=None,
        extra={"learner": config.get("learner", "ols"),
               "moment": config.get("moment", "mse"),
               "alpha": config.get("alpha", 0.05),
               "oracle_rows": sim_cfg.get("oracle_rows", 50_000)},
    )
    rows = sim.run_grid(grid)
    return {
        "results": {"csv_path": csv_path, "rows_written": len(rows),
                    "summary": sim.summarize_grid(csv_path)},
        "plan": None,
    }


# ---------------------------------------------------------------------------
# grid method runners (shared with sim.run_grid)


def _grid_sampler(spec: dict):
    kind = spec.get("kind", "gauss_linear")
    if kind == "gauss_linear":
        slope = float(spec.get("slope", 1.0))
        noise = float(spec.get("noise", 1.0))

        def sample(n, seed):
            rng = substream(seed, 7)
            x = rng.standard_normal(n)
            y = slope * x + noise * rng.standard_normal(n)
            from .data import Dataset
            return Dataset({"y": y, "x1": x}, Roles("y", ("x1",)))

        return sample
    if kind == "copula":
        base = sim.synthetic_base(n=int(spec.get("base_n", 300)), seed=int(spec.get("base_seed", 0)))
        dgp = sim.CopulaDGP(base, mode=spec.get("mode", "asis"),
                            outcome_p=float(spec.get("outcome_p", 0.07)))
        return lambda n, seed: sim.copula_sample(dgp, n, seed)
    if kind == "hte":
        dgp = sim.HteDGP(hte_mode=spec.get("mode", "predictable"))
        return lambda n, seed: sim.hte_sample(dgp, n, seed)
    raise ConfigInvalid("/simulate/dgp/kind", f"unknown DGP kind {kind!r}")


def _grid_estimate(grid, n, K, cell_index, iteration):
    sampler = _grid_sampler(grid.dgp)
    seed = derived_seed(grid.seed, cell_index, iteration)
    d = sampler(n, derived_seed(seed, 0))
    plan = generate_plan(n, grid.M, K, b=(n // 2 if K == 1 else None),
                         seed=derived_seed(seed, 1))
    learner = builtin(grid.extra.get("learner", "ols"))
    mf = builtin_moment(grid.extra.get("moment", "mse"))
    models = train_all(plan, d, learner, seed=derived_seed(seed, 2))
    est = solve(2, mf, models, plan, d)
    report = normal_ci(mf, models, plan, d, est, alpha=grid.extra.get("alpha", 0.05))
    fresh = sampler(grid.extra.get("oracle_rows", 50_000), derived_seed(seed, 3))
    oracle = float(sim.estimand_oracle(mf, models, plan, fresh)[0])
    lo, hi = report.ci
    return {
        "estimate": float(est.theta_hat[0]), "se": report.se,
        "ci_lo": float(lo), "ci_hi": float(hi),
        "covered": int(lo <= oracle <= hi),
    }


def _grid_compare(grid, n, K, cell_index, iteration):
    sampler = _grid_sampler(grid.dgp)
    seed = derived_seed(grid.seed, cell_index, iteration)
    d = sampler(n, derived_seed(seed, 0))
    plan = generate_plan(n, grid.M, K, b=(n // 2 if K == 1 else None),
                         seed=derived_seed(seed, 1))
    learner = builtin(grid.extra.get("learner", "ols"))
    mf = builtin_moment(grid.extra.get("moment", "mse"))
    models = train_all(plan, d, learner, seed=derived_seed(seed, 2))
    baseline = builtin("mean").train(d)
    res = compare_mod.compare_models(mf, models, plan, d, baseline,
                                     alpha=grid.extra.get("alpha", 0.05),
                                     mc_draws=20_000, seed=derived_seed(seed, 4))
    return {
        "estimate": res.point, "se": res.sigma_delta / np.sqrt(n),
        "ci_lo": res.ci_final[0], "ci_hi": res.ci_final[1],
        "p_value": float(res.test.reject),
    }


def _grid_gates(grid, n, K, cell_index, iteration):
    seed = derived_seed(grid.seed, cell_index, iteration)
    dgp = sim.HteDGP(hte_mode=grid.dgp.get("mode", "predictable"))
    d = sim.hte_sample(dgp, n, derived_seed(seed, 0))
    learners = tuple(gates_mod.CateLearner(builtin(name))
                     for name in grid.extra.get("gates_learners", ("ols", "ridge(1.0)")))
    cfg = gates_mod.GatesConfig(learners=learners, M=grid.M, K=K)
    result, _, _ = gates_mod.run_gates(cfg, d, seed=derived_seed(seed, 1))
    return {"estimate": result.delta_hat, "se": result.delta_se,
            "p_value": result.p_one_sided}


METHOD_RUNNERS = {
    "estimate": _grid_estimate,
    "compare": _grid_compare,
    "gates": _grid_gates,
}


# ---------------------------------------------------------------------------
# argument parsing and dispatch

RUNNERS = {
    "estimate": run_estimate,
    "compare": run_compare,
    "gates": run_gates,
    "repro": run_repro,
    "simulate": run_simulate,
}


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="splitinfer",
                                     description="Split-sample inference toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in (*RUNNERS, "validate-config"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON config path")
        p.add_argument("--seed", type=int, default=None, help="override plan seed")
        p.add_argument("--threads", type=int, default=None,
                       help="worker cap (default: SPLITINFER_THREADS or 1)")
        p.add_argument("--out", default=None, help="report path override")
        p.add_argument("--emit-plan", action="store_true", dest="emit_plan")
        p.add_argument("--emit-sigma", action="store_true", dest="emit_sigma")
        p.add_argument("--adaptive", action="store_true",
                       help="also compute the adaptive CI (estimate only)")
    return parser


def run(argv) -> int:
    args = make_parser().parse_args(argv)
    try:
        with open(args.config, encoding="utf-8") as fh:
            config = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 1

    try:
        validate_config(config)
    except ConfigInvalid as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1

    if args.command == "validate-config":
        print("config ok")
        return 0

    if config.get("method", args.command) != args.command:
        print(f"error: config method {config.get('method')!r} does not match "
              f"subcommand {args.command!r}", file=sys.stderr)
        return 1
    config["method"] = args.command

    if args.threads is None:
        args.threads = int(os.environ.get("SPLITINFER_THREADS", "1"))

    try:
        resolved = resolve_config(config, args)
        outcome = RUNNERS[args.command](resolved)
    except ConfigInvalid as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (SplitInferError, DataError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2

    payload = {
        "schema_version": SCHEMA_VERSION,
        "method": args.command,
        "config": resolved,
        "master_seed": resolved["plan"]["seed"],
        "results": outcome["results"],
    }
    if resolved.get("output", {}).get("emit_plan") and outcome.get("plan") is not None:
        payload["plan"] = outcome["plan"].to_jsonable()
    out_path = resolved.get("output", {}).get("path", f"{args.command}_report.json")
    write_report(out_path, payload)
    print(out_path)
    return 0


def main() -> int:
    return run(sys.argv[1:])


if __name__ == "__main__":
    raise SystemExit(main())
