"""Command-line entry point wiring data, scenarios, the LP oracle, agent
training, operation, co-optimization, evaluation, and benchmarking.

Every subcommand writes a manifest (inputs with hashes, seed, wall time)
beside its outputs.  Exit codes: 0 success, 1 usage, 2 data problem,
3 numerical failure; failures emit a machine-parsable JSON line on stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import agent as agent_mod
from . import cooptim as co
from . import lp as lp_mod
from .artifacts import write_csv, write_json, write_manifest
from .desk import desk_price_archive, desk_scenario_source, desk_wind_archive
from .params import TechnicalParams, for_region, load_params
from .plant import HOURS, derive_pem_capacity
from .scenarios import (Scenario, bootstrap_generate, scenario_from_csv,
                        scenario_to_csv)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


@dataclass
class RunConfig:
    """Serializable snapshot of the knobs shared across subcommands."""

    region: str = "dunkirk"
    params_file: str | None = None
    seed: int = 0
    workers: int = 1
    out_dir: str = "runs/out"
    extra: dict = field(default_factory=dict)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        _emit_error("usage", message)
        raise SystemExit(EXIT_USAGE)


def _emit_error(kind: str, detail: str) -> None:
    print(json.dumps({"error": kind, "detail": detail}), file=sys.stderr)


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if p.suffix.lower() == ".toml":
        import tomli
        return tomli.loads(p.read_text())
    return json.loads(p.read_text())


def _params_from_args(args) -> TechnicalParams:
    if getattr(args, "params", None):
        return load_params(args.params)
    return for_region(args.region)


def _design_from_json(path: str, params: TechnicalParams):
    raw = json.loads(Path(path).read_text())
    return derive_pem_capacity(raw["m_meoh"], raw["alpha_pem"],
                               raw["c_bess"], raw["c_cht"], params)


def _scenario_source_from_args(args, horizon: int):
    """Scenario source: a directory of scenario CSVs, or the desk archives."""
    scenario_dir = getattr(args, "scenarios", None)
    if scenario_dir:
        files = sorted(Path(scenario_dir).glob("scenario_*.csv"))
        if not files:
            raise FileNotFoundError(f"no scenario_*.csv under {scenario_dir}")
        pool = [scenario_from_csv(f, region=args.region) for f in files]
        if pool[0].horizon != horizon:
            raise ValueError(
                f"scenario horizon {pool[0].horizon} != requested {horizon}")

        def source(n: int, seed: int) -> list[Scenario]:
            rng = np.random.default_rng(seed)
            idx = rng.permutation(len(pool))
            picks = [pool[idx[i % len(pool)]] for i in range(n)]
            return picks

        return source
    return desk_scenario_source(horizon=horizon, region=args.region)


def _toy_fixture(params: TechnicalParams, horizon: int = 96, n: int = 3):
    """Bundled toy instances: a fixed mid-range design and desk scenarios."""
    design = derive_pem_capacity(800.0, 0.25, 25.0, 400.0, params)
    scenarios = desk_scenario_source(horizon=horizon)(n, seed=2024)
    return design, scenarios


# ---------------------------------------------------------------------------
# subcommands

def cmd_fetch_data(args) -> int:
    from . import ingest

    t0 = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.kind == "wind":
        archive = ingest.fetch_wind(
            args.region, args.start, args.end, cache_dir=args.cache_dir,
            single_cell=args.single_cell)
    else:
        if not args.prices_csv:
            raise FileNotFoundError("--prices-csv is required for kind=prices")
        archive = ingest.load_prices(args.prices_csv, args.region)
    archive.to_csv(out / f"{args.region}_{args.kind}.csv")
    train, val = ingest.make_splits(archive)
    if len(train):
        train.to_csv(out / f"{args.region}_{args.kind}_train.csv")
    if len(val):
        val.to_csv(out / f"{args.region}_{args.kind}_validation.csv")
    write_manifest(out, "fetch-data", {}, seed=None,
                   wall_time_s=time.time() - t0,
                   extra={"region": args.region, "kind": args.kind,
                          "hours": len(archive), "train_hours": len(train),
                          "validation_hours": len(val)})
    return EXIT_OK


def cmd_gen_scenarios(args) -> int:
    t0 = time.time()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = {}
    if args.wind_archive:
        from .ingest import Archive
        wind = Archive.from_csv(args.wind_archive, args.region, "wind").values
        price = (Archive.from_csv(args.price_archive, args.region, "price").values
                 if args.price_archive else desk_price_archive())
        inputs["wind_archive"] = args.wind_archive
        if args.price_archive:
            inputs["price_archive"] = args.price_archive
    else:
        wind = desk_wind_archive()
        price = desk_price_archive()
    scenarios = bootstrap_generate(
        wind, args.n, block_len=args.block_len, jitter=args.jitter,
        seed=args.seed, price_archive=price, region=args.region,
        horizon=args.horizon)
    for i, s in enumerate(scenarios):
        scenario_to_csv(s, out / f"scenario_{i:04d}.csv")
    write_manifest(out, "gen-scenarios", inputs, seed=args.seed,
                   wall_time_s=time.time() - t0,
                   extra={"n": args.n, "horizon": args.horizon,
                          "block_len": args.block_len, "jitter": args.jitter})
    return EXIT_OK


def cmd_solve(args) -> int:
    t0 = time.time()
    params = _params_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    inputs = {}
    if args.toy:
        design, scenarios = _toy_fixture(params)
    else:
        if not (args.design and args.scenarios):
            raise FileNotFoundError("--design and --scenarios required unless --toy")
        design = _design_from_json(args.design, params)
        files = sorted(Path(args.scenarios).glob("scenario_*.csv"))
        if not files:
            raise FileNotFoundError(f"no scenario_*.csv under {args.scenarios}")
        scenarios = [scenario_from_csv(f, region=args.region) for f in files]
        inputs["design"] = args.design

    summary_rows = []
    for i, scenario in enumerate(scenarios):
        instance = lp_mod.build_lp(design, scenario, params)
        sol = lp_mod.solve_lp(instance)
        if sol.status != "optimal":
            summary_rows.append([i, sol.status, "", "", ""])
            continue
        traj = lp_mod.solution_to_trajectory(sol, instance)
        write_csv(out / f"solution_{i:04d}.csv",
                  list(lp_mod.TRAJECTORY_COLUMNS),
                  ([t, traj.p_r[t], traj.g[t], traj.soc[t], traj.h[t],
                    traj.b[t], traj.p_pem[t], traj.f_u[t], traj.f_s[t],
                    traj.r[t], traj.c[t], traj.rtg[t], traj.ctg[t]]
                   for t in range(traj.horizon)))
        summary_rows.append([i, sol.status, sol.objective, sol.net_carbon,
                             sol.max_residual])
    write_csv(out / "solutions_summary.csv",
              ["scenario", "status", "objective", "net_carbon", "max_residual"],
              summary_rows)
    write_manifest(out, "solve", inputs, seed=args.seed,
                   wall_time_s=time.time() - t0,
                   extra={"n_scenarios": len(scenarios),
                          "design": {"m_meoh": design.m_meoh,
                                     "alpha_pem": design.alpha_pem,
                                     "c_bess": design.c_bess,
                                     "c_cht": design.c_cht,
                                     "c_pem": design.c_pem}})
    return EXIT_OK


def cmd_build_oracle(args) -> int:
    t0 = time.time()
    params = _params_from_args(args)
    source = _scenario_source_from_args(args, args.horizon)
    dataset = lp_mod.build_oracle_dataset(
        args.n, co.DesignSpace.default(), source, params, seed=args.seed,
        workers=args.workers, out_dir=args.out)
    write_manifest(Path(args.out), "build-oracle", {}, seed=args.seed,
                   wall_time_s=time.time() - t0,
                   extra={"n_built": len(dataset), "n_failed": dataset.n_failed,
                          "horizon": dataset.horizon})
    return EXIT_OK


def cmd_train(args) -> int:
    t0 = time.time()
    params = _params_from_args(args)
    dataset = lp_mod.load_oracle_dataset(args.oracle, params,
                                         co.DesignSpace.default())
    hyper = agent_mod.AgentHyperparams(
        epochs=args.epochs, warmup_steps=args.warmup_steps,
        batch_size=args.batch_size)
    model = agent_mod.train_agent(dataset, hyper, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    agent_mod.save_model(model, out / "model.npz")
    write_csv(out / "loss_curves.csv",
              ["epoch", "actor_val_nll", "critic_val_nll"],
              ([i, a, c] for i, (a, c) in enumerate(
                  zip(model.meta["actor_val_nll"], model.meta["critic_val_nll"]))))
    if args.baseline:
        bc = agent_mod.behavior_clone_baseline(
            dataset, agent_mod.BcHyperparams(epochs=args.epochs), seed=args.seed)
        np.savez(out / "baseline.npz",
                 **{f"w{i}": w for i, w in enumerate(bc.net.weights)},
                 **{f"b{i}": b for i, b in enumerate(bc.net.biases)})
    write_manifest(out, "train", {"oracle": Path(args.oracle) / "manifest.json"},
                   seed=args.seed, wall_time_s=time.time() - t0,
                   extra={"epochs": args.epochs,
                          "dataset_hash": model.meta["dataset_hash"],
                          "final_actor_nll": model.meta["actor_val_nll"][-1],
                          "final_critic_nll": model.meta["critic_val_nll"][-1]})
    return EXIT_OK


def _trajectory_rows(traj):
    for t in range(traj.horizon):
        yield [t, traj.p_r[t], traj.g[t], traj.soc[t], traj.h[t], traj.b[t],
               traj.p_pem[t], traj.f_u[t], traj.f_s[t], traj.r[t], traj.c[t],
               traj.rtg[t], traj.ctg[t]]


def cmd_operate(args) -> int:
    t0 = time.time()
    params = _params_from_args(args)
    model = agent_mod.load_model(args.model)
    design = _design_from_json(args.design, params)
    scenario = scenario_from_csv(args.scenario, region=args.region)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.mode == "online":
        pool_files = sorted(Path(args.pool).glob("scenario_*.csv"))
        pool = [scenario_from_csv(f, region=args.region) for f in pool_files]
        traj, risk = agent_mod.online_operate(
            model, design, scenario, pool, params,
            n_action_samples=args.n_samples, m_tokens=args.m_tokens,
            f_update=args.f_update, seed=args.seed)
        write_csv(out / "risk.csv", ["t", "risk"],
                  ([t, risk[t]] for t in range(len(risk))))
    else:
        traj = agent_mod.offline_operate(
            model, design, scenario, params,
            n_action_samples=args.n_samples, seed=args.seed)
    write_csv(out / "trajectory.csv", list(lp_mod.TRAJECTORY_COLUMNS),
              _trajectory_rows(traj))
    write_manifest(out, "operate",
                   {"model": args.model, "design": args.design,
                    "scenario": args.scenario},
                   seed=args.seed, wall_time_s=time.time() - t0,
                   extra={"mode": args.mode, "profit": traj.profit,
                          "net_carbon": traj.net_carbon,
                          "plant_feasible": traj.feasible})
    return EXIT_OK


def cmd_evaluate(args) -> int:
    t0 = time.time()
    params = _params_from_args(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.toy:
        design, scenarios = _toy_fixture(params)
    else:
        design = _design_from_json(args.design, params)
        files = sorted(Path(args.scenarios).glob("scenario_*.csv"))
        scenarios = [scenario_from_csv(f, region=args.region) for f in files]
    instances = [(design, s) for s in scenarios]
    refs = []
    for design_i, scenario in instances:
        sol, _ = lp_mod.solve_instance(design_i, scenario, params)
        if sol.status != "optimal":
            raise RuntimeError(f"LP reference not optimal: {sol.status}")
        refs.append((sol.objective, sol.net_carbon))

    model = None
    if args.policy in ("agent-offline", "agent-online"):
        model = agent_mod.load_model(args.model)
        mode = "offline" if args.policy == "agent-offline" else "online"
    elif args.policy == "bc":
        raise ValueError("bc evaluation is exposed through the python API")
    else:
        mode = "lp-replay"
    kwargs = {}
    if mode == "online":
        pool_files = sorted(Path(args.pool).glob("scenario_*.csv"))
        kwargs["candidate_pool"] = [scenario_from_csv(f, region=args.region)
                                    for f in pool_files]
    report = agent_mod.evaluate_policy(
        model, instances, params, refs, mode=mode,
        n_action_samples=args.n_samples, seed=args.seed, **kwargs)
    header = list(report.rows[0].keys())
    write_csv(out / "report.csv", header,
              ([row[k] for k in header] for row in report.rows))
    write_json(out / "summary.json", report.summary)
    if len(report.risk_accuracy):
        write_csv(out / "risk_accuracy.csv", ["t", "accuracy"],
                  ([t, v] for t, v in enumerate(report.risk_accuracy)))
    write_manifest(out, "evaluate", {}, seed=args.seed,
                   wall_time_s=time.time() - t0, extra=report.summary)
    return EXIT_OK


def cmd_co_optimize(args) -> int:
    t0 = time.time()
    params = _params_from_args(args)
    cfg_file = _load_config_file(args.config)
    config = co.CoOptimizeConfig(
        params=params,
        mode=cfg_file.get("mode", args.mode),
        iterations=cfg_file.get("iterations", args.iterations),
        batch_size=cfg_file.get("batch_size", args.batch),
        n_scenarios=cfg_file.get("n_scenarios", args.m),
        alpha_chance=cfg_file.get("alpha_chance", args.alpha_chance),
        seed=cfg_file.get("seed", args.seed),
        workers=args.workers,
        n_action_samples=cfg_file.get("n_action_samples", args.n_samples),
    )
    horizon = cfg_file.get("horizon", args.horizon)
    source = _scenario_source_from_args(args, horizon)
    model = agent_mod.load_model(args.model) if args.model else None
    if config.mode == "agent" and model is None:
        raise ValueError("agent mode requires --model")
    result = co.co_optimize(config, source, model=model, out_dir=args.out)
    write_manifest(Path(args.out), "co-optimize",
                   {"config": args.config} if args.config else {},
                   seed=config.seed, wall_time_s=time.time() - t0,
                   extra={"n_evaluations": len(result.evaluations),
                          "n_front": len(result.front), "mode": config.mode})
    return EXIT_OK


def cmd_bench(args) -> int:
    t0 = time.time()
    params = _params_from_args(args)
    sizes = [int(s) for s in args.sizes.split(",")]
    horizon = args.horizon
    source = desk_scenario_source(horizon=horizon)
    design = derive_pem_capacity(800.0, 0.25, 25.0, 400.0, params)

    if args.model:
        model = agent_mod.load_model(args.model)
    else:
        dataset = lp_mod.build_oracle_dataset(
            8, co.DesignSpace.default(), source, params, seed=args.seed)
        hyper = agent_mod.AgentHyperparams(epochs=3, warmup_steps=200)
        model = agent_mod.train_agent(dataset, hyper, seed=args.seed)

    rows = []
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for size in sizes:
        scenarios = source(size, args.seed + size)
        start = time.perf_counter()
        for scenario in scenarios:          # sequential LP solves
            sol = lp_mod.solve_lp(lp_mod.build_lp(design, scenario, params))
            if sol.status != "optimal":
                raise RuntimeError(f"bench LP not optimal: {sol.status}")
        lp_wall = time.perf_counter() - start
        start = time.perf_counter()
        agent_mod.operate_batch(model, design, scenarios, params,
                                n_action_samples=args.n_samples,
                                seed=args.seed)
        agent_wall = time.perf_counter() - start
        rows.append(["lp", size, lp_wall])
        rows.append(["agent", size, agent_wall])
        print(f"batch {size:5d}: lp {lp_wall:8.2f}s  agent {agent_wall:8.2f}s  "
              f"speedup x{lp_wall / agent_wall:.2f}")
    write_csv(out / "bench.csv", ["method", "batch_size", "wall_s"], rows)
    write_manifest(out, "bench", {}, seed=args.seed,
                   wall_time_s=time.time() - t0,
                   extra={"sizes": sizes, "horizon": horizon,
                          "n_action_samples": args.n_samples})
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser

def build_parser() -> _Parser:
    parser = _Parser(prog="p2m", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--region", default="dunkirk")
        p.add_argument("--params", help="JSON/TOML technical-parameter file")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("fetch-data", help="fetch wind (NASA POWER) or load price CSVs")
    common(p)
    p.add_argument("--kind", choices=["wind", "prices"], default="wind")
    p.add_argument("--start", default="2015-01-01")
    p.add_argument("--end", default="2024-12-31")
    p.add_argument("--cache-dir", default="cache")
    p.add_argument("--single-cell", action="store_true")
    p.add_argument("--prices-csv")
    p.set_defaults(func=cmd_fetch_data)

    p = sub.add_parser("gen-scenarios", help="bootstrap wind/price scenarios")
    common(p)
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--horizon", type=int, default=HOURS)
    p.add_argument("--block-len", type=int, default=48)
    p.add_argument("--jitter", type=float, default=0.05)
    p.add_argument("--wind-archive")
    p.add_argument("--price-archive")
    p.set_defaults(func=cmd_gen_scenarios)

    p = sub.add_parser("solve", help="solve the dispatch LP per scenario")
    common(p)
    p.add_argument("--design", help="design JSON file")
    p.add_argument("--scenarios", help="directory of scenario_*.csv")
    p.add_argument("--toy", action="store_true", help="bundled 3-scenario fixture")
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("build-oracle", help="LP-optimal trajectory dataset")
    common(p)
    p.add_argument("--n", type=int, default=32)
    p.add_argument("--horizon", type=int, default=HOURS)
    p.add_argument("--scenarios", help="directory of scenario_*.csv (else desk)")
    p.set_defaults(func=cmd_build_oracle)

    p = sub.add_parser("train", help="train the actor-critic agent")
    common(p)
    p.add_argument("--oracle", required=True, help="oracle dataset directory")
    p.add_argument("--epochs", type=int, default=100)
    p.add_argument("--warmup-steps", type=int, default=10_000)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--baseline", action="store_true",
                   help="also train the behavior-cloning baseline")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("operate", help="run one episode with a trained agent")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--design", required=True)
    p.add_argument("--scenario", required=True)
    p.add_argument("--mode", choices=["offline", "online"], default="offline")
    p.add_argument("--pool", help="scenario pool directory (online mode)")
    p.add_argument("--n-samples", type=int, default=32)
    p.add_argument("--m-tokens", type=int, default=64)
    p.add_argument("--f-update", type=int, default=24)
    p.set_defaults(func=cmd_operate)

    p = sub.add_parser("evaluate", help="score a policy against LP references")
    common(p)
    p.add_argument("--policy", choices=["agent-offline", "agent-online",
                                        "bc", "lp-replay"], default="lp-replay")
    p.add_argument("--model")
    p.add_argument("--design")
    p.add_argument("--scenarios")
    p.add_argument("--pool")
    p.add_argument("--toy", action="store_true")
    p.add_argument("--n-samples", type=int, default=32)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("co-optimize", help="chance-constrained design search")
    common(p)
    p.add_argument("--config", help="JSON/TOML co-optimization config")
    p.add_argument("--mode", choices=["lp", "agent"], default="lp")
    p.add_argument("--iterations", type=int, default=3)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--m", type=int, default=16, help="scenarios per design")
    p.add_argument("--alpha-chance", type=float, default=0.5)
    p.add_argument("--horizon", type=int, default=HOURS)
    p.add_argument("--scenarios")
    p.add_argument("--model")
    p.add_argument("--n-samples", type=int, default=32)
    p.set_defaults(func=cmd_co_optimize)

    p = sub.add_parser("bench", help="LP vs batched agent dispatch wall times")
    common(p)
    p.add_argument("--sizes", default="10,100,1000")
    p.add_argument("--horizon", type=int, default=HOURS)
    p.add_argument("--model")
    p.add_argument("--n-samples", type=int, default=4)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (FileNotFoundError, ValueError, KeyError) as exc:
        _emit_error("data", str(exc))
        return EXIT_DATA
    except (RuntimeError, np.linalg.LinAlgError, ConnectionError) as exc:
        _emit_error("numerical", str(exc))
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
