"""Full-horizon dispatch LP: build, solve, and convert to oracle trajectories.

Decision variables, per hour t (plus terminal storage states):

    p_g, p_ex          grid import / export, MW
    p_c, p_d           battery charge / discharge, MW (both >= 0)
    p_pem              electrolyzer load, MW
    h_use              hydrogen withdrawn from the tank, kg (= f_u * h, linearized)
    h_store, h_sell    surplus hydrogen stored / sold, kg
    h_sur              surplus hydrogen, kg
    soc, h             storage states (soc: fraction, h: kg), with index 0..T

The bilinear terms f_u*H and f_s*H_sur of the simulation model are
linearized through the amount variables h_use (with h_use <= h) and
h_store/h_sell (with h_store + h_sell = h_sur), which makes the problem
literally linear; the ratios are recovered after solving.

Rows:
    balance[t]   p_g - p_ex - p_c + p_d - p_pem - (spc_h2/1000) h_store = load - p_r
    hsur[t]      h_sur - h_use - (1000/sp_h2) p_pem = -gamma_h * m_meoh
    split[t]     h_store + h_sell - h_sur = 0
    tank[t]      h[t+1] - h[t] + h_use - h_store = 0
    socdyn[t]    soc[t+1] = (1-eta_l)(soc[t] + eta_c p_c / C - p_d / (eta_d C))
    use[t]       h_use <= h[t]
    carbon       eps_g * sum(p_g) <= T * gamma_c * m_meoh / 1000

Objective (maximized): sum_t [ g_t (p_ex - p_g) + h_price * h_sell
                               - tau_c * eps_g * p_g ].

No terminal value is assigned to stored energy; the final soc/h are simply
unpriced.  Simultaneous charge/discharge is left unconstrained (it is never
optimal while eta_c * eta_d < 1) and is checked during conversion.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

from .params import TechnicalParams
from .plant import (
    HOURS, SOC_MAX, SOC_MIN, TOL, SystemDesign, Trajectory,
    assemble_trajectory, derive_pem_capacity, step_arrays,
)
from .scenarios import Scenario

VAR_GROUPS = ("p_g", "p_ex", "p_c", "p_d", "p_pem", "h_use", "h_store",
              "h_sell", "h_sur", "soc", "h")


@dataclass
class LpInstance:
    design: SystemDesign
    scenario: Scenario
    params: TechnicalParams
    horizon: int
    soc0: float
    h0: float
    c: np.ndarray                  # objective for the minimizer (negated profit)
    a_eq: sparse.csr_matrix
    b_eq: np.ndarray
    a_ub: sparse.csr_matrix
    b_ub: np.ndarray
    lb: np.ndarray
    ub: np.ndarray
    row_labels_eq: list[str]
    row_labels_ub: list[str]

    def var_slice(self, name: str) -> slice:
        t = self.horizon
        i = VAR_GROUPS.index(name)
        if name in ("soc", "h"):
            start = 9 * t + (0 if name == "soc" else t + 1)
            return slice(start, start + t + 1)
        return slice(i * t, (i + 1) * t)

    @property
    def n_vars(self) -> int:
        return 11 * self.horizon + 2


@dataclass
class LpSolution:
    status: str                    # optimal | infeasible | unbounded | failed
    objective: float               # maximized profit, $
    net_carbon: float              # net emissions over the horizon, ton
    variables: dict[str, np.ndarray]
    max_residual: float
    certificate_rows: list[str]


def build_lp(
    design: SystemDesign,
    scenario: Scenario,
    params: TechnicalParams,
    soc0: float = 0.5,
    h0: float | None = None,
) -> LpInstance:
    t_n = scenario.horizon
    if h0 is None:
        h0 = 0.5 * design.c_cht
    p_r = scenario.power
    g = scenario.price
    m = design.m_meoh
    meoh_load = m * params.sp_meoh / 1000.0
    n = 11 * t_n + 2

    def idx(name: str, t: int) -> int:
        i = VAR_GROUPS.index(name)
        if name == "soc":
            return 9 * t_n + t
        if name == "h":
            return 10 * t_n + 1 + t
        return i * t_n + t

    rows_eq, cols_eq, vals_eq, b_eq, labels_eq = [], [], [], [], []
    rows_ub, cols_ub, vals_ub, b_ub, labels_ub = [], [], [], [], []

    def eq(entries, rhs, label):
        r = len(b_eq)
        for col, val in entries:
            rows_eq.append(r), cols_eq.append(col), vals_eq.append(val)
        b_eq.append(rhs)
        labels_eq.append(label)

    def ub(entries, rhs, label):
        r = len(b_ub)
        for col, val in entries:
            rows_ub.append(r), cols_ub.append(col), vals_ub.append(val)
        b_ub.append(rhs)
        labels_ub.append(label)

    decay = 1.0 - params.eta_l
    for t in range(t_n):
        eq([(idx("p_g", t), 1.0), (idx("p_ex", t), -1.0),
            (idx("p_c", t), -1.0), (idx("p_d", t), 1.0),
            (idx("p_pem", t), -1.0),
            (idx("h_store", t), -params.spc_h2 / 1000.0)],
           meoh_load - p_r[t], f"balance[{t}]")
        eq([(idx("h_sur", t), 1.0), (idx("h_use", t), -1.0),
            (idx("p_pem", t), -1000.0 / params.sp_h2)],
           -params.gamma_h * m, f"hsur[{t}]")
        eq([(idx("h_store", t), 1.0), (idx("h_sell", t), 1.0),
            (idx("h_sur", t), -1.0)],
           0.0, f"split[{t}]")
        eq([(idx("h", t + 1), 1.0), (idx("h", t), -1.0),
            (idx("h_use", t), 1.0), (idx("h_store", t), -1.0)],
           0.0, f"tank[{t}]")
        eq([(idx("soc", t + 1), 1.0), (idx("soc", t), -decay),
            (idx("p_c", t), -decay * params.eta_c / design.c_bess),
            (idx("p_d", t), decay / (params.eta_d * design.c_bess))],
           0.0, f"socdyn[{t}]")
        ub([(idx("h_use", t), 1.0), (idx("h", t), -1.0)], 0.0, f"use[{t}]")
    ub([(idx("p_g", t), params.eps_g) for t in range(t_n)],
       t_n * params.gamma_c * m / 1000.0, "carbon")

    cost = np.zeros(n)
    sl = lambda name: slice(VAR_GROUPS.index(name) * t_n,
                            (VAR_GROUPS.index(name) + 1) * t_n)
    cost[sl("p_g")] = g + params.tau_c * params.eps_g   # minimize => negate profit
    cost[sl("p_ex")] = -g
    cost[sl("h_sell")] = -params.h_price

    lb = np.zeros(n)
    ubound = np.full(n, np.inf)
    b_max = params.alpha * design.c_bess
    ubound[sl("p_c")] = b_max
    ubound[sl("p_d")] = b_max
    ubound[sl("p_pem")] = design.c_pem
    ubound[sl("h_use")] = design.c_cht
    soc_sl = slice(9 * t_n, 10 * t_n + 1)
    h_sl = slice(10 * t_n + 1, 11 * t_n + 2)
    lb[soc_sl] = SOC_MIN
    ubound[soc_sl] = SOC_MAX
    lb[h_sl] = 0.0
    ubound[h_sl] = design.c_cht
    lb[9 * t_n] = ubound[9 * t_n] = soc0          # pinned initial states
    lb[10 * t_n + 1] = ubound[10 * t_n + 1] = h0

    a_eq = sparse.csr_matrix(
        (vals_eq, (rows_eq, cols_eq)), shape=(len(b_eq), n))
    a_ub = sparse.csr_matrix(
        (vals_ub, (rows_ub, cols_ub)), shape=(len(b_ub), n))
    return LpInstance(
        design=design, scenario=scenario, params=params, horizon=t_n,
        soc0=soc0, h0=h0, c=cost, a_eq=a_eq, b_eq=np.array(b_eq),
        a_ub=a_ub, b_ub=np.array(b_ub), lb=lb, ub=ubound,
        row_labels_eq=labels_eq, row_labels_ub=labels_ub,
    )


_SOLVER_OPTIONS = {
    "presolve": True,
    "primal_feasibility_tolerance": 1e-9,
    "dual_feasibility_tolerance": 1e-9,
}


def solve_lp(instance: LpInstance, diagnose: bool = True) -> LpSolution:
    """Solve to optimality; statuses are reported honestly and infeasible
    instances come back with the violated row labels."""
    res = linprog(
        instance.c, A_ub=instance.a_ub, b_ub=instance.b_ub,
        A_eq=instance.a_eq, b_eq=instance.b_eq,
        bounds=np.column_stack([instance.lb, instance.ub]),
        method="highs", options=_SOLVER_OPTIONS,
    )
    status = {0: "optimal", 2: "infeasible", 3: "unbounded"}.get(res.status, "failed")
    if status != "optimal":
        certificate = _diagnose_infeasible(instance) if (
            status == "infeasible" and diagnose) else []
        return LpSolution(status=status, objective=np.nan, net_carbon=np.nan,
                          variables={}, max_residual=np.nan,
                          certificate_rows=certificate)

    x = res.x
    variables = {name: np.array(x[instance.var_slice(name)]) for name in VAR_GROUPS}
    t_n = instance.horizon
    p = instance.params
    objective = -float(res.fun)
    net_carbon = float(
        p.eps_g * variables["p_g"].sum()
        - t_n * p.gamma_c * instance.design.m_meoh / 1000.0)

    r_eq = np.abs(instance.a_eq @ x - instance.b_eq)
    r_ub = np.maximum(instance.a_ub @ x - instance.b_ub, 0.0)
    r_lb = np.maximum(instance.lb - x, 0.0)
    r_ubnd = np.maximum(x - instance.ub, 0.0)
    max_residual = float(max(r_eq.max(initial=0.0), r_ub.max(initial=0.0),
                             r_lb.max(initial=0.0), r_ubnd.max(initial=0.0)))
    return LpSolution(status="optimal", objective=objective,
                      net_carbon=net_carbon, variables=variables,
                      max_residual=max_residual, certificate_rows=[])


def _diagnose_infeasible(instance: LpInstance) -> list[str]:
    """Elastic reformulation: minimize total constraint slack; rows needing
    positive slack certify the infeasibility."""
    n = instance.n_vars
    m_eq = len(instance.b_eq)
    m_ub = len(instance.b_ub)
    eye_eq = sparse.eye(m_eq, format="csr")
    a_eq = sparse.hstack(
        [instance.a_eq, eye_eq, -eye_eq, sparse.csr_matrix((m_eq, m_ub))],
        format="csr")
    a_ub = sparse.hstack(
        [instance.a_ub, sparse.csr_matrix((m_ub, 2 * m_eq)),
         -sparse.eye(m_ub, format="csr")], format="csr")
    n_slack = 2 * m_eq + m_ub
    cost = np.concatenate([np.zeros(n), np.ones(n_slack)])
    lb = np.concatenate([instance.lb, np.zeros(n_slack)])
    ub = np.concatenate([instance.ub, np.full(n_slack, np.inf)])
    res = linprog(cost, A_ub=a_ub, b_ub=instance.b_ub, A_eq=a_eq,
                  b_eq=instance.b_eq, bounds=np.column_stack([lb, ub]),
                  method="highs")
    if res.status != 0:
        return ["<elastic solve failed>"]
    slack = res.x[n:]
    labels = instance.row_labels_eq + instance.row_labels_eq + instance.row_labels_ub
    flagged = []
    for i in np.flatnonzero(slack > 1e-6):
        if labels[i] not in flagged:
            flagged.append(labels[i])
    return flagged


def solution_to_trajectory(sol: LpSolution, instance: LpInstance) -> Trajectory:
    """Recover the simulation-model actions from an optimal solution and
    replay them through the plant step; mismatch beyond tolerance signals a
    linearization bug and raises."""
    if sol.status != "optimal":
        raise ValueError(f"cannot convert a {sol.status} solution")
    v = sol.variables
    t_n = instance.horizon
    design, params = instance.design, instance.params
    h_lp = v["h"][:-1]
    soc_lp = v["soc"][:-1]
    f_u = np.where(h_lp > TOL, v["h_use"] / np.maximum(h_lp, TOL), 0.0)
    f_s = np.where(v["h_sur"] > TOL, v["h_store"] / np.maximum(v["h_sur"], TOL), 0.0)
    f_u = np.clip(f_u, 0.0, 1.0)
    f_s = np.clip(f_s, 0.0, 1.0)
    b = v["p_c"] - v["p_d"]

    soc_sim = np.empty(t_n + 1)
    h_sim = np.empty(t_n + 1)
    soc_sim[0], h_sim[0] = instance.soc0, instance.h0
    r = np.empty(t_n)
    c = np.empty(t_n)
    p_g = np.empty(t_n)
    p_ex = np.empty(t_n)
    h_sur = np.empty(t_n)
    feasible = np.empty(t_n, dtype=bool)
    for t in range(t_n):
        out = step_arrays(
            soc_sim[t], h_sim[t], b[t], v["p_pem"][t], f_u[t], f_s[t],
            instance.scenario.power[t], instance.scenario.price[t],
            design, params)
        soc_sim[t + 1] = out["soc_next"]
        h_sim[t + 1] = out["h_next"]
        r[t] = out["r"]
        c[t] = out["c"]
        p_g[t] = out["p_g"]
        p_ex[t] = out["p_ex"]
        h_sur[t] = out["h_sur"]
        feasible[t] = out["feasible"]

    drift_soc = np.abs(soc_sim - v["soc"]).max()
    drift_h = np.abs(h_sim - v["h"]).max()
    if max(drift_soc, drift_h) > 1e-6:
        raise RuntimeError(
            f"replay mismatch: soc drift {drift_soc:.3e}, h drift {drift_h:.3e}")

    return assemble_trajectory(
        instance.scenario.power, instance.scenario.price,
        soc_sim[:-1], h_sim[:-1], b, v["p_pem"], f_u, f_s, r, c,
        p_g, p_ex, h_sur, feasible,
        final_soc=soc_sim[-1], final_h=h_sim[-1],
    )


def solve_instance(
    design: SystemDesign,
    scenario: Scenario,
    params: TechnicalParams,
    soc0: float = 0.5,
    h0: float | None = None,
) -> tuple[LpSolution, Trajectory | None]:
    instance = build_lp(design, scenario, params, soc0=soc0, h0=h0)
    sol = solve_lp(instance)
    if sol.status != "optimal":
        return sol, None
    return sol, solution_to_trajectory(sol, instance)


@dataclass
class OracleInstance:
    index: int
    design: SystemDesign
    scenario: Scenario
    trajectory: Trajectory
    objective: float
    net_carbon: float
    d_token: np.ndarray     # normalized design
    e_token: np.ndarray     # renewable trend token


@dataclass
class OracleDataset:
    instances: list[OracleInstance]
    seed: int
    params: TechnicalParams
    horizon: int
    n_failed: int
    warnings: list[str]

    def __len__(self) -> int:
        return len(self.instances)


def _solve_one(args):
    design, scenario, params = args
    try:
        sol, traj = solve_instance(design, scenario, params)
    except RuntimeError as exc:
        return None, f"conversion failed: {exc}"
    if traj is None:
        return None, f"status {sol.status}: {sol.certificate_rows[:3]}"
    return (sol, traj), None


def build_oracle_dataset(
    n_instances: int,
    design_space,
    scenario_source,
    params: TechnicalParams,
    seed: int = 0,
    resample_budget: int | None = None,
    workers: int = 1,
    out_dir: str | Path | None = None,
) -> OracleDataset:
    """Sample (design, scenario) pairs, solve each LP, convert to
    trajectories.

    Designs come from Latin hypercube sampling over the design space;
    scenarios from ``scenario_source(count, seed)``.  Infeasible or failed
    instances are logged and resampled from the same seeded stream until the
    resample budget runs out, in which case a partial dataset is returned
    with a warning count.
    """
    if resample_budget is None:
        resample_budget = 4 * n_instances
    master = np.random.default_rng(seed)
    raw_designs = design_space.sample_lhs(n_instances, seed=seed)
    scenarios = scenario_source(n_instances, int(master.integers(2**63 - 1)))

    pending = [
        (derive_pem_capacity(*raw_designs[i], params), scenarios[i])
        for i in range(n_instances)
    ]
    instances: list[OracleInstance] = []
    warnings: list[str] = []
    n_failed = 0
    attempts = 0
    while pending and attempts <= resample_budget + n_instances:
        batch = pending
        pending = []
        if workers > 1:
            from concurrent.futures import ProcessPoolExecutor
            with ProcessPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(
                    _solve_one, [(d, s, params) for d, s in batch]))
        else:
            results = [_solve_one((d, s, params)) for d, s in batch]
        for (design, scenario), (result, err) in zip(batch, results):
            attempts += 1
            if result is None:
                n_failed += 1
                warnings.append(f"instance failed ({err}); resampled")
                if n_failed <= resample_budget:
                    raw = design_space.denormalize(master.random(4))
                    new_design = derive_pem_capacity(*raw, params)
                    new_scn = scenario_source(
                        1, int(master.integers(2**63 - 1)))[0]
                    pending.append((new_design, new_scn))
                continue
            sol, traj = result
            instances.append(OracleInstance(
                index=len(instances), design=design, scenario=scenario,
                trajectory=traj, objective=sol.objective,
                net_carbon=sol.net_carbon,
                d_token=design_space.normalize(design.raw()),
                e_token=scenario.trend,
            ))
            if len(instances) == n_instances:
                pending = []
                break

    if len(instances) < n_instances:
        warnings.append(
            f"resample budget exhausted: {len(instances)}/{n_instances} built")
    dataset = OracleDataset(
        instances=instances, seed=seed, params=params,
        horizon=instances[0].trajectory.horizon if instances else 0,
        n_failed=n_failed, warnings=warnings,
    )
    if out_dir is not None:
        persist_oracle_dataset(dataset, out_dir)
    return dataset


TRAJECTORY_COLUMNS = ("t", "p_r", "g", "soc", "h", "b", "p_pem", "f_u",
                      "f_s", "r", "c", "RTG", "CTG")


def persist_oracle_dataset(dataset: OracleDataset, out_dir: str | Path) -> Path:
    from .artifacts import param_hash, write_csv, write_json

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "manifest.json", {
        "seed": dataset.seed,
        "n_instances": len(dataset.instances),
        "n_failed": dataset.n_failed,
        "horizon": dataset.horizon,
        "param_hash": param_hash(dataset.params),
        "warnings": dataset.warnings,
    })
    e_len = len(dataset.instances[0].e_token) if dataset.instances else 0
    header = (["instance", "m_meoh", "alpha_pem", "c_bess", "c_cht", "c_pem"]
              + [f"D{i}" for i in range(4)]
              + ["objective", "net_carbon"]
              + [f"E{i}" for i in range(e_len)])
    rows = []
    for inst in dataset.instances:
        d = inst.design
        rows.append([inst.index, d.m_meoh, d.alpha_pem, d.c_bess, d.c_cht,
                     d.c_pem, *inst.d_token, inst.objective, inst.net_carbon,
                     *inst.e_token])
    write_csv(out / "designs.csv", header, rows)
    for inst in dataset.instances:
        tr = inst.trajectory
        t_rows = [
            [t, tr.p_r[t], tr.g[t], tr.soc[t], tr.h[t], tr.b[t], tr.p_pem[t],
             tr.f_u[t], tr.f_s[t], tr.r[t], tr.c[t], tr.rtg[t], tr.ctg[t]]
            for t in range(tr.horizon)
        ]
        write_csv(out / f"instance_{inst.index:04d}.csv",
                  list(TRAJECTORY_COLUMNS), t_rows)
    return out


def load_oracle_dataset(path: str | Path, params: TechnicalParams,
                        design_space) -> OracleDataset:
    """Rebuild an OracleDataset from its persisted directory."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    designs = np.genfromtxt(path / "designs.csv", delimiter=",", names=True)
    designs = np.atleast_1d(designs)
    instances = []
    for row in designs:
        i = int(row["instance"])
        data = np.genfromtxt(path / f"instance_{i:04d}.csv",
                             delimiter=",", names=True)
        design = SystemDesign(
            m_meoh=float(row["m_meoh"]), alpha_pem=float(row["alpha_pem"]),
            c_bess=float(row["c_bess"]), c_cht=float(row["c_cht"]),
            c_pem=float(row["c_pem"]))
        scenario = Scenario(
            wind=np.full(len(data["p_r"]), np.nan), power=data["p_r"],
            price=data["g"], region=manifest.get("region", "desk"),
            trend=np.array([row[f"E{k}"]
                            for k in range(len([n for n in designs.dtype.names
                                                if n.startswith("E")]))]))
        # final states are not persisted; recompute nothing, mark unknown
        traj = assemble_trajectory(
            data["p_r"], data["g"], data["soc"], data["h"], data["b"],
            data["p_pem"], data["f_u"], data["f_s"], data["r"], data["c"],
            np.zeros_like(data["r"]), np.zeros_like(data["r"]),
            np.zeros_like(data["r"]),
            np.ones(len(data["r"]), dtype=bool),
            final_soc=np.nan, final_h=np.nan)
        instances.append(OracleInstance(
            index=i, design=design, scenario=scenario, trajectory=traj,
            objective=float(row["objective"]),
            net_carbon=float(row["net_carbon"]),
            d_token=np.array([row[f"D{k}"] for k in range(4)]),
            e_token=scenario.trend))
    return OracleDataset(
        instances=instances, seed=int(manifest["seed"]), params=params,
        horizon=int(manifest["horizon"]), n_failed=int(manifest["n_failed"]),
        warnings=list(manifest.get("warnings", [])))
