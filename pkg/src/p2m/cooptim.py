"""First-stage design search: per-design uncertainty quantification over
scenario sets, chance-constrained multi-objective proposals from Gaussian
process surrogates, and Pareto-front extraction.

Both objectives (expected levelized cost of methanol, expected net
emissions) are minimized subject to a chance constraint: the estimated
probability of non-negative net emissions must not exceed ``alpha_chance``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.stats import qmc

from .params import TechnicalParams
from .plant import DESIGN_BOUNDS, SystemDesign, derive_pem_capacity
from .scenarios import Scenario


@dataclass(frozen=True)
class DesignSpace:
    names: tuple[str, ...]
    lowers: np.ndarray
    uppers: np.ndarray
    units: tuple[str, ...]

    def __post_init__(self):
        if np.any(self.lowers >= self.uppers):
            raise ValueError("each lower bound must be < its upper bound")

    @classmethod
    def default(cls) -> "DesignSpace":
        names = tuple(DESIGN_BOUNDS)
        lo = np.array([DESIGN_BOUNDS[n][0] for n in names])
        hi = np.array([DESIGN_BOUNDS[n][1] for n in names])
        units = tuple(DESIGN_BOUNDS[n][2] for n in names)
        return cls(names, lo, hi, units)

    @classmethod
    def unit_box(cls, dim: int) -> "DesignSpace":
        return cls(tuple(f"x{i}" for i in range(dim)),
                   np.zeros(dim), np.ones(dim), tuple("-" * dim))

    @property
    def dim(self) -> int:
        return len(self.names)

    def normalize(self, raw) -> np.ndarray:
        raw = np.asarray(raw, dtype=float)
        return (raw - self.lowers) / (self.uppers - self.lowers)

    def denormalize(self, unit) -> np.ndarray:
        unit = np.asarray(unit, dtype=float)
        return self.lowers + unit * (self.uppers - self.lowers)

    def contains(self, raw) -> bool:
        raw = np.asarray(raw, dtype=float)
        return bool(np.all(raw >= self.lowers - 1e-12)
                    and np.all(raw <= self.uppers + 1e-12))

    def sample_lhs(self, n: int, seed: int = 0) -> np.ndarray:
        sampler = qmc.LatinHypercube(d=self.dim, seed=seed)
        return self.denormalize(sampler.random(n))


def indicator_positive(e: float) -> int:
    """1 iff net emissions are non-negative."""
    if not math.isfinite(e):
        raise ValueError(f"emissions must be finite, got {e}")
    return 1 if e >= 0.0 else 0


@dataclass(frozen=True)
class CostModel:
    """Linear capital-cost coefficients; values are configuration, not
    literature claims."""

    pem_usd_per_mw: float = 700_000.0
    bess_usd_per_mwh: float = 230_000.0
    cht_usd_per_kg: float = 750.0
    meoh_usd_per_kg_h: float = 12_000.0
    crf: float = 0.08          # capital recovery factor, annual
    fom_frac: float = 0.02     # fixed O&M as a fraction of CAPEX, annual

    def __post_init__(self):
        for name in ("pem_usd_per_mw", "bess_usd_per_mwh", "cht_usd_per_kg",
                     "meoh_usd_per_kg_h", "fom_frac"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not 0.0 < self.crf <= 1.0:
            raise ValueError("crf must be in (0, 1]")

    def capex(self, design: SystemDesign) -> float:
        return (self.pem_usd_per_mw * design.c_pem
                + self.bess_usd_per_mwh * design.c_bess
                + self.cht_usd_per_kg * design.c_cht
                + self.meoh_usd_per_kg_h * design.m_meoh)


def lcom(design: SystemDesign, monthly_profit: float, monthly_meoh: float,
         cost_model: CostModel) -> float:
    """Levelized cost of methanol, $/kg: monthly capital recovery plus fixed
    O&M, net of operating profit, per kg produced."""
    if monthly_meoh <= 0:
        raise ValueError(f"monthly_meoh must be > 0, got {monthly_meoh}")
    capex = cost_model.capex(design)
    monthly_fixed = (cost_model.crf * capex + cost_model.fom_frac * capex) / 12.0
    return (monthly_fixed - monthly_profit) / monthly_meoh


@dataclass
class UqResult:
    design: SystemDesign
    expected_lcom: float
    expected_emissions: float
    p_positive: float
    lcom_samples: np.ndarray
    emission_samples: np.ndarray
    n_scenarios: int
    mode: str                  # "lp" | "agent"
    n_failed: int = 0
    usable: bool = True


def uq_from_samples(design: SystemDesign, lcom_samples, emission_samples,
                    mode: str, n_failed: int = 0,
                    n_requested: int | None = None) -> UqResult:
    """Summarize per-scenario samples; the estimator of the chance constraint
    is exactly the indicator mean of the stored emission samples."""
    lcoms = np.asarray(lcom_samples, dtype=float)
    es = np.asarray(emission_samples, dtype=float)
    if len(lcoms) == 0:
        raise ValueError("no usable scenario samples")
    n_requested = n_requested if n_requested is not None else len(es) + n_failed
    usable = n_failed <= 0.10 * n_requested
    return UqResult(
        design=design,
        expected_lcom=float(lcoms.mean()),
        expected_emissions=float(es.mean()),
        p_positive=float(np.mean([indicator_positive(e) for e in es])),
        lcom_samples=lcoms, emission_samples=es,
        n_scenarios=len(es), mode=mode, n_failed=n_failed, usable=usable,
    )


def evaluate_design(
    design: SystemDesign,
    scenarios: list[Scenario],
    mode: str,
    params: TechnicalParams,
    cost_model: CostModel,
    model=None,
    workers: int = 1,
    seed: int = 0,
    n_action_samples: int = 32,
) -> UqResult:
    """Second-stage dispatch of one design over a scenario set.

    ``lp`` mode solves the full-horizon LP per scenario; ``agent`` mode runs
    the trained policy in its offline setting.  Failed scenarios are dropped
    with a count; results with >10% failures are flagged unusable.
    """
    if mode not in ("lp", "agent"):
        raise ValueError(f"mode must be 'lp' or 'agent', got {mode!r}")
    if mode == "agent" and model is None:
        raise ValueError("agent mode needs a trained model")

    jobs = [(design, s, params, mode, model, seed + i, n_action_samples)
            for i, s in enumerate(scenarios)]
    if workers > 1:
        from concurrent.futures import ProcessPoolExecutor
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_dispatch_one, jobs))
    else:
        outcomes = [_dispatch_one(job) for job in jobs]

    lcoms, emissions, n_failed = [], [], 0
    for outcome in outcomes:
        if outcome is None:
            n_failed += 1
            continue
        profit, net_e, horizon = outcome
        monthly_meoh = design.m_meoh * horizon
        lcoms.append(lcom(design, profit, monthly_meoh, cost_model))
        emissions.append(net_e)
    if not lcoms:
        # every scenario failed: an unusable sentinel, maximally risky
        return UqResult(design=design, expected_lcom=np.nan,
                        expected_emissions=np.nan, p_positive=1.0,
                        lcom_samples=np.array([]), emission_samples=np.array([]),
                        n_scenarios=0, mode=mode, n_failed=n_failed,
                        usable=False)
    return uq_from_samples(design, lcoms, emissions, mode,
                           n_failed=n_failed, n_requested=len(scenarios))


def _dispatch_one(job):
    from . import lp as lp_mod

    design, scenario, params, mode, model, seed, n_samples = job
    if mode == "lp":
        sol, traj = lp_mod.solve_instance(design, scenario, params)
        if traj is None:
            return None
        return sol.objective, sol.net_carbon, scenario.horizon
    from .agent import offline_operate

    traj = offline_operate(model, design, scenario, params,
                           n_action_samples=n_samples, seed=seed)
    if not traj.feasible:
        return None
    return traj.profit, traj.net_carbon, scenario.horizon


class GpRegressor:
    """RBF-kernel Gaussian process with hyperparameters picked by
    grid-searched log marginal likelihood; all algebra through Cholesky."""

    LENGTHSCALES = np.geomspace(0.05, 4.0, 10)
    NOISES = (1e-6, 1e-4, 1e-2, 1e-1)

    def __init__(self):
        self.x = None
        self.alpha = None
        self.chol = None
        self.lengthscale = None
        self.noise = None
        self.y_mean = 0.0
        self.y_std = 1.0

    @staticmethod
    def _kernel(xa, xb, lengthscale):
        d2 = ((xa[:, None, :] - xb[None, :, :]) ** 2).sum(axis=2)
        return np.exp(-0.5 * d2 / lengthscale**2)

    def fit(self, x, y) -> "GpRegressor":
        x = np.atleast_2d(np.asarray(x, dtype=float))
        y = np.asarray(y, dtype=float)
        self.x = x
        self.y_mean = float(y.mean())
        self.y_std = float(y.std())
        if self.y_std < 1e-12:
            self.y_std = 1.0
        z = (y - self.y_mean) / self.y_std
        best = (-np.inf, None, None, None, None)
        n = len(x)
        for ls in self.LENGTHSCALES:
            k_base = self._kernel(x, x, ls)
            for noise in self.NOISES:
                chol = self._chol_with_jitter(k_base + noise * np.eye(n))
                if chol is None:
                    continue
                alpha = np.linalg.solve(chol.T, np.linalg.solve(chol, z))
                lml = (-0.5 * z @ alpha - np.log(np.diag(chol)).sum()
                       - 0.5 * n * np.log(2 * np.pi))
                if lml > best[0]:
                    best = (lml, ls, noise, chol, alpha)
        if best[1] is None:
            raise RuntimeError("kernel matrix singular at every grid point")
        _, self.lengthscale, self.noise, self.chol, self.alpha = best
        return self

    @staticmethod
    def _chol_with_jitter(k):
        jitter = 0.0
        for _ in range(8):
            try:
                return np.linalg.cholesky(k + jitter * np.eye(len(k)))
            except np.linalg.LinAlgError:
                jitter = max(jitter * 10.0, 1e-10)
        return None

    def predict(self, xs) -> tuple[np.ndarray, np.ndarray]:
        xs = np.atleast_2d(np.asarray(xs, dtype=float))
        ks = self._kernel(xs, self.x, self.lengthscale)
        mean = ks @ self.alpha
        v = np.linalg.solve(self.chol, ks.T)
        var = np.maximum(1.0 + self.noise - (v**2).sum(axis=0), 1e-12)
        return (self.y_mean + self.y_std * mean,
                self.y_std * np.sqrt(var))


def propose_designs(
    history: list[tuple[SystemDesign, UqResult]],
    batch_n: int,
    alpha_chance: float = 0.5,
    seed: int = 0,
    design_space: DesignSpace | None = None,
    pool_size: int = 512,
    beta: float = 2.0,
) -> np.ndarray:
    """Next batch of raw design vectors.

    One GP per output (expected LCOM, expected emissions, p_positive) over
    the normalized box; candidates scored by randomly scalarized
    lower-confidence bounds weighted by the predicted probability of
    satisfying the chance constraint.  Falls back to Latin hypercube
    sampling while history is thin.
    """
    space = design_space if design_space is not None else DesignSpace.default()
    rng = np.random.default_rng(seed)
    history = [(d, r) for d, r in history if r.n_scenarios > 0]
    if len(history) < 2 * space.dim:
        return space.sample_lhs(batch_n, seed=seed)

    x = np.stack([space.normalize(d.raw()) for d, _ in history])
    gps = [
        GpRegressor().fit(x, np.array([r.expected_lcom for _, r in history])),
        GpRegressor().fit(x, np.array([r.expected_emissions for _, r in history])),
        GpRegressor().fit(x, np.array([r.p_positive for _, r in history])),
    ]
    pool = qmc.LatinHypercube(d=space.dim, seed=seed + 1).random(pool_size)
    mu1, sd1 = gps[0].predict(pool)
    mu2, sd2 = gps[1].predict(pool)
    mu3, sd3 = gps[2].predict(pool)
    lcb1 = _minmax(mu1 - beta * sd1)
    lcb2 = _minmax(mu2 - beta * sd2)
    from scipy.stats import norm
    p_feasible = norm.cdf((alpha_chance - mu3) / np.maximum(sd3, 1e-9))

    chosen: list[int] = []
    for _ in range(batch_n):
        w = rng.random()
        score = w * lcb1 + (1.0 - w) * lcb2
        utility = (1.0 - score) * p_feasible
        order = np.argsort(-utility, kind="stable")
        pick = next((int(i) for i in order if int(i) not in chosen), int(order[0]))
        chosen.append(pick)
    return space.denormalize(pool[chosen])


def _minmax(v: np.ndarray) -> np.ndarray:
    lo, hi = v.min(), v.max()
    if hi - lo < 1e-15:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


def pareto_front(results: list[UqResult], alpha_chance: float = 0.5) -> list[UqResult]:
    """Chance-feasible, non-dominated subset under (lcom, emissions)
    minimize/minimize; stable order by expected LCOM."""
    feasible = [r for r in results
                if r.n_scenarios > 0 and r.p_positive <= alpha_chance]
    if not feasible:
        return []
    order = sorted(range(len(feasible)),
                   key=lambda i: (feasible[i].expected_lcom,
                                  feasible[i].expected_emissions))
    front: list[UqResult] = []
    best_emis_strict = np.inf   # min emissions among strictly cheaper points
    i = 0
    while i < len(order):
        # group of equal-lcom points
        j = i
        lc = feasible[order[i]].expected_lcom
        while j < len(order) and feasible[order[j]].expected_lcom == lc:
            j += 1
        group = order[i:j]
        group_min = min(feasible[k].expected_emissions for k in group)
        if group_min < best_emis_strict:
            front.extend(feasible[k] for k in group
                         if feasible[k].expected_emissions == group_min)
        best_emis_strict = min(best_emis_strict, group_min)
        i = j
    return front


def hypervolume_2d(points, ref) -> float:
    """Dominated hypervolume of a 2-objective minimization front w.r.t. a
    reference point."""
    pts = np.asarray(points, dtype=float).reshape(-1, 2)
    ref = np.asarray(ref, dtype=float)
    pts = pts[(pts[:, 0] < ref[0]) & (pts[:, 1] < ref[1])]
    if len(pts) == 0:
        return 0.0
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]
    hv = 0.0
    y_prev = ref[1]
    for x, y in pts:
        if y < y_prev:
            hv += (ref[0] - x) * (y_prev - y)
            y_prev = y
    return float(hv)


@dataclass
class CoOptimizeConfig:
    params: TechnicalParams
    cost_model: CostModel = field(default_factory=CostModel)
    design_space: DesignSpace = field(default_factory=DesignSpace.default)
    mode: str = "lp"
    iterations: int = 3
    batch_size: int = 8
    n_scenarios: int = 16
    alpha_chance: float = 0.5
    seed: int = 0
    workers: int = 1
    n_action_samples: int = 32


@dataclass
class CoOptimizeResult:
    evaluations: list[UqResult]
    front: list[UqResult]
    config: CoOptimizeConfig


def co_optimize(
    config: CoOptimizeConfig,
    scenario_source,
    model=None,
    out_dir: str | Path | None = None,
) -> CoOptimizeResult:
    """Full design-search loop: sample designs, quantify each over a common
    scenario set, refit surrogates, propose the next batch.

    The same scenarios (common random numbers) are reused for every design
    within one iteration to reduce comparison variance.  Every evaluation is
    persisted before the next iteration starts.
    """
    rng = np.random.default_rng(config.seed)
    history: list[tuple[SystemDesign, UqResult]] = []
    evaluations: list[UqResult] = []

    for iteration in range(config.iterations):
        if iteration == 0:
            raw_batch = config.design_space.sample_lhs(
                config.batch_size, seed=config.seed)
        else:
            raw_batch = propose_designs(
                history, config.batch_size, alpha_chance=config.alpha_chance,
                seed=config.seed + iteration, design_space=config.design_space)
        scenario_seed = int(rng.integers(2**63 - 1))
        scenarios = scenario_source(config.n_scenarios, scenario_seed)
        for raw in raw_batch:
            design = derive_pem_capacity(*raw, config.params)
            result = evaluate_design(
                design, scenarios, config.mode, config.params,
                config.cost_model, model=model, workers=config.workers,
                seed=int(rng.integers(2**31 - 1)),
                n_action_samples=config.n_action_samples)
            history.append((design, result))
            evaluations.append(result)
        if out_dir is not None:
            _persist_run(out_dir, config, evaluations,
                         pareto_front(evaluations, config.alpha_chance))

    front = pareto_front(evaluations, config.alpha_chance)
    if out_dir is not None:
        _persist_run(out_dir, config, evaluations, front)
    return CoOptimizeResult(evaluations=evaluations, front=front, config=config)


_EVAL_HEADER = ["design_id", "m_meoh", "alpha_pem", "c_bess", "c_cht", "c_pem",
                "expected_lcom", "expected_emissions", "p_positive",
                "n_scenarios", "n_failed", "usable", "mode"]


def _persist_run(out_dir, config: CoOptimizeConfig,
                 evaluations: list[UqResult], front: list[UqResult]) -> None:
    from .artifacts import write_csv, write_json

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", {
        "mode": config.mode, "iterations": config.iterations,
        "batch_size": config.batch_size, "n_scenarios": config.n_scenarios,
        "alpha_chance": config.alpha_chance, "seed": config.seed,
        "workers": config.workers, "params": config.params,
        "cost_model": config.cost_model,
        "design_space": {"names": list(config.design_space.names),
                         "lowers": config.design_space.lowers,
                         "uppers": config.design_space.uppers},
    })

    def rows(results):
        for i, r in enumerate(results):
            d = r.design
            yield [i, d.m_meoh, d.alpha_pem, d.c_bess, d.c_cht, d.c_pem,
                   r.expected_lcom, r.expected_emissions, r.p_positive,
                   r.n_scenarios, r.n_failed, r.usable, r.mode]

    write_csv(out / "evaluations.csv", _EVAL_HEADER, rows(evaluations))
    samples_dir = out / "samples"
    for i, r in enumerate(evaluations):
        write_csv(samples_dir / f"design_{i:03d}.csv",
                  ["scenario", "lcom", "net_emissions"],
                  ([k, r.lcom_samples[k], r.emission_samples[k]]
                   for k in range(r.n_scenarios)))
    write_csv(out / "pareto.csv", _EVAL_HEADER, rows(front))
    write_json(out / "pareto.json", {
        "alpha_chance": config.alpha_chance,
        "points": [
            {"m_meoh": r.design.m_meoh, "alpha_pem": r.design.alpha_pem,
             "c_bess": r.design.c_bess, "c_cht": r.design.c_cht,
             "c_pem": r.design.c_pem, "expected_lcom": r.expected_lcom,
             "expected_emissions": r.expected_emissions,
             "p_positive": r.p_positive}
            for r in front
        ],
    })
