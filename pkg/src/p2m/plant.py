"""One-hour plant physics: power balance, hydrogen accounting, battery dynamics.

State and action conventions:

    state  s = (soc, h)           battery state of charge (fraction), stored H2 (kg)
    action a = (b, p_pem, f_u, f_s)
        b      signed battery power, MW (b > 0 charge, b < 0 discharge)
        p_pem  electrolyzer load, MW
        f_u    fraction of stored hydrogen withdrawn this hour, in [0, 1]
        f_s    fraction of surplus hydrogen sent to the tank, in [0, 1]

One hour resolves as:

    h_sur = f_u*h + p_pem*1000/sp_h2 - gamma_h*m_meoh          (kg/h)
    h'    = (1 - f_u)*h + f_s*h_sur                            (kg)
    p_h   = f_s*h_sur*spc_h2/1000                              (MW, compression)
    residual = charge - discharge + p_pem + p_h + meoh_load - p_r
    p_g = max(residual, 0), p_ex = max(-residual, 0)           (grid closure)
    soc'  = (soc + eta_c*charge/C - discharge/(eta_d*C))*(1 - eta_l)

Hourly profit prices exports, hydrogen sales, and taxes gross grid emissions;
hourly carbon is net of the methanol unit's CO2 uptake, so that the
carbon-to-go at t=0 is the episode's net emissions:

    c_grid = eps_g * p_g                                       (ton)
    c      = c_grid - gamma_c*m_meoh/1000                      (ton, net)
    r      = g*(p_ex - p_g) + (1 - f_s)*max(h_sur, 0)*h_price - tau_c*c_grid

A step is infeasible when h_sur < -tol (not enough hydrogen for synthesis),
or the implied soc'/h' leave their bounds by more than tol.  The outcome
still carries a clipped next state so callers may choose clamp semantics.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .params import TechnicalParams

# Feasibility tolerance in natural units (MW, kg, fraction).
TOL = 1e-6

# Default monthly horizon, hours.
HOURS = 576

SOC_MIN, SOC_MAX = 0.1, 0.9

# Design-space box: (lower, upper, unit) per raw design field.
DESIGN_BOUNDS = {
    "m_meoh": (432.49, 2162.47, "kg/h"),
    "alpha_pem": (0.0, 1.0, "-"),
    "c_bess": (5.0, 100.0, "MWh"),
    "c_cht": (89.77, 1795.33, "kg"),
}


@dataclass(frozen=True)
class SystemDesign:
    """First-stage design vector plus the derived electrolyzer capacity."""

    m_meoh: float      # methanol production rate, kg/h
    alpha_pem: float   # PEM capacity ratio in [0, 1]
    c_bess: float      # battery capacity, MWh
    c_cht: float       # hydrogen tank capacity, kg
    c_pem: float       # derived electrolyzer capacity, MW

    def raw(self) -> np.ndarray:
        return np.array([self.m_meoh, self.alpha_pem, self.c_bess, self.c_cht])


@dataclass(frozen=True)
class PlantState:
    t: int       # hour index
    soc: float   # battery state of charge, fraction
    h: float     # stored hydrogen, kg


@dataclass(frozen=True)
class Action:
    b: float      # signed battery power, MW
    p_pem: float  # electrolyzer load, MW
    f_u: float    # stored-H2 utilization ratio
    f_s: float    # surplus-H2 storage ratio


ZERO_ACTION = Action(0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class ExogenousStep:
    p_r: float  # renewable power, MW
    g: float    # grid price, $/MWh


@dataclass(frozen=True)
class StepOutcome:
    next_state: PlantState
    r: float          # profit this hour, $
    c: float          # net carbon this hour, ton (grid emissions - MeOH uptake)
    c_grid: float     # grid-import emissions alone, ton
    p_g: float        # grid import, MW
    p_ex: float       # grid export, MW
    h_sur: float      # surplus hydrogen, kg/h (raw, may be negative if infeasible)
    feasible: bool
    violations: dict = field(default_factory=dict)


def pem_capacity_range(m_meoh: float, c_cht: float, params: TechnicalParams) -> tuple[float, float]:
    """(P_min, P_max) in MW: minimum load covering synthesis demand, plus
    headroom to charge the full tank within one hour."""
    p_min = params.gamma_h * m_meoh * params.sp_h2 / 1000.0
    p_max = p_min + c_cht * params.sp_h2 / 1000.0
    return p_min, p_max


def derive_pem_capacity(
    m_meoh: float,
    alpha_pem: float,
    c_bess: float,
    c_cht: float,
    params: TechnicalParams,
    check_bounds: bool = True,
) -> SystemDesign:
    """Build a SystemDesign from the raw 4-vector, deriving c_pem.

    c_pem = alpha_pem * (P_max - P_min) + P_min, which guarantees the
    electrolyzer can always cover the synthesis unit's hydrogen demand.
    """
    if check_bounds:
        raw = {"m_meoh": m_meoh, "alpha_pem": alpha_pem, "c_bess": c_bess, "c_cht": c_cht}
        for name, value in raw.items():
            lo, hi, unit = DESIGN_BOUNDS[name]
            if not lo - TOL <= value <= hi + TOL:
                raise ValueError(
                    f"{name}={value} {unit} outside design range [{lo}, {hi}]"
                )
    p_min, p_max = pem_capacity_range(m_meoh, c_cht, params)
    c_pem = alpha_pem * (p_max - p_min) + p_min
    return SystemDesign(m_meoh, alpha_pem, c_bess, c_cht, c_pem)


def clamp_action(
    action: Action, state: PlantState, design: SystemDesign, params: TechnicalParams
) -> Action:
    """Componentwise projection onto the action box; idempotent."""
    b_max = params.alpha * design.c_bess
    return Action(
        b=float(np.clip(action.b, -b_max, b_max)),
        p_pem=float(np.clip(action.p_pem, 0.0, design.c_pem)),
        f_u=float(np.clip(action.f_u, 0.0, 1.0)),
        f_s=float(np.clip(action.f_s, 0.0, 1.0)),
    )


def must_run_action(state: PlantState, design: SystemDesign,
                    params: TechnicalParams) -> Action:
    """The plant's idle floor: battery held at its band, no storage moves,
    and the electrolyzer exactly covering synthesis demand."""
    b, p_pem, f_u, f_s = repair_action_arrays(
        0.0, 0.0, 0.0, 0.0, state.soc, state.h, design, params)
    return Action(b=float(b), p_pem=float(p_pem), f_u=float(f_u), f_s=float(f_s))


def repair_action_arrays(b, p_pem, f_u, f_s, soc, h,
                         design: SystemDesign, params: TechnicalParams):
    """Project actions onto the plant-feasible set (vectorized).

    Beyond the action box this enforces, in order: the electrolyzer floor
    that keeps synthesis fed given the tank withdrawal, a storage ratio that
    cannot overfill the tank, and battery power trimmed so the state of
    charge stays inside its band.  Used where an executable action is
    mandatory (fallbacks, baseline policies); candidate screening keeps the
    plain box clamp and rejects instead.
    """
    b, p_pem, f_u, f_s, soc, h = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (b, p_pem, f_u, f_s, soc, h)))
    b_max = params.alpha * design.c_bess
    b = np.clip(b, -b_max, b_max)
    p_pem = np.clip(p_pem, 0.0, design.c_pem)
    f_u = np.clip(f_u, 0.0, 1.0)
    f_s = np.clip(f_s, 0.0, 1.0)

    demand = params.gamma_h * design.m_meoh
    pem_floor = np.maximum(demand - f_u * h, 0.0) * params.sp_h2 / 1000.0
    p_pem = np.maximum(p_pem, pem_floor)

    h_sur = f_u * h + p_pem * 1000.0 / params.sp_h2 - demand
    room = np.maximum(design.c_cht - (1.0 - f_u) * h, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        f_fit = np.where(h_sur > TOL, room / np.maximum(h_sur, TOL), 1.0)
    f_s = np.minimum(f_s, np.clip(f_fit, 0.0, 1.0))

    decay = 1.0 - params.eta_l
    charge_cap = np.maximum(
        (SOC_MAX / decay - soc) * design.c_bess / params.eta_c, 0.0)
    discharge_cap = np.maximum(
        (soc - SOC_MIN / decay) * design.c_bess * params.eta_d, 0.0)
    # at the floor, self-discharge alone would sink soc below bound: force
    # the sliver of charging that holds it
    charge_floor = np.maximum(
        (SOC_MIN / decay - soc) * design.c_bess / params.eta_c, 0.0)
    b = np.clip(b, np.where(charge_floor > 0.0, charge_floor, -discharge_cap),
                np.minimum(charge_cap, b_max))
    return b, p_pem, f_u, f_s


def step_arrays(
    soc, h, b, p_pem, f_u, f_s, p_r, g,
    design: SystemDesign, params: TechnicalParams,
):
    """Vectorized one-hour transition; all arguments broadcast elementwise.

    Returns a dict of arrays: soc_next, h_next, p_g, p_ex, h_sur, r, c,
    c_grid, feasible, viol_h_sur, viol_soc, viol_h.  Next states are clipped
    into bounds; the viol_* entries carry how far the raw update overshot.
    """
    soc = np.asarray(soc, dtype=float)
    h = np.asarray(h, dtype=float)
    b = np.asarray(b, dtype=float)
    p_pem = np.asarray(p_pem, dtype=float)
    f_u = np.asarray(f_u, dtype=float)
    f_s = np.asarray(f_s, dtype=float)
    p_r = np.asarray(p_r, dtype=float)
    g = np.asarray(g, dtype=float)

    charge = np.maximum(b, 0.0)
    discharge = np.maximum(-b, 0.0)

    pem_h2 = p_pem * 1000.0 / params.sp_h2                 # kg/h
    demand = params.gamma_h * design.m_meoh                # kg/h
    h_sur = f_u * h + pem_h2 - demand
    h_sur_eff = np.maximum(h_sur, 0.0)

    h_next_raw = (1.0 - f_u) * h + f_s * h_sur_eff
    p_h = f_s * h_sur_eff * params.spc_h2 / 1000.0         # MW

    meoh_load = design.m_meoh * params.sp_meoh / 1000.0    # MW
    residual = charge - discharge + p_pem + p_h + meoh_load - p_r
    p_g = np.maximum(residual, 0.0)
    p_ex = np.maximum(-residual, 0.0)

    soc_next_raw = (
        soc + params.eta_c * charge / design.c_bess
        - discharge / (params.eta_d * design.c_bess)
    ) * (1.0 - params.eta_l)

    c_grid = params.eps_g * p_g
    c = c_grid - params.gamma_c * design.m_meoh / 1000.0
    r = g * (p_ex - p_g) + (1.0 - f_s) * h_sur_eff * params.h_price - params.tau_c * c_grid

    soc_next = np.clip(soc_next_raw, SOC_MIN, SOC_MAX)
    h_next = np.clip(h_next_raw, 0.0, design.c_cht)

    viol_h_sur = np.maximum(-h_sur, 0.0)
    viol_soc = np.abs(soc_next_raw - soc_next)
    viol_h = np.abs(h_next_raw - h_next)
    feasible = (viol_h_sur <= TOL) & (viol_soc <= TOL) & (viol_h <= TOL)

    return {
        "soc_next": soc_next, "h_next": h_next,
        "p_g": p_g, "p_ex": p_ex, "h_sur": h_sur,
        "r": r, "c": c, "c_grid": c_grid,
        "feasible": feasible,
        "viol_h_sur": viol_h_sur, "viol_soc": viol_soc, "viol_h": viol_h,
    }


def step(
    state: PlantState,
    action: Action,
    exog: ExogenousStep,
    design: SystemDesign,
    params: TechnicalParams,
) -> StepOutcome:
    """Scalar one-hour transition; see the module docstring for the model."""
    out = step_arrays(
        state.soc, state.h, action.b, action.p_pem, action.f_u, action.f_s,
        exog.p_r, exog.g, design, params,
    )
    feasible = bool(out["feasible"])
    violations = {}
    if not feasible:
        for key in ("viol_h_sur", "viol_soc", "viol_h"):
            v = float(out[key])
            if v > TOL:
                violations[key.removeprefix("viol_")] = v
    return StepOutcome(
        next_state=PlantState(state.t + 1, float(out["soc_next"]), float(out["h_next"])),
        r=float(out["r"]),
        c=float(out["c"]),
        c_grid=float(out["c_grid"]),
        p_g=float(out["p_g"]),
        p_ex=float(out["p_ex"]),
        h_sur=float(out["h_sur"]),
        feasible=feasible,
        violations=violations,
    )


def default_initial_state(design: SystemDesign) -> PlantState:
    return PlantState(t=0, soc=0.5, h=0.5 * design.c_cht)


@dataclass
class Trajectory:
    """Per-hour record of one episode, with reverse-cumulative goal sums."""

    p_r: np.ndarray
    g: np.ndarray
    soc: np.ndarray     # state at the start of each hour
    h: np.ndarray
    b: np.ndarray
    p_pem: np.ndarray
    f_u: np.ndarray
    f_s: np.ndarray
    r: np.ndarray
    c: np.ndarray
    rtg: np.ndarray
    ctg: np.ndarray
    p_g: np.ndarray
    p_ex: np.ndarray
    h_sur: np.ndarray
    feasible_hours: np.ndarray   # bool per hour
    flagged_hours: np.ndarray    # bool per hour (fallback actions etc.)
    final_soc: float
    final_h: float

    @property
    def horizon(self) -> int:
        return len(self.r)

    @property
    def feasible(self) -> bool:
        return bool(self.feasible_hours.all())

    @property
    def profit(self) -> float:
        return float(self.rtg[0]) if self.horizon else 0.0

    @property
    def net_carbon(self) -> float:
        return float(self.ctg[0]) if self.horizon else 0.0

    def state_at(self, t: int) -> PlantState:
        if t == self.horizon:
            return PlantState(t, self.final_soc, self.final_h)
        return PlantState(t, float(self.soc[t]), float(self.h[t]))


def reverse_cumsum(x: np.ndarray) -> np.ndarray:
    return np.cumsum(np.asarray(x, dtype=float)[::-1])[::-1]


def assemble_trajectory(
    p_r, g, soc, h, b, p_pem, f_u, f_s, r, c, p_g, p_ex, h_sur,
    feasible_hours, final_soc, final_h, flagged_hours=None,
) -> Trajectory:
    r = np.asarray(r, dtype=float)
    c = np.asarray(c, dtype=float)
    if flagged_hours is None:
        flagged_hours = np.zeros(len(r), dtype=bool)
    return Trajectory(
        p_r=np.asarray(p_r, dtype=float), g=np.asarray(g, dtype=float),
        soc=np.asarray(soc, dtype=float), h=np.asarray(h, dtype=float),
        b=np.asarray(b, dtype=float), p_pem=np.asarray(p_pem, dtype=float),
        f_u=np.asarray(f_u, dtype=float), f_s=np.asarray(f_s, dtype=float),
        r=r, c=c, rtg=reverse_cumsum(r), ctg=reverse_cumsum(c),
        p_g=np.asarray(p_g, dtype=float), p_ex=np.asarray(p_ex, dtype=float),
        h_sur=np.asarray(h_sur, dtype=float),
        feasible_hours=np.asarray(feasible_hours, dtype=bool),
        flagged_hours=np.asarray(flagged_hours, dtype=bool),
        final_soc=float(final_soc), final_h=float(final_h),
    )


@dataclass
class RolloutContext:
    """What a policy sees besides the plant state."""

    t: int
    exog: ExogenousStep
    history: dict  # lists of past b, p_pem, f_u, f_s, r, c


def rollout(
    policy: Callable[[PlantState, RolloutContext], Action],
    scenario,
    design: SystemDesign,
    params: TechnicalParams,
    initial: PlantState | None = None,
) -> Trajectory:
    """Apply ``step`` over the scenario horizon under the given policy.

    Policy outputs are clamped to the action box before stepping.  The
    trajectory is marked infeasible if any hour is, but always runs to the
    end of the horizon (clamp semantics).
    """
    p_r = np.asarray(scenario.power, dtype=float)
    g = np.asarray(scenario.price, dtype=float)
    horizon = len(p_r)
    state = initial if initial is not None else default_initial_state(design)

    cols = {k: [] for k in (
        "soc", "h", "b", "p_pem", "f_u", "f_s", "r", "c", "p_g", "p_ex",
        "h_sur", "feasible")}
    history = {k: [] for k in ("b", "p_pem", "f_u", "f_s", "r", "c")}
    for t in range(horizon):
        exog = ExogenousStep(float(p_r[t]), float(g[t]))
        action = policy(state, RolloutContext(t=t, exog=exog, history=history))
        action = clamp_action(action, state, design, params)
        out = step(state, action, exog, design, params)
        cols["soc"].append(state.soc)
        cols["h"].append(state.h)
        for name, value in (("b", action.b), ("p_pem", action.p_pem),
                            ("f_u", action.f_u), ("f_s", action.f_s),
                            ("r", out.r), ("c", out.c), ("p_g", out.p_g),
                            ("p_ex", out.p_ex), ("h_sur", out.h_sur),
                            ("feasible", out.feasible)):
            cols[name].append(value)
        for name in history:
            history[name].append(cols[name][-1])
        state = out.next_state

    return assemble_trajectory(
        p_r, g, cols["soc"], cols["h"], cols["b"], cols["p_pem"],
        cols["f_u"], cols["f_s"], cols["r"], cols["c"], cols["p_g"],
        cols["p_ex"], cols["h_sur"], cols["feasible"],
        final_soc=state.soc, final_h=state.h,
    )
