"""Independent dispatch oracle for tiny horizons: backward value iteration
over a (soc, h) grid with gridded actions, evaluated by exact forward replay.

The DP value function is only guidance; the reported profit comes from
replaying the greedy policy through the true plant step from the exact
initial state, accepting only plant-feasible actions.  Every replayed
dispatch is therefore feasible for the continuous problem, so its profit is
a certified lower bound on the LP optimum.
"""
from __future__ import annotations

import numpy as np

from p2m.plant import SOC_MAX, SOC_MIN, step_arrays


def action_grid(design, params, levels: int):
    b_max = params.alpha * design.c_bess
    b = np.linspace(-b_max, b_max, levels)
    p_pem = np.linspace(0.0, design.c_pem, levels)
    fracs = np.linspace(0.0, 1.0, levels)
    grid = np.array(np.meshgrid(b, p_pem, fracs, fracs,
                                indexing="ij")).reshape(4, -1).T
    return grid  # (levels^4, 4)


def _bilinear(values, soc, h, soc_axis, h_axis):
    """Interpolate values (n_soc, n_h) at points (soc, h), clipped to grid."""
    si = np.clip(np.searchsorted(soc_axis, soc) - 1, 0, len(soc_axis) - 2)
    hi = np.clip(np.searchsorted(h_axis, h) - 1, 0, len(h_axis) - 2)
    s0, s1 = soc_axis[si], soc_axis[si + 1]
    h0, h1 = h_axis[hi], h_axis[hi + 1]
    ws = np.clip((soc - s0) / (s1 - s0), 0.0, 1.0)
    wh = np.clip((h - h0) / (h1 - h0), 0.0, 1.0)
    v00 = values[si, hi]
    v01 = values[si, hi + 1]
    v10 = values[si + 1, hi]
    v11 = values[si + 1, hi + 1]
    return ((1 - ws) * (1 - wh) * v00 + (1 - ws) * wh * v01
            + ws * (1 - wh) * v10 + ws * wh * v11)


def solve_dp(design, params, scenario, initial_soc, initial_h,
             action_levels: int = 5, n_soc: int = 41, n_h: int = 41):
    """Returns (replayed_profit, replayed_trajectory_actions)."""
    horizon = scenario.horizon
    actions = action_grid(design, params, action_levels)
    soc_axis = np.linspace(SOC_MIN, SOC_MAX, n_soc)
    h_axis = np.linspace(0.0, design.c_cht, n_h)
    soc_grid, h_grid = np.meshgrid(soc_axis, h_axis, indexing="ij")
    soc_flat = soc_grid.ravel()
    h_flat = h_grid.ravel()

    value = np.zeros((horizon + 1, n_soc, n_h))
    for t in reversed(range(horizon)):
        best = np.full(soc_flat.shape, -np.inf)
        for a in actions:
            out = step_arrays(soc_flat, h_flat, a[0], a[1], a[2], a[3],
                              scenario.power[t], scenario.price[t],
                              design, params)
            cont = _bilinear(value[t + 1], out["soc_next"], out["h_next"],
                             soc_axis, h_axis)
            total = np.where(out["feasible"], out["r"] + cont, -np.inf)
            best = np.maximum(best, total)
        value[t] = best.reshape(n_soc, n_h)

    # exact forward replay guided by the value table
    soc, h = initial_soc, initial_h
    profit = 0.0
    chosen = []
    for t in range(horizon):
        out = step_arrays(np.full(len(actions), soc), np.full(len(actions), h),
                          actions[:, 0], actions[:, 1], actions[:, 2],
                          actions[:, 3], scenario.power[t], scenario.price[t],
                          design, params)
        cont = _bilinear(value[t + 1], out["soc_next"], out["h_next"],
                         soc_axis, h_axis)
        score = np.where(out["feasible"], out["r"] + cont, -np.inf)
        if not np.isfinite(score).any():
            raise RuntimeError(f"no feasible gridded action at hour {t}")
        pick = int(score.argmax())
        profit += float(out["r"][pick])
        chosen.append(actions[pick])
        soc = float(out["soc_next"][pick])
        h = float(out["h_next"][pick])
    return profit, np.array(chosen)


def max_possible_import(design, params) -> float:
    """Upper bound on hourly grid import: full load with zero renewables."""
    b_max = params.alpha * design.c_bess
    h_sur_max = design.c_cht + design.c_pem * 1000.0 / params.sp_h2
    p_h_max = h_sur_max * params.spc_h2 / 1000.0
    meoh_load = design.m_meoh * params.sp_meoh / 1000.0
    return b_max + design.c_pem + p_h_max + meoh_load
