#!/usr/bin/env python3
"""Paired screening experiment: carbon-aware action selection on vs off.

Trains the dispatch agent on a desk oracle set, rolls the same scenarios
through both selection rules with identical seeds, and reports episode
counts ending with positive net emissions plus the profit gap against the
LP optimum per scenario.
"""
import time

import numpy as np

from p2m.agent import AgentHyperparams, operate_batch, train_agent
from p2m.cooptim import DesignSpace
from p2m.desk import desk_scenario_source
from p2m.lp import build_oracle_dataset, solve_instance
from p2m.params import for_region
from p2m.plant import derive_pem_capacity

HORIZON = 96
N_EPISODES = 200

if __name__ == "__main__":
    params = for_region("skive")
    source = desk_scenario_source(horizon=HORIZON)
    t0 = time.time()
    dataset = build_oracle_dataset(400, DesignSpace.default(), source, params,
                                   seed=11)
    model = train_agent(dataset, AgentHyperparams(
        epochs=30, actor_epochs=100, critic_epochs=16, warmup_steps=1000),
        seed=7)
    print(f"oracle + training: {time.time() - t0:.0f}s")

    design = derive_pem_capacity(1500.0, 0.2, 25.0, 400.0, params)
    episodes, refs = [], []
    for scenario in source(2 * N_EPISODES, seed=505):
        sol, _ = solve_instance(design, scenario, params)
        if sol.status == "optimal":
            episodes.append(scenario)
            refs.append(sol.objective)
        if len(episodes) == N_EPISODES:
            break

    screened, _ = operate_batch(model, design, episodes, params,
                                n_action_samples=16, seed=99, screening=True)
    unscreened, _ = operate_batch(model, design, episodes, params,
                                  n_action_samples=16, seed=99, screening=False)
    pos_on = sum(t.net_carbon > 0 for t in screened)
    pos_off = sum(t.net_carbon > 0 for t in unscreened)
    gaps = [(ref - t.profit) / abs(ref) for ref, t in zip(refs, screened)]
    print(f"episodes: {len(episodes)}")
    print(f"positive-emission episodes  screening ON:  {pos_on}")
    print(f"positive-emission episodes  screening OFF: {pos_off}")
    print(f"mean net emissions ON/OFF: "
          f"{np.mean([t.net_carbon for t in screened]):+.1f} / "
          f"{np.mean([t.net_carbon for t in unscreened]):+.1f} ton")
    print(f"median profit gap vs LP (screening on): {np.median(gaps):.3f}")
