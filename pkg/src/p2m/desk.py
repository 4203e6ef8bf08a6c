"""Bundled desk-scale data: deterministic synthetic wind and price archives.

Real regional archives come from the ingest module; everything that needs
data offline (tests, toy fixtures, benchmarks) uses these generators, which
are reproducible from a seed and sized well below production scale.
"""
from __future__ import annotations

import numpy as np

from .plant import HOURS
from .scenarios import Scenario, bootstrap_generate


def desk_wind_archive(n_hours: int = 2 * 8760, seed: int = 7) -> np.ndarray:
    """Synthetic hourly 50 m wind speeds: AR(1) fluctuation around a mean
    with a mild diurnal cycle, floored away from zero. Mean ~9.5 m/s
    (a strong coastal site, so desk-scale dispatch problems are mostly
    feasible under the net-emission budget)."""
    rng = np.random.default_rng(seed)
    t = np.arange(n_hours)
    diurnal = 1.0 * np.sin(2 * np.pi * (t % 24) / 24.0)
    rho, sigma = 0.9, 2.0
    noise = rng.standard_normal(n_hours) * sigma * np.sqrt(1 - rho**2)
    ar = np.empty(n_hours)
    ar[0] = rng.standard_normal() * sigma
    for i in range(1, n_hours):
        ar[i] = rho * ar[i - 1] + noise[i]
    return np.maximum(9.5 + diurnal + ar, 0.3)


def desk_price_archive(n_hours: int = 2 * 8760, seed: int = 11) -> np.ndarray:
    """Synthetic hourly grid prices, $/MWh: morning/evening peaks over a
    fast AR(1) plus a slow multi-day wave (fuel/weather regimes), clipped at
    zero. Mean ~40 $/MWh."""
    rng = np.random.default_rng(seed)
    t = np.arange(n_hours)
    hod = t % 24
    peaks = 8.0 * np.exp(-((hod - 8) ** 2) / 8.0) + 10.0 * np.exp(-((hod - 19) ** 2) / 8.0)

    def ar1(rho, sigma):
        noise = rng.standard_normal(n_hours) * sigma * np.sqrt(1 - rho**2)
        out = np.empty(n_hours)
        out[0] = rng.standard_normal() * sigma
        for i in range(1, n_hours):
            out[i] = rho * out[i - 1] + noise[i]
        return out

    fast = ar1(0.85, 7.0)
    slow = ar1(0.997, 14.0)     # ~2-week memory: day-scale cheap/dear regimes
    return np.maximum(38.0 + peaks + fast + slow, 0.0)


def desk_scenarios(
    n: int,
    seed: int = 0,
    horizon: int = HOURS,
    block_len: int = 48,
    jitter: float = 0.05,
    region: str = "desk",
) -> list[Scenario]:
    """Bootstrap scenarios off the desk archives; the standard toy source."""
    wind = desk_wind_archive(max(4 * horizon, 8760))
    price = desk_price_archive(max(4 * horizon, 8760))
    return bootstrap_generate(
        wind, n, block_len=block_len, jitter=jitter, seed=seed,
        price_archive=price, region=region, horizon=horizon,
    )


def desk_scenario_source(horizon: int = HOURS, region: str = "desk", **kwargs):
    """A (count, seed) -> scenarios callable bound to the desk archives."""

    def source(n: int, seed: int) -> list[Scenario]:
        return desk_scenarios(n, seed=seed, horizon=horizon, region=region, **kwargs)

    return source
