"""Wind/price scenario generation, validation statistics, and conditioning.

A scenario pairs an hourly wind-speed series with a grid-price series over
the monthly horizon, carries the renewable power implied by the turbine
curve, and a trend token: per-day averages of renewable power that compress
the horizon into one value per 24-hour window.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .plant import HOURS

CUT_IN = 1.5     # m/s
RATED = 12.0     # m/s
CUT_OFF = 25.0   # m/s
INSTALLED_MW = 50.0

MMD_BANDWIDTHS = (10.0, 15.0, 20.0, 50.0)

TREND_WINDOW = 24  # hours per trend-token entry


def wind_to_power(
    wind,
    cut_in: float = CUT_IN,
    rated: float = RATED,
    cut_off: float = CUT_OFF,
    installed: float = INSTALLED_MW,
):
    """Turbine capacity-factor curve: cubic ramp between cut-in and rated,
    flat at installed capacity up to cut-off, zero outside."""
    w = np.asarray(wind, dtype=float)
    if np.any(w < 0):
        raise ValueError("wind speeds must be >= 0")
    cubic = installed * (w**3 - cut_in**3) / (rated**3 - cut_in**3)
    power = np.where(
        w <= cut_in, 0.0,
        np.where(w <= rated, cubic, np.where(w <= cut_off, installed, 0.0)),
    )
    return power if power.ndim else float(power)


def trend_token(power) -> np.ndarray:
    """Daily-average renewable power; one entry per full 24-hour window."""
    p = np.asarray(power, dtype=float)
    n_win = max(1, len(p) // TREND_WINDOW)
    if len(p) >= TREND_WINDOW:
        return p[: n_win * TREND_WINDOW].reshape(n_win, TREND_WINDOW).mean(axis=1)
    return np.array([p.mean()])


@dataclass(frozen=True)
class Scenario:
    wind: np.ndarray    # hourly wind speed, m/s
    power: np.ndarray   # hourly renewable power, MW
    price: np.ndarray   # hourly grid price, $/MWh
    region: str
    trend: np.ndarray   # daily-average power token

    @classmethod
    def from_wind(cls, wind, price, region: str = "desk") -> "Scenario":
        wind = np.asarray(wind, dtype=float)
        price = np.asarray(price, dtype=float)
        if len(wind) != len(price):
            raise ValueError(f"wind length {len(wind)} != price length {len(price)}")
        power = wind_to_power(wind)
        return cls(wind=wind, power=power, price=price, region=region,
                   trend=trend_token(power))

    @property
    def horizon(self) -> int:
        return len(self.wind)


@dataclass(frozen=True)
class FeatureVector:
    """The five dispatch-relevant wind statistics."""

    w_min: float
    w_max: float
    w_avg: float
    dw_max: float   # max absolute hourly change
    dw_avg: float   # mean absolute hourly change

    def as_array(self) -> np.ndarray:
        return np.array([self.w_min, self.w_max, self.w_avg, self.dw_max, self.dw_avg])


def compute_features(wind) -> FeatureVector:
    w = np.asarray(wind, dtype=float)
    if len(w) < 2:
        raise ValueError(f"need at least 2 samples, got {len(w)}")
    dw = np.abs(np.diff(w))
    return FeatureVector(
        w_min=float(w.min()), w_max=float(w.max()), w_avg=float(w.mean()),
        dw_max=float(dw.max()), dw_avg=float(dw.mean()),
    )


def feature_matrix(winds) -> np.ndarray:
    return np.stack([compute_features(w).as_array() for w in winds])


def _multiscale_kernel(x: np.ndarray, y: np.ndarray, bandwidths) -> np.ndarray:
    d2 = cdist(x, y, "sqeuclidean")
    return sum(np.exp(-d2 / (2.0 * s * s)) for s in bandwidths)


def mmd(x, y, bandwidths=MMD_BANDWIDTHS) -> float:
    """Biased (V-statistic) maximum mean discrepancy between two vector sets,
    under a sum-of-Gaussians kernel; diagonal terms included."""
    x = np.atleast_2d(np.asarray(x, dtype=float))
    y = np.atleast_2d(np.asarray(y, dtype=float))
    if x.shape[1] != y.shape[1]:
        raise ValueError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    if len(x) == 0 or len(y) == 0:
        raise ValueError("empty sample set")
    kxx = _multiscale_kernel(x, x, bandwidths).mean()
    kyy = _multiscale_kernel(y, y, bandwidths).mean()
    kxy = _multiscale_kernel(x, y, bandwidths).mean()
    return float(kxx + kyy - 2.0 * kxy)


def feature_mmd(winds_a, winds_b, bandwidths=MMD_BANDWIDTHS) -> float:
    """MMD between the feature clouds of two scenario sets.

    Features are z-scored by the pooled set first; the fixed bandwidths
    would otherwise be dominated by raw-unit distances.
    """
    fa = feature_matrix(winds_a)
    fb = feature_matrix(winds_b)
    pooled = np.vstack([fa, fb])
    mean = pooled.mean(axis=0)
    std = np.maximum(pooled.std(axis=0), 1e-12)
    return mmd((fa - mean) / std, (fb - mean) / std, bandwidths)


def bootstrap_generate(
    wind_archive,
    n: int,
    block_len: int = 48,
    jitter: float = 0.05,
    seed: int = 0,
    price_archive=None,
    region: str = "desk",
    horizon: int = HOURS,
) -> list[Scenario]:
    """Circular moving-block bootstrap over the wind archive.

    Assembles each scenario from blocks of ``block_len`` hours drawn with
    replacement from the (circularized) archive, each block scaled by a
    multiplicative jitter ~ U(1-jitter, 1+jitter).  Prices are contiguous
    historical windows drawn from ``price_archive``.
    """
    archive = np.asarray(wind_archive, dtype=float)
    if len(archive) < 2 * horizon:
        raise ValueError(
            f"wind archive length {len(archive)} < 2*horizon ({2 * horizon})")
    rng = np.random.default_rng(seed)
    n_blocks = -(-horizon // block_len)  # ceil
    idx = np.arange(block_len)
    scenarios_wind = np.empty((n, n_blocks * block_len))
    for i in range(n):
        starts = rng.integers(0, len(archive), size=n_blocks)
        factors = rng.uniform(1.0 - jitter, 1.0 + jitter, size=n_blocks)
        blocks = [
            archive.take(s + idx, mode="wrap") * f
            for s, f in zip(starts, factors)
        ]
        scenarios_wind[i] = np.concatenate(blocks)
    winds = np.maximum(scenarios_wind[:, :horizon], 0.0)

    if price_archive is None:
        prices = np.zeros((n, horizon))
    else:
        price_seed = int(rng.integers(0, 2**63 - 1))
        prices = sample_prices(price_archive, n, seed=price_seed, horizon=horizon)
    return [Scenario.from_wind(winds[i], prices[i], region) for i in range(n)]


def sample_prices(price_archive, n: int, seed: int = 0, horizon: int = HOURS) -> np.ndarray:
    """Uniformly sampled contiguous historical price windows, (n, horizon)."""
    archive = np.asarray(price_archive, dtype=float)
    if len(archive) < horizon:
        raise ValueError(f"price archive length {len(archive)} < horizon {horizon}")
    rng = np.random.default_rng(seed)
    starts = rng.integers(0, len(archive) - horizon + 1, size=n)
    return np.stack([archive[s: s + horizon] for s in starts])


def scenario_to_csv(scenario: Scenario, path) -> None:
    from .artifacts import write_csv

    write_csv(path, ["t", "wind_ms", "power_mw", "price_usd_mwh"],
              ([t, scenario.wind[t], scenario.power[t], scenario.price[t]]
               for t in range(scenario.horizon)))


def scenario_from_csv(path, region: str = "desk") -> Scenario:
    data = np.genfromtxt(path, delimiter=",", names=True)
    scenario = Scenario.from_wind(data["wind_ms"], data["price_usd_mwh"], region)
    if not np.allclose(scenario.power, data["power_mw"], atol=1e-6):
        raise ValueError(f"{path}: stored power does not match the wind curve")
    return scenario


def condition_on_prefix(
    observed_wind,
    pool_size: int,
    candidate_pool: list[Scenario],
    seed: int = 0,
) -> tuple[list[Scenario], np.ndarray, np.ndarray]:
    """Select the pool scenarios best matching an observed wind prefix.

    Ranks candidates by mean squared prefix error (1/t)*||w_obs - w[0:t]||^2
    (ties broken by pool index) and returns the best ``pool_size`` of them,
    their trend tokens, and their errors.
    """
    if not candidate_pool:
        raise ValueError("candidate pool is empty")
    obs = np.asarray(observed_wind, dtype=float)
    t = len(obs)
    if t < 1:
        raise ValueError("observed prefix must have at least 1 hour")
    if t >= candidate_pool[0].horizon:
        raise ValueError(f"prefix length {t} >= scenario horizon")
    winds = np.stack([s.wind[:t] for s in candidate_pool])
    errors = np.mean((winds - obs) ** 2, axis=1)
    order = np.argsort(errors, kind="stable")[: min(pool_size, len(candidate_pool))]
    selected = [candidate_pool[i] for i in order]
    tokens = np.stack([s.trend for s in selected])
    return selected, tokens, errors[order]
