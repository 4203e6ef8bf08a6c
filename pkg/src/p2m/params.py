"""Technical parameters of the power-to-methanol plant.

Unit conventions used throughout the package:

* power in MW, energy in MWh
* hydrogen mass in kg, methanol production rate in kg/h
* specific powers in kW per (kg/h) of product
* grid price in $/MWh, hydrogen price in $/kg
* emissions in ton CO2, grid intensity in ton CO2/MWh, carbon tax in $/ton
"""
from __future__ import annotations

import json
from dataclasses import dataclass, fields, replace
from pathlib import Path

import tomli

# Region -> carbon tax on grid electricity, $/ton CO2.
CARBON_TAX = {
    "dunkirk": 47.96,
    "skive": 28.10,
    "fredericia": 28.10,
    "weener": 48.39,
}

# The grid emission factor is configurable; this default is the round
# 2015 world-average grid intensity and deliberately flagged as such.
DEFAULT_GRID_INTENSITY = 0.475


@dataclass(frozen=True)
class TechnicalParams:
    """Plant-level technical and economic constants."""

    eta_c: float = 0.95      # BESS charging efficiency
    eta_d: float = 0.95      # BESS discharging efficiency
    alpha: float = 0.3       # max (dis)charge rate, fraction of capacity per hour
    eta_l: float = 6.94e-5   # BESS self-discharge per hour
    sp_h2: float = 55.7      # PEM specific power, kW/(kg/h H2)
    spc_h2: float = 3.003    # H2 compression specific power, kW/(kg/h H2)
    gamma_h: float = 0.196   # kg H2 per kg MeOH
    gamma_c: float = 1.436   # kg CO2 per kg MeOH
    sp_meoh: float = 0.657   # MeOH synthesis specific power, kW/(kg/h)
    eps_g: float = DEFAULT_GRID_INTENSITY  # grid intensity, ton CO2/MWh
    tau_c: float = CARBON_TAX["dunkirk"]   # carbon tax, $/ton CO2
    h_price: float = 5.0     # hydrogen sale price, $/kg

    def __post_init__(self):
        for name in ("eta_c", "eta_d", "alpha"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ValueError(f"{name}={v} must be in (0, 1]")
        if not 0.0 <= self.eta_l < 1.0:
            raise ValueError(f"eta_l={self.eta_l} must be in [0, 1)")
        for name in ("sp_h2", "spc_h2", "gamma_h", "gamma_c", "sp_meoh"):
            v = getattr(self, name)
            if v <= 0.0:
                raise ValueError(f"{name}={v} must be > 0")
        for name in ("eps_g", "tau_c", "h_price"):
            v = getattr(self, name)
            if v < 0.0:
                raise ValueError(f"{name}={v} must be >= 0")


def for_region(region: str, **overrides) -> TechnicalParams:
    """Parameters with the region's carbon tax applied."""
    key = region.lower()
    if key not in CARBON_TAX:
        raise ValueError(f"unknown region {region!r}; known: {sorted(CARBON_TAX)}")
    return TechnicalParams(tau_c=CARBON_TAX[key], **overrides)


def load_params(path: str | Path) -> TechnicalParams:
    """Load parameters from a JSON or TOML file.

    The file carries one key per ``TechnicalParams`` field (units as in the
    type definition); an optional ``region`` key selects the carbon tax.
    Explicit ``tau_c`` wins over ``region``.
    """
    path = Path(path)
    if path.suffix.lower() == ".toml":
        raw = tomli.loads(path.read_text())
    else:
        raw = json.loads(path.read_text())
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: expected a table/object of parameter fields")
    region = raw.pop("region", None)
    known = {f.name for f in fields(TechnicalParams)}
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"{path}: unknown parameter keys {sorted(unknown)}")
    params = TechnicalParams(**{k: float(v) for k, v in raw.items()})
    if region is not None and "tau_c" not in raw:
        params = replace(params, tau_c=CARBON_TAX[region.lower()])
    return params
