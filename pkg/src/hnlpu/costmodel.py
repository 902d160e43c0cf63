"""Area/power rollups, photomask and NRE costs, 3-year TCO and carbon.

Money is in millions of US dollars ($M) throughout; power in W unless a
name says MW; emissions in metric tons CO2e.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

HOURS_PER_YEAR = 8760


# ---------------------------------------------------------------------------
# Chip and system budgets

CHIP_COMPONENTS = {
    "HN Array": (573.16, 76.92),
    "VEX": (27.87, 33.09),
    "Control Unit": (0.02, 0.0),
    "Attention Buffer": (136.11, 85.73),
    "Interconnect Engine": (37.92, 49.65),
    "HBM PHY": (52.0, 63.0),
}


@dataclass(frozen=True)
class ChipBudget:
    components: dict = field(default_factory=lambda: dict(CHIP_COMPONENTS))  # name -> (mm^2, W)

    @property
    def area(self) -> float:
        return sum(a for a, _ in self.components.values())

    @property
    def power(self) -> float:
        return sum(p for _, p in self.components.values())

    def shares(self) -> dict:
        a, p = self.area, self.power
        return {k: (100 * ca / a, 100 * cp / p) for k, (ca, cp) in self.components.items()}


def system_rollup(chip: ChipBudget, n_chips: int = 16, overhead_factor: float = 1.4) -> tuple[float, float]:
    """(silicon area mm^2, system power W); overhead covers cooling/PSU/host."""
    if n_chips < 1 or overhead_factor < 1:
        raise ValueError("need n_chips >= 1 and overhead_factor >= 1")
    return n_chips * chip.area, n_chips * chip.power * overhead_factor


@dataclass(frozen=True)
class SystemSpec:
    name: str
    throughput: float    # tokens/s
    silicon_area: float  # mm^2
    power_kw: float

    @property
    def energy_efficiency(self) -> float:
        """tokens per kJ"""
        return self.throughput / self.power_kw

    @property
    def area_efficiency(self) -> float:
        return self.throughput / self.silicon_area


REFERENCE_SYSTEMS = {
    "HNLPU": SystemSpec("HNLPU", 249_960, 13_232, 6.9),
    "H100": SystemSpec("H100", 45, 814, 1.3),
    "WSE-3": SystemSpec("WSE-3", 2_940, 46_225, 23.0),
}


def system_comparison(a: SystemSpec, b: SystemSpec) -> dict:
    return {
        "throughput": a.throughput / b.throughput,
        "energy_efficiency": a.energy_efficiency / b.energy_efficiency,
        "area_efficiency": a.area_efficiency / b.area_efficiency,
    }


# ---------------------------------------------------------------------------
# Photomasks

@dataclass(frozen=True)
class LithoParams:
    total_layers: int = 70
    shared_layers: int = 60
    unique_layers: int = 10
    euv_layers: int = 15
    euv_mask_cost: float = 1.1548  # $M per mask
    duv_mask_cost: float = 0.230625
    chips: int = 16

    def __post_init__(self):
        if self.shared_layers + self.unique_layers != self.total_layers:
            raise ValueError("shared + unique layers must equal total layers")
        if min(self.shared_layers, self.unique_layers, self.euv_layers, self.chips) < 0 or self.chips < 1:
            raise ValueError("layer and chip counts must be non-negative")
        if self.euv_layers > self.shared_layers:
            raise ValueError("EUV layers must all be shared (metal embedding is DUV only)")
        if not 5.0 - 1e-9 <= self.euv_mask_cost / self.duv_mask_cost <= 8.0 + 1e-9:
            raise ValueError("EUV mask must cost 5x-8x a DUV mask")

    @property
    def full_set_cost(self) -> float:
        return self.euv_layers * self.euv_mask_cost + (self.total_layers - self.euv_layers) * self.duv_mask_cost

    @property
    def shared_set_cost(self) -> float:
        return self.euv_layers * self.euv_mask_cost + (self.shared_layers - self.euv_layers) * self.duv_mask_cost

    @property
    def unique_set_cost(self) -> float:
        return self.unique_layers * self.duv_mask_cost


MASK_MODES = ("initial", "respin", "fully_heterogeneous")


def photomask_cost(p: LithoParams, n_chip_variants: int | None = None, mode: str = "initial") -> float:
    n = p.chips if n_chip_variants is None else n_chip_variants
    if n < 1:
        raise ValueError("need at least one chip variant")
    if mode == "fully_heterogeneous":
        return n * p.full_set_cost
    if mode == "initial":
        return p.shared_set_cost + n * p.unique_set_cost
    if mode == "respin":
        return n * p.unique_set_cost
    raise ValueError(f"unknown photomask mode {mode!r}; expected one of {MASK_MODES}")


def calibrate_litho(initial: float = 64.6, respin: float = 36.9, full_set: float = 30.0,
                    chips: int = 16, euv_layers: int = 15, total_layers: int = 70,
                    shared_layers: int = 60) -> tuple[LithoParams, dict]:
    """Solve mask prices from target totals; returns params and residuals.

    The respin total fixes the DUV price, initial minus respin fixes the
    shared set and hence the EUV price; the full-set figure is left as a check.
    """
    unique = total_layers - shared_layers
    duv = respin / (chips * unique)
    euv = (initial - respin - (shared_layers - euv_layers) * duv) / euv_layers
    p = LithoParams(total_layers, shared_layers, unique, euv_layers, euv, duv, chips)
    residuals = {
        "initial": photomask_cost(p, mode="initial") - initial,
        "respin": photomask_cost(p, mode="respin") - respin,
        "full_set": p.full_set_cost - full_set,
        "heterogeneous": photomask_cost(p, mode="fully_heterogeneous") - chips * full_set,
    }
    return p, residuals


# Hardwiring without shared layers: the die splits into many reticle-sized
# chips, each needing its own complete mask set.
NAIVE_MASK_SETS = 241  # "200+" sets; 241 gives a 112x ratio to the initial cost


def naive_hardwiring_cost(p: LithoParams, mask_sets: int = NAIVE_MASK_SETS) -> float:
    if mask_sets < 1:
        raise ValueError("need at least one mask set")
    return mask_sets * p.full_set_cost


def mask_reduction(p: LithoParams, mask_sets: int = NAIVE_MASK_SETS) -> float:
    """Naive full-set hardwiring cost over the shared-layer initial cost."""
    return naive_hardwiring_cost(p, mask_sets) / photomask_cost(p, mode="initial")


# ---------------------------------------------------------------------------
# NRE

RECURRING_PER_CHIP = 119.4 / 16  # wafer, test, packaging, IP, tools, services


def model_nre(chip_count: int, litho: LithoParams | None = None,
              recurring_per_chip: float = RECURRING_PER_CHIP) -> float:
    if chip_count < 1:
        raise ValueError("chip count must be >= 1")
    litho = litho or LithoParams()
    return photomask_cost(litho, chip_count, "initial") + chip_count * recurring_per_chip


def fit_chip_count(target_nre: float, litho: LithoParams | None = None,
                   recurring_per_chip: float = RECURRING_PER_CHIP) -> int:
    """Chip count whose NRE lands closest to a target price."""
    litho = litho or LithoParams()
    per_chip = litho.unique_set_cost + recurring_per_chip
    guess = max(1, round((target_nre - litho.shared_set_cost) / per_chip))
    cands = [c for c in (guess - 1, guess, guess + 1) if c >= 1]
    return min(cands, key=lambda c: abs(model_nre(c, litho, recurring_per_chip) - target_nre))


# Chip counts fitted to reference per-model prices ($M).
MODEL_PRICES = {
    "Kimi-K2": {"params": "1T", "price": 462, "chips": 44},
    "DeepSeek-V3": {"params": "671B", "price": 353, "chips": 33},
    "QwQ": {"params": "32B", "price": 69, "chips": 4},
    "Llama-3": {"params": "8B", "price": 38, "chips": 1},
}


# ---------------------------------------------------------------------------
# TCO and carbon

@dataclass(frozen=True)
class CostScenario:
    name: str
    relative_throughput: float
    it_power_mw: float
    pue: float = 1.4
    electricity_price_kwh: float = 0.095  # $ per kWh
    lifetime_years: float = 3.0
    chip_nre: float = 0.0          # chip NRE or GPU purchase, $M
    server_networking: float = 0.0
    datacenter_infra: float = 0.0
    respin_cost: float = 0.0
    update_interval_years: float | None = None
    throughput_tokens_s: float = 0.0
    silicon_area_mm2: float = 0.0
    respin_area_mm2: float = 0.0
    embodied_kg_per_mm2: float | None = None
    embodied_kg_fixed: float = 0.0
    grid_kg_per_kwh: float | None = None

    def __post_init__(self):
        money = (self.chip_nre, self.server_networking, self.datacenter_infra, self.respin_cost)
        if min(money) < 0 or self.it_power_mw < 0 or self.relative_throughput < 0:
            raise ValueError(f"{self.name}: monetary, power and throughput values must be >= 0")
        if self.pue < 1:
            raise ValueError(f"{self.name}: PUE must be >= 1")
        if self.lifetime_years < 0 or self.electricity_price_kwh < 0:
            raise ValueError(f"{self.name}: lifetime and price must be >= 0")

    @property
    def hours(self) -> float:
        return self.lifetime_years * HOURS_PER_YEAR

    @property
    def facility_power_mw(self) -> float:
        return self.it_power_mw * self.pue

    @property
    def updates(self) -> int:
        if not self.update_interval_years:
            return 0
        return max(0, math.ceil(self.lifetime_years / self.update_interval_years - 1e-9) - 1)

    @property
    def energy_kwh(self) -> float:
        return self.facility_power_mw * 1000 * self.hours


SCENARIO_FIELDS = {f.name for f in fields(CostScenario)}


def scenario_from_dict(d: dict) -> CostScenario:
    unknown = set(d) - SCENARIO_FIELDS
    if unknown:
        raise ValueError(f"unknown cost scenario keys: {sorted(unknown)}")
    return CostScenario(**d)


def load_scenario(path) -> CostScenario:
    return scenario_from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class TCOBreakdown:
    capex: float
    electricity: float
    static: float
    dynamic: float
    respin_total: float
    lines: dict


def tco(s: CostScenario) -> TCOBreakdown:
    capex = s.chip_nre + s.server_networking + s.datacenter_infra
    electricity = s.energy_kwh * s.electricity_price_kwh / 1e6
    static = capex + electricity
    respins = s.updates * s.respin_cost
    lines = {
        "Chips NRE / GPU Price": s.chip_nre,
        "Server / Networking Cost": s.server_networking,
        "Datacenter Infra. Cost": s.datacenter_infra,
        "Total Initial CapEx": capex,
        "Annual Update Re-spin Cost": s.respin_cost,
        "Electricity Cost": electricity,
        "Static Model (No Updates)": static,
        "Dynamic Model (Annual Updates)": static + respins,
    }
    return TCOBreakdown(capex, electricity, static, static + respins, respins, lines)


def _ratio(a_thr, a_cost, b_thr, b_cost) -> float:
    if a_cost <= 0 or b_cost <= 0 or b_thr <= 0:
        raise ZeroDivisionError("efficiency ratio needs positive costs and baseline throughput")
    return (a_thr / a_cost) / (b_thr / b_cost)


def efficiency_metrics(a: CostScenario, b: CostScenario) -> dict:
    ta, tb = tco(a), tco(b)
    out = {
        "throughput_per_capex": _ratio(a.relative_throughput, ta.capex, b.relative_throughput, tb.capex),
        "throughput_per_tco_static": _ratio(a.relative_throughput, ta.static, b.relative_throughput, tb.static),
        "throughput_per_tco_dynamic": _ratio(a.relative_throughput, ta.dynamic, b.relative_throughput, tb.dynamic),
    }
    for tag, s in (("a", a), ("b", b)):
        if s.throughput_tokens_s and s.it_power_mw:
            out[f"energy_efficiency_{tag}"] = s.throughput_tokens_s / (s.it_power_mw * 1e6)  # tokens/J
    return out


@dataclass(frozen=True)
class CarbonReport:
    operational: float
    embodied: float
    per_update: float
    static: float
    dynamic: float


def carbon(s: CostScenario) -> CarbonReport:
    if s.grid_kg_per_kwh is None or s.embodied_kg_per_mm2 is None:
        raise ValueError(f"{s.name}: carbon needs grid and embodied emission factors")
    operational = s.energy_kwh * s.grid_kg_per_kwh / 1000
    embodied = (s.silicon_area_mm2 * s.embodied_kg_per_mm2 + s.embodied_kg_fixed) / 1000
    per_update = s.respin_area_mm2 * s.embodied_kg_per_mm2 / 1000
    static = operational + embodied
    return CarbonReport(operational, embodied, per_update, static, static + s.updates * per_update)


# ---------------------------------------------------------------------------
# Shipped scenarios derived from the other models

GRID_KG_PER_KWH = 0.38
EMBODIED_KG_PER_MM2 = 0.07


def hnlpu_scenario(systems: int = 8, system_throughput: float = 249_960,
                   baseline_throughput: float = 10_000 * 45, litho: LithoParams | None = None,
                   chip: ChipBudget | None = None) -> CostScenario:
    """Eight 16-chip systems in one rack, priced from the mask and chip models."""
    litho = litho or LithoParams()
    chip = chip or ChipBudget()
    area, power = system_rollup(chip, litho.chips, 1.4)
    return CostScenario(
        name="HNLPU",
        relative_throughput=systems * system_throughput / baseline_throughput,
        it_power_mw=systems * power / 1e6,
        chip_nre=model_nre(litho.chips, litho),
        server_networking=2.0,
        datacenter_infra=0.04,
        respin_cost=photomask_cost(litho, mode="respin") + 7.4,
        update_interval_years=1.0,
        throughput_tokens_s=systems * system_throughput,
        silicon_area_mm2=systems * area,
        respin_area_mm2=systems * area,
        embodied_kg_per_mm2=EMBODIED_KG_PER_MM2,
        grid_kg_per_kwh=GRID_KG_PER_KWH,
    )


def h100_scenario(gpus: int = 10_000) -> CostScenario:
    return CostScenario(
        name="H100",
        relative_throughput=1.0,
        it_power_mw=gpus * 1.3e3 / 1e6,
        chip_nre=gpus * 0.03,
        server_networking=gpus * 0.015,
        datacenter_infra=35.0,
        throughput_tokens_s=gpus * 45,
        silicon_area_mm2=gpus * 814,
        embodied_kg_per_mm2=EMBODIED_KG_PER_MM2,
        grid_kg_per_kwh=GRID_KG_PER_KWH,
    )


def tco_rows(a: CostScenario, b: CostScenario) -> list:
    """TCO table rows: (row, a value, b value)."""
    ta, tb = tco(a), tco(b)
    eff = efficiency_metrics(a, b)
    ca, cb = carbon(a), carbon(b)
    price = f"{a.electricity_price_kwh:.3f}".rstrip("0")
    return [
        ("Equivalent Throughput", a.relative_throughput, b.relative_throughput),
        ("IT Power Load (MW)", a.it_power_mw, b.it_power_mw),
        ("Total Datacenter Power (MW)", a.facility_power_mw, b.facility_power_mw),
        ("Chips NRE / GPU Price", a.chip_nre, b.chip_nre),
        ("Server / Networking Cost", a.server_networking, b.server_networking),
        ("Datacenter Infra. Cost", a.datacenter_infra, b.datacenter_infra),
        ("Total Initial CapEx", ta.capex, tb.capex),
        ("Annual Update Re-spin Cost", a.respin_cost, b.respin_cost),
        (f"Electricity Cost (@ ${price}/kWh)", ta.electricity, tb.electricity),
        ("Static Model (No Updates)", ta.static, tb.static),
        ("Dynamic Model (Annual Updates)", ta.dynamic, tb.dynamic),
        ("Throughput / CapEx", eff["throughput_per_capex"], 1.0),
        ("Throughput / TCO (Static)", eff["throughput_per_tco_static"], 1.0),
        ("Throughput / TCO (Dynamic)", eff["throughput_per_tco_dynamic"], 1.0),
        ("Total tCO2e Emissions (Static)", ca.static, cb.static),
        ("Total tCO2e Emissions (Dynamic)", ca.dynamic, cb.dynamic),
    ]


def scenario_to_dict(s: CostScenario) -> dict:
    return asdict(s)


def scaled(s: CostScenario, k: float) -> CostScenario:
    """All monetary lines multiplied by k (electricity via price)."""
    return replace(s, chip_nre=s.chip_nre * k, server_networking=s.server_networking * k,
                   datacenter_infra=s.datacenter_infra * k, respin_cost=s.respin_cost * k,
                   electricity_price_kwh=s.electricity_price_kwh * k)


def scenario_rows(s: CostScenario) -> list:
    """Absolute rows for one scenario, no baseline: (row, value)."""
    t, c = tco(s), carbon(s)
    price = f"{s.electricity_price_kwh:.3f}".rstrip("0")
    return [
        ("Equivalent Throughput", s.relative_throughput),
        ("IT Power Load (MW)", s.it_power_mw),
        ("Total Datacenter Power (MW)", s.facility_power_mw),
        *[(k, v) for k, v in t.lines.items() if k != "Electricity Cost"][:5],
        (f"Electricity Cost (@ ${price}/kWh)", t.electricity),
        ("Static Model (No Updates)", t.static),
        ("Dynamic Model (Annual Updates)", t.dynamic),
        ("Total tCO2e Emissions (Static)", c.static),
        ("Total tCO2e Emissions (Dynamic)", c.dynamic),
    ]
