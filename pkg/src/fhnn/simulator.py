"""Synthetic conceptual catchment: degree-day snow bucket, a capacity-limited
soil store with temperature-scaled evaporation, and two linear reservoirs
(fast storm response, slow baseflow).

The simulator provides ground-truth flows for the experiment fleet and, from
deliberately perturbed parameters, an "imperfect simulation" flow column for
pretraining.  Perturbing parameters rather than adding output noise makes the
simulated flow systematically biased, like a miscalibrated physics model.

Water balance per step (all in mm):

    snowfall    = precip where temp <= t_snow, else rain
    melt        = min(snowpack, ddf * max(temp - t_snow, 0))
    soil       += rain + melt
    et          = min(soil, et_coeff * max(temp, 0) * soil)
    overflow    = max(soil - soil_cap, 0)           (soil capped afterwards)
    fast store += frac_fast * overflow; slow store += the rest
    flow        = k_fast * S_fast + k_slow * S_slow (then stores drain by it)

Every store stays nonnegative and the balance
sum(precip) = sum(flow) + sum(et) + delta(storage) holds to rounding.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .data import BasinSeries, SplitSpec


class SimulationError(ValueError):
    """Invalid simulator parameters or configuration."""


@dataclass
class CatchmentParams:
    ddf: float  # degree-day melt factor, mm/degC/step
    t_snow: float  # rain/snow threshold, degC
    soil_cap: float  # soil store capacity, mm
    et_coeff: float  # evaporated soil fraction per step per degC above 0
    frac_fast: float  # share of soil overflow routed to the fast reservoir
    k_fast: float  # fast reservoir outflow fraction per step
    k_slow: float  # slow reservoir outflow fraction per step

    def __post_init__(self):
        if min(self.ddf, self.soil_cap, self.et_coeff) < 0.0:
            raise SimulationError("ddf, soil_cap, et_coeff must be nonnegative")
        if not (0.0 <= self.frac_fast <= 1.0):
            raise SimulationError(f"frac_fast must lie in [0, 1], got {self.frac_fast}")
        if not (0.0 < self.k_slow < self.k_fast <= 1.0):
            raise SimulationError(f"need 0 < k_slow < k_fast <= 1, got k_fast={self.k_fast}, k_slow={self.k_slow}")

    def as_dict(self) -> dict:
        return {
            "ddf": self.ddf,
            "t_snow": self.t_snow,
            "soil_cap": self.soil_cap,
            "et_coeff": self.et_coeff,
            "frac_fast": self.frac_fast,
            "k_fast": self.k_fast,
            "k_slow": self.k_slow,
        }


@dataclass
class WeatherConfig:
    """Seasonal sinusoid temperature plus intermittent gamma rainfall."""

    steps_per_year: int = 1460  # 6-hourly
    temp_mean: float = 8.0
    temp_amp: float = 12.0  # coldest at the start of the year
    temp_noise: float = 3.0
    precip_prob: float = 0.25  # wet-step probability
    precip_shape: float = 1.5  # gamma shape of wet-step depth
    precip_scale: float = 2.0  # gamma scale, mm
    seed: int = 0

    def __post_init__(self):
        if self.steps_per_year <= 0:
            raise SimulationError(f"steps_per_year must be positive, got {self.steps_per_year}")
        if not (0.0 <= self.precip_prob <= 1.0):
            raise SimulationError(f"precip_prob must lie in [0, 1], got {self.precip_prob}")
        if self.temp_noise < 0 or self.precip_shape <= 0 or self.precip_scale < 0:
            raise SimulationError("invalid weather noise/magnitude parameters")

    def mean_precip_per_step(self) -> float:
        return self.precip_prob * self.precip_shape * self.precip_scale


def generate_weather(n_steps: int, cfg: WeatherConfig) -> tuple[np.ndarray, np.ndarray]:
    """Seeded (precip, temp) series of length n_steps."""
    if n_steps <= 0:
        raise SimulationError(f"n_steps must be positive, got {n_steps}")
    rng = np.random.default_rng(cfg.seed)
    t = np.arange(n_steps)
    temp = cfg.temp_mean - cfg.temp_amp * np.cos(2.0 * np.pi * t / cfg.steps_per_year)
    temp = temp + cfg.temp_noise * rng.standard_normal(n_steps)
    wet = rng.random(n_steps) < cfg.precip_prob
    depth = rng.gamma(cfg.precip_shape, cfg.precip_scale, size=n_steps)
    precip = np.where(wet, depth, 0.0)
    return precip, temp


@dataclass
class StoreState:
    snow: float = 0.0
    soil: float = 0.0
    s_fast: float = 0.0
    s_slow: float = 0.0

    def total(self) -> float:
        return self.snow + self.soil + self.s_fast + self.s_slow


@dataclass
class SimResult:
    flow: np.ndarray
    et: np.ndarray
    snow: np.ndarray
    soil: np.ndarray
    s_fast: np.ndarray
    s_slow: np.ndarray
    final: StoreState


def simulate(precip: np.ndarray, temp: np.ndarray, params: CatchmentParams, init: StoreState | None = None) -> SimResult:
    """Run the bucket model over the driver series."""
    if precip.shape != temp.shape:
        raise SimulationError(f"driver shapes differ: {precip.shape} vs {temp.shape}")
    if np.any(precip < 0):
        raise SimulationError("precip must be nonnegative")
    st = init or StoreState()
    snow, soil, s_fast, s_slow = st.snow, st.soil, st.s_fast, st.s_slow
    n = len(precip)
    flow = np.empty(n)
    et_out = np.empty(n)
    snow_tr = np.empty(n)
    soil_tr = np.empty(n)
    fast_tr = np.empty(n)
    slow_tr = np.empty(n)
    ddf, t_snow, cap = params.ddf, params.t_snow, params.soil_cap
    et_c, frac, kf, ks = params.et_coeff, params.frac_fast, params.k_fast, params.k_slow
    for i in range(n):
        p = precip[i]
        tc = temp[i]
        if tc <= t_snow:
            snow += p
            rain = 0.0
        else:
            rain = p
        melt = ddf * (tc - t_snow) if tc > t_snow else 0.0
        if melt > snow:
            melt = snow
        snow -= melt
        soil += rain + melt
        et = et_c * max(tc, 0.0) * soil
        if et > soil:
            et = soil
        soil -= et
        if soil > cap:
            overflow = soil - cap
            soil = cap
            s_fast += frac * overflow
            s_slow += (1.0 - frac) * overflow
        q = kf * s_fast + ks * s_slow
        s_fast -= kf * s_fast
        s_slow -= ks * s_slow
        flow[i] = q
        et_out[i] = et
        snow_tr[i] = snow
        soil_tr[i] = soil
        fast_tr[i] = s_fast
        slow_tr[i] = s_slow
    return SimResult(
        flow=flow,
        et=et_out,
        snow=snow_tr,
        soil=soil_tr,
        s_fast=fast_tr,
        s_slow=slow_tr,
        final=StoreState(snow=snow, soil=soil, s_fast=s_fast, s_slow=s_slow),
    )


# ---------------------------------------------------------------------------
# Fleet construction

# Anchor regimes for the wetness/memory spectrum.  The wet-flashy anchor is
# rain-dominated with a small soil store and quick storm response (high
# runoff ratio); the dry-snowy anchor is cold and arid with deep storage and
# slow drainage (low runoff ratio, long memory).
_REGIME_ANCHORS = {
    "wet-flashy": {
        "weather": dict(temp_mean=12.0, temp_amp=10.0, temp_noise=3.0, precip_prob=0.30, precip_shape=1.5, precip_scale=2.4),
        "params": dict(ddf=2.0, t_snow=0.0, soil_cap=50.0, et_coeff=0.0009, frac_fast=0.8, k_fast=0.30, k_slow=0.02),
    },
    "dry-snowy": {
        "weather": dict(temp_mean=3.0, temp_amp=14.0, temp_noise=3.0, precip_prob=0.16, precip_shape=1.5, precip_scale=1.7),
        "params": dict(ddf=1.2, t_snow=0.5, soil_cap=220.0, et_coeff=0.0007, frac_fast=0.30, k_fast=0.09, k_slow=0.004),
    },
}

REGIMES = ("wet-flashy", "wet-damped", "mixed", "dry-damped", "dry-snowy", "span")

# Fixed positions on the anchor interpolation for the named intermediate
# regimes; "span" spreads the fleet evenly across [0, 1].
_REGIME_LAMBDA = {
    "wet-flashy": 0.0,
    "wet-damped": 0.25,
    "mixed": 0.5,
    "dry-damped": 0.75,
    "dry-snowy": 1.0,
}


def _interp_regime(lam: float) -> tuple[dict, dict]:
    wa = _REGIME_ANCHORS["wet-flashy"]
    da = _REGIME_ANCHORS["dry-snowy"]
    weather = {k: (1.0 - lam) * wa["weather"][k] + lam * da["weather"][k] for k in wa["weather"]}
    params = {k: (1.0 - lam) * wa["params"][k] + lam * da["params"][k] for k in wa["params"]}
    return weather, params


def perturb_params(params: CatchmentParams, rel_error: float, rng) -> CatchmentParams:
    """Multiplicatively jitter every parameter by up to +/- rel_error,
    then re-clamp to the valid region."""
    d = params.as_dict()
    out = {}
    for key, val in d.items():
        factor = 1.0 + rng.uniform(-rel_error, rel_error)
        out[key] = val * factor
    out["frac_fast"] = float(np.clip(out["frac_fast"], 0.0, 1.0))
    out["k_fast"] = float(np.clip(out["k_fast"], 1e-4, 1.0))
    out["k_slow"] = float(np.clip(out["k_slow"], 1e-6, 0.9 * out["k_fast"]))
    return CatchmentParams(**out)


@dataclass
class FleetBasin:
    series: BasinSeries
    truth: CatchmentParams
    sim: CatchmentParams
    weather: WeatherConfig
    runoff_ratio: float


def make_fleet(
    n_basins: int,
    years: int,
    regime: str = "span",
    seed: int = 0,
    perturbation: float = 0.25,
    step_hours: int = 6,
    start: str = "2000-01-01T00:00:00",
) -> list[FleetBasin]:
    """Generate a fleet of synthetic basins with observed and simulated flow.

    The simulated flow comes from the same weather but parameters perturbed
    by up to +/- perturbation (relative), so it is informative but wrong.
    One burn-in year is simulated and discarded so stores start realistic.
    """
    if n_basins < 1:
        raise SimulationError(f"need at least one basin, got {n_basins}")
    if regime not in REGIMES:
        raise SimulationError(f"unknown regime {regime!r}, expected one of {REGIMES}")
    seeds = np.random.SeedSequence(seed).spawn(n_basins)
    steps_per_year = int(round(365 * 24 / step_hours))
    n_steps = (years + 1) * steps_per_year
    start_ts = np.datetime64(start, "s")
    step = np.timedelta64(step_hours * 3600, "s")
    fleet = []
    for i in range(n_basins):
        rng = np.random.default_rng(seeds[i])
        if regime == "span":
            lam = i / (n_basins - 1) if n_basins > 1 else 0.5
        else:
            lam = _REGIME_LAMBDA[regime]
        weather_kw, params_kw = _interp_regime(lam)
        # small per-basin jitter so same-regime basins are not identical
        params_kw = {k: v * (1.0 + rng.uniform(-0.08, 0.08)) for k, v in params_kw.items()}
        params_kw["frac_fast"] = float(np.clip(params_kw["frac_fast"], 0.0, 1.0))
        truth = CatchmentParams(**params_kw)
        weather_cfg = WeatherConfig(
            steps_per_year=steps_per_year,
            seed=int(rng.integers(0, 2**31 - 1)),
            **weather_kw,
        )
        precip, temp = generate_weather(n_steps, weather_cfg)
        truth_run = simulate(precip, temp, truth)
        sim_params = perturb_params(truth, perturbation, rng)
        sim_run = simulate(precip, temp, sim_params)

        keep = slice(steps_per_year, None)  # drop burn-in year
        precip_k, temp_k = precip[keep], temp[keep]
        series = BasinSeries(
            basin_id=f"b{i:02d}",
            timestamps=start_ts + step * np.arange(years * steps_per_year),
            driver_names=["precip", "temp"],
            drivers=np.column_stack([precip_k, temp_k]),
            response=truth_run.flow[keep],
            sim_response=sim_run.flow[keep],
        )
        total_p = float(precip_k.sum())
        ratio = float(truth_run.flow[keep].sum() / total_p) if total_p > 0 else 0.0
        fleet.append(FleetBasin(series=series, truth=truth, sim=sim_params, weather=weather_cfg, runoff_ratio=ratio))
    return fleet


def default_split(fleet: list[FleetBasin], val_years: int = 1, test_years: int = 2) -> SplitSpec:
    """Year-aligned chronological split: the trailing test_years are held
    out, preceded by val_years; everything earlier trains."""
    ts = fleet[0].series.timestamps
    step = ts[1] - ts[0]
    steps_per_year = int(round(np.timedelta64(365, "D") / step))
    n_years = len(ts) // steps_per_year
    if n_years < 3:
        raise SimulationError(f"need at least 3 simulated years to split, got {n_years}")
    test_years = max(1, min(test_years, n_years - 2))
    val_years = max(1, min(val_years, n_years - test_years - 1))
    end = ts[-1] + step
    test_end = end
    val_end = end - np.timedelta64(test_years * steps_per_year * int(step / np.timedelta64(1, "s")), "s")
    train_end = val_end - np.timedelta64(val_years * steps_per_year * int(step / np.timedelta64(1, "s")), "s")
    return SplitSpec(train_end=train_end, val_end=val_end, test_end=test_end)


def fleet_manifest_extras(fleet: list[FleetBasin], regime: str, years: int, seed: int, step_hours: int) -> dict:
    extras: dict[str, str] = {
        "regime": regime,
        "years": str(years),
        "seed": str(seed),
        "step_hours": str(step_hours),
    }
    for fb in fleet:
        bid = fb.series.basin_id
        extras[f"ratio.{bid}"] = f"{fb.runoff_ratio:.12g}"
        for key, val in fb.truth.as_dict().items():
            extras[f"truth.{bid}.{key}"] = f"{val:.12g}"
        for key, val in fb.sim.as_dict().items():
            extras[f"sim.{bid}.{key}"] = f"{val:.12g}"
    return extras
