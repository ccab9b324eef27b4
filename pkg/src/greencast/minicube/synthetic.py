"""Synthetic minicube benchmark with a known weather -> vegetation response.

Each location simulates a small world over several years: daily weather with
seasonal cycles and autoregressive anomalies, and an NDVI field

    ndvi(p, s) = mu(p) + amp(p) * cos(2*pi*(doy - peak(p)) / 365)
                 + s_temp(p) * Tanom(s) + s_rain(p) * Rmem(p, s) + noise

where Tanom is the standardized temperature anomaly of the 5-day window and
Rmem an exponential rainfall-anomaly memory (per-pixel decay constant). The
response is causal in the provided weather, so conditioning a forecaster on
future weather is provably informative, while the rainfall memory gives a
no-weather model something to extrapolate from context.

Reflectances are back-solved from NDVI so that the stored ndvi equals the
red/nir formula bit-exactly. Cloud blobs overwrite the reflectances with
bright values, so occluded pixels carry no information about the surface.
Everything is deterministic under the seed.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from ..errors import ContractViolationError
from .core import (
    DAYS_PER_STEP,
    DAYS_PER_YEAR,
    Minicube,
    compute_ndvi,
    format_day,
)
from .splits import SplitSpec
from .storage import save_minicube

STEPS_PER_YEAR = DAYS_PER_YEAR // DAYS_PER_STEP  # 73

WEATHER_VARIABLES = [
    "rainfall",
    "pressure",
    "temp_mean",
    "temp_min",
    "temp_max",
    "wind",
    "humidity",
    "radiation",
]

# per-landcover bases: (mean ndvi, seasonal amplitude, temp sens, rain sens)
CLASS_RESPONSE = {
    0: (0.10, 0.02, 0.000, 0.00),  # other (non-vegetated)
    1: (0.42, 0.22, 0.040, 0.18),  # cropland
    2: (0.62, 0.14, 0.020, 0.08),  # forest
    3: (0.50, 0.19, 0.050, 0.20),  # grassland
    4: (0.32, 0.13, 0.040, 0.15),  # shrubland
}

#: relative weight of the second harmonic; makes the cycle asymmetric so the
#: seasonal phase is identifiable from a short context window
SECOND_HARMONIC = 0.4

# target-period start steps for the four growing-season windows (MAM..SON)
SEASON_TARGET_STEPS = (11, 23, 35, 48)

_POOL_CODES = {"core": 1, "held": 2}
_SPLIT_CODES = {"train": 1, "val": 2, "ood-t": 3, "ood-s": 4, "ood-st": 5}


@dataclass
class SyntheticWorldParams:
    """Knobs of the synthetic world. Fixed seed => bit-identical minicubes."""

    seed: int = 0
    height: int = 32
    width: int = 32
    context_length: int = 10
    target_length: int = 20
    start_year: int = 2018
    n_years: int = 4
    cloud_rate: float = 0.25
    noise_scale: float = 0.02
    missing_rate: float = 0.0
    seasonal_scale: float = 1.0
    temp_sensitivity: float = 1.0
    rain_sensitivity: float = 1.0
    rain_memory_days: float = 60.0
    rain_memory_spread: float = 0.15
    landcover_smoothness: float = 6.0
    coeff_smoothness: float = 8.0
    window_jitter_steps: int = 2

    def validate(self) -> None:
        if not 0.0 <= self.cloud_rate <= 1.0:
            raise ContractViolationError("cloud_rate must be in [0, 1]")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ContractViolationError("missing_rate must be in [0, 1)")
        if self.n_years < 2:
            raise ContractViolationError("need at least 2 simulated years")
        if min(self.height, self.width, self.context_length, self.target_length) < 1:
            raise ContractViolationError("sizes must be positive")
        if self.rain_memory_days <= 0:
            raise ContractViolationError("rain_memory_days must be positive")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LocationWorld:
    """Fully simulated location: coefficient grids, weather, observed frames."""

    location_id: str
    landcover_class: np.ndarray  # [H, W] int
    landcover_mask: np.ndarray  # [H, W] {0,1}
    elevation: np.ndarray  # [H, W] meters
    daily_weather: np.ndarray  # [n_years*365, V]
    ndvi_obs: np.ndarray  # [S_all, H, W] observed (incl. clouds/noise)
    sat_red: np.ndarray
    sat_nir: np.ndarray
    quality: np.ndarray  # [S_all, H, W] {0,1}
    n_steps: int


def _smooth_field(rng: np.random.Generator, shape, sigma: float) -> np.ndarray:
    """Spatially smoothed white noise, rescaled to zero mean / unit std."""
    f = gaussian_filter(rng.standard_normal(shape), sigma=sigma, mode="wrap")
    f -= f.mean()
    std = f.std()
    return f / std if std > 0 else f


def _ar1(rng: np.random.Generator, n: int, rho: float) -> np.ndarray:
    """AR(1) series with unit stationary variance."""
    innov = rng.standard_normal(n) * np.sqrt(1.0 - rho * rho)
    out = np.empty(n)
    out[0] = rng.standard_normal()
    for i in range(1, n):
        out[i] = rho * out[i - 1] + innov[i]
    return out


def _temp_climatology(doy: np.ndarray) -> np.ndarray:
    return 1.2 + 0.9 * np.cos(2 * np.pi * (doy - 200) / DAYS_PER_YEAR)


def _rain_climatology(doy: np.ndarray) -> np.ndarray:
    return 0.45 + 0.2 * np.cos(2 * np.pi * (doy - 30) / DAYS_PER_YEAR)


def _simulate_weather(rng: np.random.Generator, n_days: int) -> np.ndarray:
    """Daily drivers [n_days, 8] in unit-scaled magnitudes."""
    doy = np.arange(n_days) % DAYS_PER_YEAR
    t_anom = _ar1(rng, n_days, rho=0.85)
    rain = np.maximum(0.0, _rain_climatology(doy) + 0.5 * _ar1(rng, n_days, 0.7))
    spread = 0.3 + 0.1 * np.abs(_ar1(rng, n_days, 0.5))
    temp_mean = _temp_climatology(doy) + 0.25 * t_anom
    cols = np.stack(
        [
            rain,
            _ar1(rng, n_days, 0.9),  # pressure (decoy)
            temp_mean,
            temp_mean - spread,
            temp_mean + spread,
            np.abs(_ar1(rng, n_days, 0.6)),  # wind (decoy)
            np.clip(0.6 + 0.15 * _ar1(rng, n_days, 0.8), 0.0, 1.0),  # humidity
            np.maximum(
                0.0,
                1.8 + 1.2 * np.cos(2 * np.pi * (doy - 172) / DAYS_PER_YEAR)
                + 0.2 * _ar1(rng, n_days, 0.5),
            ),  # radiation
        ],
        axis=1,
    )
    return cols


def _rain_memory(
    rain: np.ndarray, alpha: np.ndarray, doy: np.ndarray
) -> np.ndarray:
    """Exponential moving memory of daily rainfall anomalies, per pixel.

    Returns [n_days, H, W], standardized per pixel over the simulated span.
    """
    anom = rain - _rain_climatology(doy)
    mem = np.zeros_like(alpha)
    out = np.empty((rain.size,) + alpha.shape, dtype=np.float64)
    for d in range(rain.size):
        mem = alpha * mem + (1.0 - alpha) * anom[d]
        out[d] = mem
    out -= out.mean(axis=0)
    std = out.std(axis=0)
    std[std == 0] = 1.0
    return out / std


def _exact_rate_mask(fields: np.ndarray, rate: float) -> np.ndarray:
    """Per-step binary mask with exactly round(rate * H * W) zeros per frame."""
    n_steps, h, w = fields.shape
    n_px = h * w
    k = int(round(rate * n_px))
    mask = np.ones((n_steps, n_px), dtype=np.float32)
    if k > 0:
        flat = fields.reshape(n_steps, n_px)
        order = np.argsort(flat, axis=1, kind="stable")
        rows = np.repeat(np.arange(n_steps), k)
        mask[rows, order[:, :k].ravel()] = 0.0
    return mask.reshape(n_steps, h, w)


def simulate_location(
    params: SyntheticWorldParams, pool: str, index: int
) -> LocationWorld:
    """Build the full multi-year world for one location, deterministically."""
    params.validate()
    if pool not in _POOL_CODES:
        raise ContractViolationError(f"unknown location pool {pool!r}")
    ss = np.random.SeedSequence([params.seed, _POOL_CODES[pool], index])
    r_lc, r_coeff, r_weather, r_cloud, r_noise, r_bright = [
        np.random.default_rng(s) for s in ss.spawn(6)
    ]
    h, w = params.height, params.width
    hw = (h, w)

    # landcover: argmax over per-class smooth fields, biased against class 0
    lc_fields = np.stack(
        [_smooth_field(r_lc, hw, params.landcover_smoothness) for _ in range(5)]
    )
    lc_fields[0] -= 0.9
    landcover = np.argmax(lc_fields, axis=0).astype(np.int64)
    veg_mask = (landcover > 0).astype(np.float32)

    base = np.array([CLASS_RESPONSE[c] for c in range(5)])
    pick = lambda col: base[landcover, col]
    f_mu, f_amp, f_phase, f_st, f_sr, f_alpha = [
        _smooth_field(r_coeff, hw, params.coeff_smoothness) for _ in range(6)
    ]
    texture = 0.015 * r_coeff.standard_normal(hw)
    mu = pick(0) + 0.05 * f_mu + texture
    amp = params.seasonal_scale * pick(1) * (1.0 + 0.2 * f_amp)
    peak_doy = 160.0 + 10.0 * f_phase
    s_temp = params.temp_sensitivity * pick(2) * (1.0 + 0.3 * f_st)
    s_rain = params.rain_sensitivity * pick(3) * (1.0 + 0.3 * f_sr)
    alpha = np.exp(
        -1.0
        / (params.rain_memory_days * (1.0 + params.rain_memory_spread * f_alpha))
    )
    elevation = 600.0 + 350.0 * _smooth_field(r_coeff, hw, params.coeff_smoothness)

    # simulate one burn-in year before start_year so memory states are mixed
    n_days_total = (params.n_years + 1) * DAYS_PER_YEAR
    weather_all = _simulate_weather(r_weather, n_days_total)
    doy_all = np.arange(n_days_total) % DAYS_PER_YEAR
    rmem_all = _rain_memory(weather_all[:, 0], alpha, doy_all)
    t_anom_all = (weather_all[:, 2] - _temp_climatology(doy_all)) / 0.25

    burn = DAYS_PER_YEAR
    daily_weather = weather_all[burn:].astype(np.float32)
    n_steps = params.n_years * STEPS_PER_YEAR

    # observation day = middle of each 5-day window
    obs_day = burn + np.arange(n_steps) * DAYS_PER_STEP + 2
    obs_doy = (obs_day - burn) % DAYS_PER_YEAR
    win_start = burn + np.arange(n_steps) * DAYS_PER_STEP
    t_anom_step = np.stack(
        [t_anom_all[s : s + DAYS_PER_STEP].mean() for s in win_start]
    )

    theta = 2 * np.pi * (obs_doy[:, None, None] - peak_doy[None]) / DAYS_PER_YEAR
    season = amp[None] * (np.cos(theta) + SECOND_HARMONIC * np.sin(2 * theta))
    anomaly = (
        s_temp[None] * t_anom_step[:, None, None]
        + s_rain[None] * rmem_all[obs_day]
    )
    ndvi_clean = mu[None] + veg_mask[None] * (season + anomaly)
    ndvi_clean += (1.0 - veg_mask[None]) * 0.3 * season
    noise = params.noise_scale * r_noise.standard_normal((n_steps, h, w))
    ndvi_true = np.clip(ndvi_clean + noise, -0.15, 0.97)

    # back-solve reflectances from a static per-pixel brightness
    brightness = np.clip(
        0.22
        + 0.08 * _smooth_field(r_bright, hw, params.coeff_smoothness)
        + 0.02 * r_bright.standard_normal(hw),
        0.08,
        0.5,
    )
    red = brightness[None] * (1.0 - ndvi_true) / 2.0
    nir = brightness[None] * (1.0 + ndvi_true) / 2.0

    # clouds occlude: bright reflectance, near-zero ndvi
    cloud_field = gaussian_filter(
        r_cloud.standard_normal((n_steps, h, w)), sigma=(0.6, 4.0, 4.0), mode="wrap"
    )
    quality = _exact_rate_mask(-cloud_field, params.cloud_rate)
    cloudy = quality == 0.0
    if cloudy.any():
        c_bright = np.clip(
            0.45 + 0.08 * cloud_field + 0.04 * r_cloud.standard_normal(cloud_field.shape),
            0.2,
            0.9,
        )
        tilt = 0.03 * r_cloud.standard_normal(cloud_field.shape)
        red = np.where(cloudy, c_bright * (1.0 + tilt), red)
        nir = np.where(cloudy, c_bright * (1.0 - tilt), nir)

    if params.missing_rate > 0.0:
        gone = r_noise.random((n_steps, h, w)) < params.missing_rate
        red = np.where(gone, np.nan, red)
        nir = np.where(gone, np.nan, nir)
        quality = np.where(gone, 0.0, quality).astype(np.float32)

    red = red.astype(np.float32)
    nir = nir.astype(np.float32)
    return LocationWorld(
        location_id=f"{pool}{index:04d}",
        landcover_class=landcover,
        landcover_mask=veg_mask,
        elevation=elevation.astype(np.float32),
        daily_weather=daily_weather,
        ndvi_obs=compute_ndvi(red, nir),
        sat_red=red,
        sat_nir=nir,
        quality=quality.astype(np.float32),
        n_steps=n_steps,
    )


def _cut_window(
    params: SyntheticWorldParams,
    world: LocationWorld,
    split_tag: str,
    year: int,
    start_step: int,
    include_history: bool,
) -> Minicube:
    n_total = params.context_length + params.target_length
    end = start_step + n_total
    if not 0 <= start_step and end <= world.n_steps:
        raise ContractViolationError("window exceeds simulated span")
    sl = slice(start_step, end)
    day0 = start_step * DAYS_PER_STEP
    weather = world.daily_weather[day0 : day0 + DAYS_PER_STEP * n_total]
    times = [
        format_day(
            params.start_year + (DAYS_PER_STEP * s + 2) // DAYS_PER_YEAR,
            (DAYS_PER_STEP * s + 2) % DAYS_PER_YEAR,
        )
        for s in range(start_step, end)
    ]
    cube = Minicube(
        sat_red=world.sat_red[sl].copy(),
        sat_nir=world.sat_nir[sl].copy(),
        ndvi=world.ndvi_obs[sl].copy(),
        quality=world.quality[sl].copy(),
        landcover_mask=world.landcover_mask.copy(),
        landcover_class=world.landcover_class.astype(np.float32),
        weather=weather.copy(),
        elevation=world.elevation.copy(),
        time_axis=times,
        context_length=params.context_length,
        location_id=world.location_id,
        split_tag=split_tag,
        weather_variables=list(WEATHER_VARIABLES),
    )
    if include_history:
        cube.history_ndvi = world.ndvi_obs.copy()
        cube.history_quality = world.quality.copy()
        cube.history_times = [
            format_day(
                params.start_year + (DAYS_PER_STEP * s + 2) // DAYS_PER_YEAR,
                (DAYS_PER_STEP * s + 2) % DAYS_PER_YEAR,
            )
            for s in range(world.n_steps)
        ]
    return cube


def synthesize_minicube(
    params: SyntheticWorldParams,
    split_tag: str,
    index: int,
    split_spec: SplitSpec | None = None,
    include_history: bool | None = None,
    world: LocationWorld | None = None,
) -> Minicube:
    """Generate the index-th minicube of a split.

    Train/val/ood-t cubes share the "core" location pool (val and ood-t reuse
    training locations at held-out years); ood-s/ood-st draw from the "held"
    pool. History is attached to evaluation splits by default.
    """
    spec = split_spec or SplitSpec()
    spec.validate()
    if split_tag not in spec.years:
        raise ContractViolationError(f"unknown split tag {split_tag!r}")
    pool = spec.pools[split_tag]
    if include_history is None:
        include_history = split_tag != "train"
    if world is None:
        world = simulate_location(params, pool, index)

    rng = np.random.default_rng(
        np.random.SeedSequence([params.seed, _SPLIT_CODES[split_tag], index, 7])
    )
    years = spec.years[split_tag]
    year = int(years[rng.integers(len(years))])
    if not params.start_year <= year < params.start_year + params.n_years:
        raise ContractViolationError(
            f"split year {year} outside simulated span "
            f"[{params.start_year}, {params.start_year + params.n_years})"
        )
    target_step = int(SEASON_TARGET_STEPS[rng.integers(len(SEASON_TARGET_STEPS))])
    jitter = int(
        rng.integers(-params.window_jitter_steps, params.window_jitter_steps + 1)
    )
    year_idx = year - params.start_year
    start = year_idx * STEPS_PER_YEAR + target_step - params.context_length + jitter
    n_total = params.context_length + params.target_length
    start = max(year_idx * STEPS_PER_YEAR, min(start, world.n_steps - n_total))
    return _cut_window(params, world, split_tag, year, start, include_history)


def generate_dataset(
    params: SyntheticWorldParams,
    counts: dict[str, int],
    out_dir: str | Path,
    split_spec: SplitSpec | None = None,
) -> dict:
    """Write `counts[split]` minicubes per split under out_dir.

    Returns the dataset manifest (also written to splits.json).
    """
    spec = split_spec or SplitSpec()
    spec.validate()
    params.validate()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cubes: dict[str, list[str]] = {}
    for split, n in counts.items():
        if split not in spec.years:
            raise ContractViolationError(f"unknown split {split!r} in counts")
        names = []
        for i in range(int(n)):
            cube = synthesize_minicube(params, split, i, split_spec=spec)
            name = f"{split}_{i:04d}"
            save_minicube(cube, out / name)
            names.append(name)
        cubes[split] = names
    manifest = {
        "params": params.to_dict(),
        "splits": spec.to_dict(),
        "counts": {k: int(v) for k, v in counts.items()},
        "cubes": cubes,
    }
    (out / "splits.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest
