"""Minicube data model: NDVI derivation, validity masks, weather aggregation.

A minicube is one spatio-temporal sample: a stack of T context + K target
satellite frames on a 5-day grid, daily weather drivers for the same span,
an elevation map, masks, and identifiers. All arrays are float32; NaN in the
satellite channels means "no observation", quality == 0 means "observed but
contaminated" (cloud, shadow, snow). Both are excluded from losses/metrics.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from datetime import date, timedelta

import numpy as np

from ..errors import ContractViolationError

NDVI_EPS = 1e-8
DAYS_PER_STEP = 5
DAYS_PER_YEAR = 365

#: statistics emitted per weather variable and 5-day window, in order
WEATHER_STATS = ("min", "mean", "max", "std")

#: landcover class ids; 0 is the non-vegetated catch-all
LANDCOVER_CLASSES = {
    0: "other",
    1: "cropland",
    2: "forest",
    3: "grassland",
    4: "shrubland",
}
VEGETATED_CLASSES = (1, 2, 3, 4)


def compute_ndvi(red: np.ndarray, nir: np.ndarray) -> np.ndarray:
    """Normalized difference vegetation index, (nir - red) / (nir + red + eps).

    NaN propagates; defined values fall in [-1, 1]. The epsilon keeps the
    all-zero-reflectance case at exactly 0.
    """
    red = np.asarray(red)
    nir = np.asarray(nir)
    if red.shape != nir.shape:
        raise ContractViolationError(
            f"red/nir shape mismatch: {red.shape} vs {nir.shape}"
        )
    with np.errstate(invalid="ignore"):
        out = (nir - red) / (nir + red + np.float32(NDVI_EPS))
    return out.astype(np.float32, copy=False)


def valid_pixel_mask(quality: np.ndarray, landcover: np.ndarray) -> np.ndarray:
    """Elementwise product of the quality cuboid and the static landcover mask.

    ``quality`` is [S, H, W], ``landcover`` [H, W]; both must be binary. The
    landcover mask broadcasts over the time axis.
    """
    quality = np.asarray(quality)
    landcover = np.asarray(landcover)
    for name, arr in (("quality", quality), ("landcover", landcover)):
        if not np.isin(arr, (0, 1)).all():
            raise ContractViolationError(f"{name} mask is not binary")
    if quality.shape[-2:] != landcover.shape:
        raise ContractViolationError(
            f"spatial dims differ: {quality.shape[-2:]} vs {landcover.shape}"
        )
    return (quality * landcover[None, :, :]).astype(np.float32)


def aggregate_weather(daily: np.ndarray, stride: int = DAYS_PER_STEP) -> np.ndarray:
    """Reduce daily drivers [D, V] to per-step statistics [D/stride, 4V].

    Each 5-day window and variable yields (min, mean, max, std) with the
    population standard deviation. Columns are grouped per variable in the
    order of WEATHER_STATS.
    """
    daily = np.asarray(daily, dtype=np.float64)
    if daily.ndim == 1:
        daily = daily[:, None]
    n_days, n_vars = daily.shape
    if n_days % stride != 0:
        raise ContractViolationError(
            f"{n_days} daily rows not divisible by stride {stride}"
        )
    win = daily.reshape(n_days // stride, stride, n_vars)
    stats = np.stack(
        [win.min(axis=1), win.mean(axis=1), win.max(axis=1), win.std(axis=1)],
        axis=-1,
    )  # [S, V, 4]
    return stats.reshape(n_days // stride, n_vars * len(WEATHER_STATS)).astype(
        np.float32
    )


def weather_stats_cube(daily: np.ndarray, stride: int = DAYS_PER_STEP) -> np.ndarray:
    """Same as aggregate_weather but shaped [S, V, 4] for token-style consumers."""
    flat = aggregate_weather(daily, stride)
    n_steps = flat.shape[0]
    return flat.reshape(n_steps, -1, len(WEATHER_STATS))


def parse_day(iso: str) -> tuple[int, int]:
    """ISO date -> (year, day-of-year with Jan 1 = 0)."""
    d = date.fromisoformat(iso)
    return d.year, (d - date(d.year, 1, 1)).days


def format_day(year: int, doy: int) -> str:
    """(year, day-of-year) -> ISO date. doy may exceed the year length."""
    return (date(year, 1, 1) + timedelta(days=int(doy))).isoformat()


@dataclass
class Minicube:
    """One sample: satellite frames, weather, elevation, masks, identifiers.

    Shapes: sat_red/sat_nir/ndvi/quality are [T+K, H, W]; landcover_mask,
    landcover_class and elevation are [H, W]; weather is [5*(T+K), V].
    The optional history block carries the multi-year NDVI record of the
    same location for the non-ML baselines.
    """

    sat_red: np.ndarray
    sat_nir: np.ndarray
    ndvi: np.ndarray
    quality: np.ndarray
    landcover_mask: np.ndarray
    landcover_class: np.ndarray
    weather: np.ndarray
    elevation: np.ndarray
    time_axis: list[str]
    context_length: int
    location_id: str
    split_tag: str
    weather_variables: list[str] = field(default_factory=list)
    history_ndvi: np.ndarray | None = None
    history_quality: np.ndarray | None = None
    history_times: list[str] | None = None

    @property
    def n_steps(self) -> int:
        return self.ndvi.shape[0]

    @property
    def target_length(self) -> int:
        return self.n_steps - self.context_length

    @property
    def height(self) -> int:
        return self.ndvi.shape[1]

    @property
    def width(self) -> int:
        return self.ndvi.shape[2]

    def valid_mask(self) -> np.ndarray:
        """Combined validity cuboid: clear-sky, vegetated and observed."""
        base = valid_pixel_mask(self.quality, self.landcover_mask)
        return (base * np.isfinite(self.ndvi)).astype(np.float32)

    def validate(self) -> None:
        """Check the structural invariants; raise ContractViolationError."""
        shape = self.ndvi.shape
        if self.sat_red.shape != shape or self.sat_nir.shape != shape:
            raise ContractViolationError("satellite channels and ndvi shapes differ")
        if self.quality.shape != shape:
            raise ContractViolationError("quality mask shape differs from frames")
        hw = shape[1:]
        for name in ("landcover_mask", "landcover_class", "elevation"):
            if getattr(self, name).shape != hw:
                raise ContractViolationError(f"{name} is not [H, W]")
        for name in ("quality", "landcover_mask"):
            if not np.isin(getattr(self, name), (0, 1)).all():
                raise ContractViolationError(f"{name} contains non-binary values")
        if len(self.time_axis) != shape[0]:
            raise ContractViolationError("time axis length differs from frame count")
        if self.weather.shape[0] != DAYS_PER_STEP * shape[0]:
            raise ContractViolationError(
                f"weather has {self.weather.shape[0]} daily rows, "
                f"expected {DAYS_PER_STEP * shape[0]}"
            )
        if not 0 < self.context_length < shape[0]:
            raise ContractViolationError("context length out of range")
        both = np.isfinite(self.sat_red) & np.isfinite(self.sat_nir)
        expect = compute_ndvi(self.sat_red, self.sat_nir)
        if not np.array_equal(
            self.ndvi[both], expect[both], equal_nan=False
        ):
            raise ContractViolationError("ndvi differs from the red/nir formula")
