"""Non-ML reference forecasters: persistence, previous year, climatology.

All three are deterministic, parameter-free and operate per pixel. They
return (ndvi [K, H, W] float32, flagged [H, W]) where flagged marks pixels
whose forecast is NaN because the required history was missing.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolationError, InsufficientDataError
from .minicube import DAYS_PER_STEP, DAYS_PER_YEAR, Minicube, parse_day

#: centered realization of a one-month (30 day) box on the 5-day grid:
#: 7 taps spanning +-15 days with half weights at the ends, total weight 6
BOX_KERNEL = np.array([0.5, 1, 1, 1, 1, 1, 0.5]) / 6.0
BOX_OFFSETS = np.arange(-3, 4)

_BINS_PER_YEAR = DAYS_PER_YEAR // DAYS_PER_STEP


@dataclass
class HistoryStack:
    """Multi-year NDVI record of one location: values, validity, timestamps."""

    ndvi: np.ndarray  # [S, H, W]
    valid: np.ndarray  # [S, H, W] bool
    years: np.ndarray  # [S] int
    doys: np.ndarray  # [S] int

    def __post_init__(self):
        if not (len(self.ndvi) == len(self.valid) == len(self.years) == len(self.doys)):
            raise ContractViolationError("history arrays disagree in length")
        days = self.years.astype(np.int64) * DAYS_PER_YEAR + self.doys
        if not (np.diff(days) > 0).all():
            raise ContractViolationError("history timestamps must strictly increase")

    @classmethod
    def from_minicube(cls, cube: Minicube) -> "HistoryStack":
        if cube.history_ndvi is None or cube.history_times is None:
            raise InsufficientDataError(
                f"minicube {cube.location_id} carries no history block"
            )
        parsed = [parse_day(t) for t in cube.history_times]
        return cls(
            ndvi=cube.history_ndvi,
            valid=(cube.history_quality > 0) & np.isfinite(cube.history_ndvi),
            years=np.array([p[0] for p in parsed]),
            doys=np.array([p[1] for p in parsed]),
        )


def persistence_forecast(context_ndvi: np.ndarray, context_valid: np.ndarray,
                         horizon: int) -> tuple[np.ndarray, np.ndarray]:
    """Every target step repeats the last valid context observation."""
    context_valid = np.asarray(context_valid).astype(bool)
    context_valid = context_valid & np.isfinite(context_ndvi)
    t = context_ndvi.shape[0]
    idx = np.where(context_valid, np.arange(t).reshape(-1, 1, 1), -1).max(axis=0)
    flagged = idx < 0
    last = np.take_along_axis(
        context_ndvi, np.maximum(idx, 0)[None], axis=0
    )[0]
    last = np.where(flagged, np.nan, last)
    out = np.broadcast_to(last, (horizon,) + last.shape).astype(np.float32)
    return out.copy(), flagged


def _target_grid(target_times: list[str]) -> tuple[np.ndarray, np.ndarray]:
    parsed = [parse_day(ts) for ts in target_times]
    years = np.array([p[0] for p in parsed])
    doys = np.array([p[1] for p in parsed])
    return years, doys


def previous_year_forecast(history: HistoryStack, target_times: list[str],
                           pad_days: int = 15) -> tuple[np.ndarray, np.ndarray]:
    """Linearly interpolate last year's valid observations at the target
    timestamps (shifted back one year). A single point extends as a constant;
    pixels with no prior-year coverage are flagged NaN."""
    t_years, t_doys = _target_grid(target_times)
    t_days = t_years * DAYS_PER_YEAR + t_doys
    src_days = history.years * DAYS_PER_YEAR + history.doys
    query = t_days - DAYS_PER_YEAR
    lo, hi = query.min() - pad_days, query.max() + pad_days
    window = (src_days >= lo) & (src_days <= hi)
    k = len(target_times)
    h, w = history.ndvi.shape[1:]
    out = np.full((k, h, w), np.nan, dtype=np.float32)
    flagged = np.ones((h, w), dtype=bool)
    sub_days = src_days[window]
    sub_vals = history.ndvi[window]
    sub_valid = history.valid[window]
    for r in range(h):
        for c in range(w):
            ok = sub_valid[:, r, c]
            if not ok.any():
                continue
            out[:, r, c] = np.interp(query, sub_days[ok], sub_vals[ok, r, c])
            flagged[r, c] = False
    return out, flagged


def box_filter(series: np.ndarray) -> np.ndarray:
    """One-month box smoothing along axis 0 with renormalized truncation at
    the edges. Written in deviation form so constants pass through exactly."""
    n = series.shape[0]
    out = series.astype(np.float64).copy()
    flat = series.reshape(n, -1).astype(np.float64)
    for i in range(n):
        j = BOX_OFFSETS + i
        inside = (j >= 0) & (j < n)
        wgt = BOX_KERNEL[inside]
        dev = flat[j[inside]] - flat[i]
        out.reshape(n, -1)[i] = flat[i] + (wgt[:, None] * dev).sum(axis=0) / wgt.sum()
    return out.reshape(series.shape)


def climatology_forecast(history: HistoryStack, target_year: int,
                         target_times: list[str]
                         ) -> tuple[np.ndarray, np.ndarray]:
    """Leave-target-year-out mean seasonal cycle, box-filter smoothed.

    Per pixel: each non-target year's valid observations are binned to the
    73-bin day-of-year grid and linearly interpolated, the per-year cycles
    are averaged, smoothed with the one-month box filter, and evaluated at
    the target timestamps. Pixels with fewer than two contributing years
    are flagged NaN.
    """
    years = np.unique(history.years)
    source_years = [y for y in years if y != target_year]
    if len(source_years) < 2:
        raise InsufficientDataError(
            f"climatology needs >= 2 non-target years, have {len(source_years)}"
        )
    h, w = history.ndvi.shape[1:]
    n_px = h * w
    bins = np.minimum(history.doys // DAYS_PER_STEP, _BINS_PER_YEAR - 1)
    grid = np.arange(_BINS_PER_YEAR)

    cycles = np.full((len(source_years), _BINS_PER_YEAR, n_px), np.nan)
    for yi, year in enumerate(source_years):
        sel = history.years == year
        ybins = bins[sel]
        vals = history.ndvi[sel].reshape(-1, n_px)
        ok = history.valid[sel].reshape(-1, n_px)
        for p in range(n_px):
            m = ok[:, p]
            if not m.any():
                continue
            b = ybins[m]
            v = vals[m, p].astype(np.float64)
            # average duplicate observations falling into one bin
            ub, inv = np.unique(b, return_inverse=True)
            sums = np.bincount(inv, weights=v)
            cnts = np.bincount(inv)
            cycles[yi, :, p] = np.interp(grid, ub, sums / cnts)
    n_years_px = np.isfinite(cycles[:, 0, :]).sum(axis=0)
    with np.errstate(invalid="ignore"):
        mean_cycle = np.nanmean(cycles, axis=0)
    mean_cycle = np.where(np.isfinite(mean_cycle), mean_cycle, 0.0)
    smooth = box_filter(mean_cycle)

    t_years, t_doys = _target_grid(target_times)
    t_bins = np.minimum(t_doys // DAYS_PER_STEP, _BINS_PER_YEAR - 1)
    out = smooth[t_bins].reshape(len(target_times), h, w).astype(np.float32)
    flagged = (n_years_px < 2).reshape(h, w)
    out[:, flagged] = np.nan
    return out, flagged


def baseline_forecast(name: str, cube: Minicube) -> tuple[np.ndarray, np.ndarray]:
    """Dispatch one of the named baselines against a minicube."""
    t = cube.context_length
    if name == "persistence":
        return persistence_forecast(
            cube.ndvi[:t], cube.quality[:t], cube.target_length
        )
    target_times = cube.time_axis[t:]
    history = HistoryStack.from_minicube(cube)
    if name == "prevyear":
        return previous_year_forecast(history, target_times)
    if name == "climatology":
        target_year = parse_day(target_times[0])[0]
        return climatology_forecast(history, target_year, target_times)
    raise ContractViolationError(f"unknown baseline {name!r}")
