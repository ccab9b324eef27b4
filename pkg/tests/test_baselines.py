import math

import numpy as np
import pytest

from greencast.baselines import (
    BOX_KERNEL,
    BOX_OFFSETS,
    HistoryStack,
    box_filter,
    climatology_forecast,
    persistence_forecast,
    previous_year_forecast,
)
from greencast.errors import ContractViolationError, InsufficientDataError
from greencast.minicube import DAYS_PER_YEAR


def make_history(values_per_year, years, doys, h=1, w=1):
    """History from a dict year -> series over the given doys."""
    ndvi = np.concatenate([
        np.tile(np.asarray(values_per_year[y], dtype=np.float32)[:, None, None],
                (1, h, w))
        for y in years
    ])
    n = len(doys)
    return HistoryStack(
        ndvi=ndvi,
        valid=np.ones_like(ndvi, dtype=bool),
        years=np.repeat(years, n),
        doys=np.tile(doys, len(years)),
    )


class TestPersistence:
    def test_last_valid_repeats(self):
        ctx = np.full((10, 1, 1), 0.62, dtype=np.float32)
        out, flagged = persistence_forecast(ctx, np.ones((10, 1, 1)), 20)
        assert out.shape == (20, 1, 1)
        assert np.allclose(out, 0.62) and not flagged.any()

    def test_all_cloudy_flags_nan(self):
        ctx = np.full((10, 1, 1), 0.5, dtype=np.float32)
        out, flagged = persistence_forecast(ctx, np.zeros((10, 1, 1)), 5)
        assert flagged.all() and np.isnan(out).all()

    def test_validity_filter_picks_valid_value(self):
        ctx = np.array([0.3, 0.9], dtype=np.float32).reshape(2, 1, 1)
        quality = np.array([1.0, 0.0]).reshape(2, 1, 1)
        out, flagged = persistence_forecast(ctx, quality, 3)
        assert np.allclose(out, 0.3) and not flagged.any()

    def test_nan_context_counts_as_invalid(self):
        ctx = np.array([0.4, np.nan], dtype=np.float32).reshape(2, 1, 1)
        out, _ = persistence_forecast(ctx, np.ones((2, 1, 1)), 2)
        assert np.allclose(out, 0.4)


class TestPreviousYear:
    def test_linear_interpolation_midpoint(self):
        hist = make_history({2020: [0.2, 0.4]}, [2020], [100, 110])
        out, flagged = previous_year_forecast(hist, ["2021-04-16"])  # doy 105
        assert out[0, 0, 0] == pytest.approx(0.3, abs=1e-6)
        assert not flagged.any()

    def test_periodic_copy_reproduces_target(self):
        doys = np.arange(2, DAYS_PER_YEAR, 5)
        series = 0.5 + 0.3 * np.sin(2 * np.pi * doys / DAYS_PER_YEAR)
        hist = make_history({2020: series}, [2020], doys)
        times = [f"2021-01-01"]  # placeholder, replaced below
        from greencast.minicube import format_day
        times = [format_day(2021, d) for d in doys[20:30]]
        out, _ = previous_year_forecast(hist, times)
        assert np.allclose(out[:, 0, 0], series[20:30], atol=1e-6)

    def test_single_point_constant_extrapolation(self):
        hist = make_history({2020: [0.7]}, [2020], [150])
        out, flagged = previous_year_forecast(
            hist, ["2021-05-10", "2021-06-10", "2021-07-10"]
        )
        assert np.allclose(out, 0.7) and not flagged.any()

    def test_no_prior_data_flags(self):
        hist = make_history({2018: [0.7, 0.6]}, [2018], [150, 160])
        out, flagged = previous_year_forecast(hist, ["2021-06-01"])
        assert flagged.all() and np.isnan(out).all()


def box_filter_bruteforce(series):
    """Direct weighted-average oracle for the truncated renormalized box."""
    n = len(series)
    out = np.empty(n)
    for i in range(n):
        num = den = 0.0
        for wgt, off in zip(BOX_KERNEL, BOX_OFFSETS):
            j = i + off
            if 0 <= j < n:
                num += wgt * series[j]
                den += wgt
        out[i] = num / den
    return out


class TestBoxFilter:
    def test_constant_preserved_exactly(self):
        x = np.full((73, 2), 0.4321, dtype=np.float64)
        assert np.array_equal(box_filter(x), x)

    def test_matches_bruteforce_convolution(self):
        rng = np.random.default_rng(3)
        x = rng.random(73)
        ours = box_filter(x[:, None])[:, 0]
        ref = box_filter_bruteforce(x)
        assert np.allclose(ours, ref, atol=1e-12)

    def test_analytic_sinusoid_attenuation(self):
        # interior bins see the full symmetric kernel: gain is the discrete
        # frequency response of [.5,1,1,1,1,1,.5]/6 at the annual frequency
        omega = 2 * np.pi / DAYS_PER_YEAR * 5.0
        gain = (1 + 2 * math.cos(omega) + 2 * math.cos(2 * omega)
                + math.cos(3 * omega)) / 6.0
        doys = np.arange(2, DAYS_PER_YEAR, 5)
        x = np.cos(2 * np.pi * doys / DAYS_PER_YEAR)
        out = box_filter(x[:, None])[:, 0]
        assert np.allclose(out[3:-3], gain * x[3:-3], atol=1e-12)


class TestClimatology:
    doys = np.arange(2, DAYS_PER_YEAR, 5)

    def _sinusoid(self, amp=0.3, mu=0.5, phase=120.0):
        return mu + amp * np.cos(2 * np.pi * (self.doys - phase) / DAYS_PER_YEAR)

    def _times(self, lo=25, hi=45):
        from greencast.minicube import format_day
        return [format_day(2021, d) for d in self.doys[lo:hi]]

    def test_matches_analytic_boxfiltered_signal(self):
        series = self._sinusoid()
        hist = make_history({y: series for y in (2017, 2018, 2019, 2020, 2021)},
                            [2017, 2018, 2019, 2020, 2021], self.doys)
        out, flagged = climatology_forecast(hist, 2021, self._times())
        omega = 2 * np.pi / DAYS_PER_YEAR * 5.0
        gain = (1 + 2 * math.cos(omega) + 2 * math.cos(2 * omega)
                + math.cos(3 * omega)) / 6.0
        expected = 0.5 + gain * 0.3 * np.cos(
            2 * np.pi * (self.doys[25:45] - 120.0) / DAYS_PER_YEAR
        )
        assert not flagged.any()
        assert np.allclose(out[:, 0, 0], expected, atol=1e-6)

    def test_target_year_leakage(self):
        series = self._sinusoid()
        years = [2017, 2018, 2019, 2020, 2021]
        clean = make_history({y: series for y in years}, years, self.doys)
        corrupted_vals = {y: series for y in years[:-1]}
        corrupted_vals[2021] = series + 5.0
        corrupt = make_history(corrupted_vals, years, self.doys)
        a, _ = climatology_forecast(clean, 2021, self._times())
        b, _ = climatology_forecast(corrupt, 2021, self._times())
        assert np.array_equal(a, b)

    def test_constant_history_gives_constant(self):
        series = np.full(73, 0.37)
        hist = make_history({y: series for y in (2018, 2019, 2020)},
                            [2018, 2019, 2020], self.doys)
        out, _ = climatology_forecast(hist, 2021, self._times())
        assert np.allclose(out, 0.37, atol=1e-7)

    def test_invariant_to_source_year_permutation(self):
        rng = np.random.default_rng(5)
        blocks = {y: rng.random(73) for y in (2017, 2018, 2019)}
        hist_a = make_history(blocks, [2017, 2018, 2019], self.doys)
        swapped = {2017: blocks[2019], 2018: blocks[2018], 2019: blocks[2017]}
        hist_b = make_history(swapped, [2017, 2018, 2019], self.doys)
        a, _ = climatology_forecast(hist_a, 2021, self._times())
        b, _ = climatology_forecast(hist_b, 2021, self._times())
        assert np.allclose(a, b, atol=1e-12)

    def test_insufficient_years_rejected(self):
        hist = make_history({2020: self._sinusoid()}, [2020], self.doys)
        with pytest.raises(InsufficientDataError):
            climatology_forecast(hist, 2021, self._times())

    def test_gappy_pixel_interpolated(self):
        series = self._sinusoid()
        years = [2018, 2019, 2020]
        hist = make_history({y: series for y in years}, years, self.doys)
        hist.valid[30:40] = False  # gap inside 2018
        out, flagged = climatology_forecast(hist, 2021, self._times())
        assert not flagged.any() and np.isfinite(out).all()

    def test_pixel_with_too_few_years_flagged(self):
        series = self._sinusoid()
        years = [2018, 2019, 2020]
        hist = make_history({y: series for y in years}, years, self.doys)
        hist.valid[:146] = False  # kills 2018 and 2019 entirely
        out, flagged = climatology_forecast(hist, 2021, self._times())
        assert flagged.all() and np.isnan(out).all()


class TestHistoryStack:
    def test_nonmonotone_rejected(self):
        with pytest.raises(ContractViolationError):
            HistoryStack(
                ndvi=np.zeros((2, 1, 1), dtype=np.float32),
                valid=np.ones((2, 1, 1), dtype=bool),
                years=np.array([2020, 2019]),
                doys=np.array([5, 5]),
            )

    def test_from_minicube_requires_history(self, cube_factory):
        cube = cube_factory(np.full((30, 2, 2), 0.5, dtype=np.float32))
        with pytest.raises(InsufficientDataError):
            HistoryStack.from_minicube(cube)
