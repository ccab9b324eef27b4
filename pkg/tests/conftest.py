import numpy as np
import pytest

from greencast.minicube import DAYS_PER_STEP, Minicube, compute_ndvi, format_day


def make_cube(ndvi, quality=None, landcover_class=None, context_length=10,
              year=2021, start_doy=100, location_id="test0000",
              split_tag="ood-t", history=None):
    """Build a consistent Minicube from an NDVI cuboid for unit tests.

    Reflectances are back-solved from the NDVI so validation passes; weather
    is zero-filled. ``history`` may be (ndvi, quality, times) arrays.
    """
    ndvi = np.asarray(ndvi, dtype=np.float32)
    s, h, w = ndvi.shape
    brightness = np.float32(0.3)
    red = (brightness * (1 - ndvi) / 2).astype(np.float32)
    nir = (brightness * (1 + ndvi) / 2).astype(np.float32)
    cube = Minicube(
        sat_red=red,
        sat_nir=nir,
        ndvi=compute_ndvi(red, nir),
        quality=(np.ones((s, h, w), dtype=np.float32)
                 if quality is None else np.asarray(quality, dtype=np.float32)),
        landcover_mask=None,
        landcover_class=(np.ones((h, w), dtype=np.float32)
                         if landcover_class is None
                         else np.asarray(landcover_class, dtype=np.float32)),
        weather=np.zeros((DAYS_PER_STEP * s, 8), dtype=np.float32),
        elevation=np.full((h, w), 500.0, dtype=np.float32),
        time_axis=[format_day(year, start_doy + DAYS_PER_STEP * i) for i in range(s)],
        context_length=context_length,
        location_id=location_id,
        split_tag=split_tag,
    )
    cube.landcover_mask = (cube.landcover_class > 0).astype(np.float32)
    if history is not None:
        cube.history_ndvi, cube.history_quality, cube.history_times = history
    cube.validate()
    return cube


@pytest.fixture
def cube_factory():
    return make_cube
