from .core import (
    DAYS_PER_STEP,
    DAYS_PER_YEAR,
    LANDCOVER_CLASSES,
    VEGETATED_CLASSES,
    WEATHER_STATS,
    Minicube,
    aggregate_weather,
    compute_ndvi,
    format_day,
    parse_day,
    valid_pixel_mask,
    weather_stats_cube,
)
from .splits import SPLIT_TAGS, SplitSpec
from .storage import load_minicube, save_minicube
from .synthetic import (
    SEASON_TARGET_STEPS,
    STEPS_PER_YEAR,
    WEATHER_VARIABLES,
    LocationWorld,
    SyntheticWorldParams,
    generate_dataset,
    simulate_location,
    synthesize_minicube,
)

__all__ = [
    "DAYS_PER_STEP",
    "DAYS_PER_YEAR",
    "LANDCOVER_CLASSES",
    "VEGETATED_CLASSES",
    "WEATHER_STATS",
    "WEATHER_VARIABLES",
    "SEASON_TARGET_STEPS",
    "SPLIT_TAGS",
    "STEPS_PER_YEAR",
    "LocationWorld",
    "Minicube",
    "SplitSpec",
    "SyntheticWorldParams",
    "aggregate_weather",
    "compute_ndvi",
    "format_day",
    "generate_dataset",
    "load_minicube",
    "parse_day",
    "save_minicube",
    "simulate_location",
    "synthesize_minicube",
    "valid_pixel_mask",
    "weather_stats_cube",
]
