"""greencast: weather-conditioned forecasting of satellite-derived NDVI."""

__version__ = "0.1.0"
