"""Time-aggregation architectures for sparse longitudinal clinical forecasting."""

__version__ = "0.1.0"
