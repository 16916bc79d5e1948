"""Semi-supervised spatio-temporal anomaly detection on calorimeter occupancy maps."""

__version__ = "0.1.0"
