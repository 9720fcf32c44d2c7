"""Weather- and time-aware semantic segmentation with synthetic adverse-condition data."""

__version__ = "0.1.0"
