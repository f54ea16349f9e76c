"""Reference-class forecasting of sales growth from firm-year panels."""

__version__ = "0.1.0"
