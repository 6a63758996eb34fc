"""Two-stage lung nodule detection on 2.5D CT slices."""

__version__ = "0.1.0"
