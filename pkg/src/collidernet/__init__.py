"""Collider-aware prognosis networks on a simulated lung-nodule cohort."""

__version__ = "0.1.0"
