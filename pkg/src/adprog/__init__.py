"""Forecast NL / MCI / dementia diagnoses from longitudinal visit data with
the All-Pairs transform and a small numpy MLP."""

__version__ = "0.1.0"
