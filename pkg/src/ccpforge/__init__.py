"""ccpforge: parse, run, transform and verify concurrent constraint programs."""

__version__ = "0.1.0"
