"""AnyExperts - importance-driven dynamic expert allocation for Mixture-of-Experts layers."""

__version__ = "0.1.0"
