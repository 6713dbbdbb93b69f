"""Binary-level PE attacks, robustness preprocessing and a monotone detector."""

__version__ = "0.1.0"
