"""Ground-fault simulation and string-level fault localization for TN-earthed PV inverters."""

__version__ = "0.1.0"
