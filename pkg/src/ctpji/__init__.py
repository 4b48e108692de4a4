"""CT preprocessing and evaluation pipeline for hip-implant infection screening."""

__version__ = "0.1.0"
