"""Split-attention CNN trainer for equalized CT patches."""

__version__ = "0.1.0"
