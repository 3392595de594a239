"""Next-window reaction prediction for social-network activity logs."""

__version__ = "0.1.0"
