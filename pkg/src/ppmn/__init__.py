"""Multi-channel pyramid person matching network, built from scratch on numpy."""

__version__ = "0.1.0"
