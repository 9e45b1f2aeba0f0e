"""Simulated cannula lightpipe camera with linear and learned reconstruction."""

__version__ = "0.1.0"
