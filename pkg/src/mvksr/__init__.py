"""Multi-view knowledge-guided scene recovery for hazy and rainy images."""

__version__ = "0.1.0"
