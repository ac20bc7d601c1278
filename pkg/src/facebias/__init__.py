"""Dataset-bias audit and rebalancing toolkit for face-attribute data."""

__version__ = "0.1.0"
