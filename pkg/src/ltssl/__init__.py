"""Class-rebalanced, merged-prototype semi-supervised learning on synthetic long-tailed data."""

__version__ = "0.1.0"
