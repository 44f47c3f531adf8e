"""HSMCFL: hard-sample-mining contrastive feature learning for fault diagnosis."""

__version__ = "0.1.0"
