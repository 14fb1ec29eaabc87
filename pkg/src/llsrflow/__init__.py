"""Conditional normalizing flow for joint low-light enhancement and super-resolution."""

__version__ = "0.1.0"
CHECKPOINT_FORMAT_VERSION = 1
