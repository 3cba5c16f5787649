"""Cross-modal semantic communication simulator for heterogeneous collaborative perception."""

__version__ = "0.1.0"
