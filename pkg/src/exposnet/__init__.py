"""ExposNet: multi-modal CNN for area-level RF-EMF exposure prediction."""

__version__ = "0.1.0"
