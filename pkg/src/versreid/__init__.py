"""Two-stage prompt-based multi-scene person re-identification at desk scale."""

__version__ = "0.1.0"
