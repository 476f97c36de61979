"""Transportation mode inference from raw GPS trajectories."""

__version__ = "0.1.0"
