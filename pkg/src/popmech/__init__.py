"""Population mechanics: learn a population energy from snapshot data and roll it forward."""
__version__ = "0.1.0"
