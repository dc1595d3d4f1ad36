"""Edge tuning at desk scale: frozen cloud backbone, gathered features, small edge network."""

__version__ = "0.1.0"
