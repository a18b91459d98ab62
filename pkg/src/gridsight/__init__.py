"""gridsight: multi-head state-action recognition on synthetic RGB-D gridworlds."""

__version__ = "0.1.0"
