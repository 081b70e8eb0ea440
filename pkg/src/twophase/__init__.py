"""Two-phase weakly supervised object localization toolkit."""

__version__ = "0.1.0"
