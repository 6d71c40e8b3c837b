"""Real-time joint clock synchronization, NLoS identification and localization
from time-of-arrival measurements."""

__version__ = "0.1.0"
