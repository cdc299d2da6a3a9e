"""HAB detection and forecasting from event-centred satellite datacubes."""

__version__ = "0.1.0"
