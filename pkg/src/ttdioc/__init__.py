"""Time-varying trajectory-cost learning from optimal demonstration segments."""

__version__ = "0.1.0"
