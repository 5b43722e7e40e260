"""Hierarchical trajectory prediction: graph-attention key-position
forecasting followed by RL motion planning inside divided sub-scenes."""

__version__ = "0.1.0"
