"""Recurrent attentional REINFORCE agent for multi-label image recognition."""

__version__ = "0.1.0"
