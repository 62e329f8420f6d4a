"""Desk-scale rectified-flow colorization with decoupled training and progressive DPO."""

__version__ = "0.1.0"
