"""Desk-scale laboratory for length generalization in diagonal linear recurrent models."""

__version__ = "0.1.0"
