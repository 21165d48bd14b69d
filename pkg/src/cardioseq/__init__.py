"""Temporally consistent myocardial segmentation of cine MR sequences."""

__version__ = "0.1.0"
