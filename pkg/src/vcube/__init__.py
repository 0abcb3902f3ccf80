"""Nonuniform video cubing with learned keyframe gates, resampling and a toy decoder."""

__version__ = "0.1.0"
