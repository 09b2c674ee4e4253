"""Conditional flow matching for kinematic event generation and detector unfolding."""

__version__ = "0.1.0"
