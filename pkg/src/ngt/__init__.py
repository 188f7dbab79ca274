"""Imitation learning with rewards from random priors, plus the checks that back it."""

__version__ = "0.1.0"
