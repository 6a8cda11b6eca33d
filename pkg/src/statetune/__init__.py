"""State tuning for matrix-valued recurrent state models."""

from ._backend import BACKEND

__version__ = "0.1.0"
