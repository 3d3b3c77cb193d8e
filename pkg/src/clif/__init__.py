"""Continual few-shot learning engine and benchmark harness."""

__version__ = "0.1.0"

from ._kernels import BACKEND as kernel_backend  # noqa: F401
