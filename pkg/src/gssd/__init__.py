"""Grouped single-shot multibox detector for multi-phase volumetric lesion
detection, built on a small from-scratch autodiff engine."""

from gssd.tensor import Tensor, dtype_scope

__all__ = ["Tensor", "dtype_scope"]
__version__ = "0.1.0"
