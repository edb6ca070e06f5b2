"""Differentiable Gaussian splatting with anchor kernels, light decoupling and uncertainty splatting."""

import os

# The bundled TBB is too old for numba; pick a layer that needs no extra libraries.
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

__version__ = "0.1.0"
