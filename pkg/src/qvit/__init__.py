"""Quantum self-attention vision transformers at desk scale.

Exact state-vector simulation of the Ry-CNOT pair circuits that replace the
K/Q/V projections of a transformer's attention, a minimal reverse-mode
tensor engine to train around them, and a classical-to-quantum knowledge
distillation pipeline.
"""

from ._kernels import BACKEND_NAME as kernel_backend

__version__ = "0.1.0"

__all__ = ["kernel_backend", "__version__"]
