"""Bounded-memory KV caching for streaming block-causal video generation.

The package keeps three cache partitions per layer: an immutable sink of
the earliest blocks, a ring of compressed mid-history blocks that an
affinity router taps selectively, and the most recent blocks at full
resolution.  Everything runs on numpy with optional numba kernels; see
``streamkv.numerics`` for backend selection.
"""

from streamkv.errors import ContractViolation, GenerationError, GridMismatch

__version__ = "0.1.0"

__all__ = ["ContractViolation", "GenerationError", "GridMismatch", "__version__"]
