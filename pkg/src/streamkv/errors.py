"""Shared exception types.

ValueError is reserved for bad arguments (shapes, ranges, unknown names).
The types below mark the other failure families so callers can tell a
caller-sequencing bug apart from a bad input.
"""

from __future__ import annotations


class ContractViolation(RuntimeError):
    """A caller broke a sequencing or state contract, not an argument check.

    Examples: feeding decode blocks out of order, appending a cache block
    without the backup it owes, asking the router for a cached selection
    before any step-1 routing happened.
    """


class GridMismatch(RuntimeError):
    """Two token grids that must end up identical disagree.

    Raised instead of silently cropping or broadcasting; the message carries
    both shapes.
    """


class GenerationError(RuntimeError):
    """Wraps any failure inside the generation loop with the block index."""

    def __init__(self, block_index: int, message: str):
        super().__init__(f"block {block_index}: {message}")
        self.block_index = block_index
