"""Molecule-conditioned low-rank adaptation of a frozen character-level LM.

A hypernetwork reads a molecular graph and emits per-instance low-rank weight
updates that are transiently overlaid on a frozen decoder-only transformer.
Only the generator trains; the backbone and the graph encoder never change.
"""

from mora.tensor import Tensor, backward, reset_tape

__all__ = ["Tensor", "backward", "reset_tape"]
__version__ = "0.1.0"
