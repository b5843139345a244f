"""Desk-scale view-consistent sampling for neural radiance fields.

Submodules cover camera geometry, synthetic multi-view data, feature maps and
projector distillation, consistency scoring, PDF sampling, the radiance field
MLP, volume rendering, objectives and the training loop.
"""

__version__ = "0.1.0"
