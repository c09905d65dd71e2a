"""Desk-scale multi-view 3D detection and language grounding.

The package fuses multi-view RGB-D observations into per-voxel features,
selects object queries from them, and decodes 9-DoF boxes with a single
transformer decoder shared between a detection branch and a language
grounding branch.  Grounding adds two light modules: text-driven region
attention with per-voxel relevance supervision, and feature-wise modulation
of the visual queries by the sentence embedding.
"""

__version__ = "0.1.0"
