"""Offline structure-from-motion for monocular video.

Pipeline: flow-guided keyframe selection -> keyframe association ->
sequential and covisible joint depth/pose optimization -> pose-graph
optimization -> per-frame refinement -> geometry-aware depth filtering.
"""

__version__ = "0.1.0"
