"""Recurrent late-to-early temporal fusion for LiDAR 3D object detection.

A desk-scale, framework-free pipeline: sparse pillar encoding, ego-pose
inverse calibration of BEV feature maps, window-based attention fusion,
foreground-gated recurrence, a center-heatmap detection head, and a
deterministic synthetic LiDAR world to exercise it all.
"""

__version__ = "0.1.0"
