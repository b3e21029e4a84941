"""Multimodal-depth 3D human pose lifting at desk scale.

Coarse per-joint depth and forward/backward bone labels are predicted from
2D joints, then fused by a residual linear regressor into the final pose.
"""

__version__ = "0.1.0"
