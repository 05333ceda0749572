"""Kinematics-guided dynamic Gaussian splatting on motion-blurred monocular
frames: differentiable software renderer, motion-aligned covariance
refinement, dynamic-static decomposition, and a synthetic blur oracle."""

__version__ = "0.1.0"
