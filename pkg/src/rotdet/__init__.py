"""Oriented object detection transformer at desk scale.

Subpackages:
    numcore   -- f64 tensors with tape-based reverse-mode differentiation
    geometry  -- rotated-box algebra and exact rotated IoU
    losses    -- point set / focal / L1 / rotated-IoU losses
    matching  -- Hungarian one-to-one and center-top-k one-to-many assignment
    attention -- anchor positional encoding, self-attention, (rotation-
                 sensitive) deformable attention
    model     -- the assembled detector and its optimizer
    harness   -- synthetic scenes, training, evaluation, ablations, CLI
"""

__version__ = "0.1.0"
