"""Duplex-encoder RGB-Normal road scene segmentation.

Two independently parameterized encoders extract multi-scale features from an
RGB image and a surface-normal image; the features are fused per scale with
channel self-attention, recalibrated with a gated channel weighting, refined
by a multi-scale deformable-attention pixel decoder, and decoded into per-query
class and mask predictions that reduce to a semantic label map.
"""

__version__ = "0.1.0"
