"""Conditional U-Net segmentation for multi-age volumetric data.

Age and crop-position information enter a segmentation backbone through two
modules: a conditioned self-attention block at the bottleneck and dense
coordinate planes concatenated at every decoder stage.
"""

__version__ = "0.1.0"

AGE_LABELS = ("E13.5", "E14.5", "E15.5", "E16.5")
