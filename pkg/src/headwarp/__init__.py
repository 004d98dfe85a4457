"""Talking-face reenactment by warping the feature space of a toy
style-based generator, with video/audio motion generators, SFT
calibration, and interactive editing."""

__version__ = "0.1.0"
