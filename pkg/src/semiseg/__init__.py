"""Semi-supervised segmentation of endoscopic video with two cross-supervising
networks, uncertainty-filtered pseudo-labels and temporal post-correction."""

__version__ = "0.1.0"
