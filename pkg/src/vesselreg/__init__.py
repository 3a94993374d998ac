"""Self-supervised multi-modal vessel-structure image registration.

Keypoint detection and description, attentional graph matching with a
Sinkhorn-solved partial assignment, and weighted-DLT homography estimation,
trained end to end on synthetically warped image pairs.
"""

__version__ = "0.1.0"
