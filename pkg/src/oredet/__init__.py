"""Few-shot ore particle detector.

A lightweight two-stage detector conditioned on a handful of support
crops: support feature maps are mined with axial permute-MLP encoders,
correlated against the query pyramid to form attention maps, decoded
into likelihood-scored proposals, and classified by a dual-resolution
RoI head whose final score is the product of both stage likelihoods.
Everything runs on a small numpy tensor engine with reverse-mode
gradients; no GPU or deep-learning framework is required.
"""

from . import tensor
from .config import Config

__version__ = "0.1.0"

__all__ = ["tensor", "Config", "__version__"]
