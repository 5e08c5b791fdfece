"""Two-stream object detection and instance segmentation on synthetic scenes.

Subpackages: ``numerics`` (array autodiff), ``datagen`` (synthetic shapes +
COCO-like datasets), ``model`` (backbone and the two streams), ``corr_crop``
(correlation / cropping / OHEM mask loss), ``mbrm`` (Bayesian boundary
refinement), ``pipeline`` (train / infer / eval), ``cli``.
"""

__version__ = "0.1.0"

from .kernels import BACKEND  # noqa: F401  (backend chosen at import time)
