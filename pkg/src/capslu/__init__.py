"""capslu: spoken-language-understanding pipeline for dysarthric speech.

Synthetic severity-stratified corpora, a dilated-convolution acoustic
encoder with two-stage pretraining and frozen bottleneck-feature
extraction, a capsule-network slot decoder trained by dynamic routing,
and the evaluation harness (learning curves, low-resource protocol,
intelligibility-transfer reports).
"""

from .kernels import BACKEND

__version__ = "0.1.0"

__all__ = ["BACKEND", "__version__"]
