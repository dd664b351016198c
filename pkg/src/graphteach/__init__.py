"""Few-shot cache-adapter training under a training-only graph teacher.

The permanent model is a key-value cache classifier over precomputed,
L2-normalized embeddings; during training its adapter is co-trained with a
heterogeneous patch-text graph transformer that is discarded afterwards, so
inference is exactly the cache path.
"""

__version__ = "0.1.0"

from ._accel import BACKEND as kernel_backend

__all__ = ["__version__", "kernel_backend"]
