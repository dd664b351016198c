"""Kernel backend selection.

The compiled Cython module is preferred when it imported cleanly; the numpy
reference in pyref.py is the fallback. Override with the environment variable
``GRAPHTEACH_KERNELS`` set to ``python`` or ``cython`` (``auto`` is the
default). Both backends agree to within one ulp; see benchmarks/bench_kernels.py
for the speed comparison.
"""

import importlib
import os

from . import pyref

_choice = os.environ.get("GRAPHTEACH_KERNELS", "auto").lower()

_compiled = None
if _choice in ("auto", "cython"):
    try:
        _compiled = importlib.import_module(__name__ + "._fast")
    except ImportError:
        if _choice == "cython":
            raise ImportError(
                "GRAPHTEACH_KERNELS=cython but the compiled extension is not "
                "available; rebuild the package or use GRAPHTEACH_KERNELS=python"
            )

if _compiled is not None:
    BACKEND = "cython"
    _impl = _compiled
else:
    BACKEND = "python"
    _impl = pyref


def _as_seg(idx):
    import numpy as np

    return np.ascontiguousarray(idx, dtype=np.int64)


def segment_softmax(scores, seg, n):
    return _impl.segment_softmax(scores, _as_seg(seg), n)


def segment_softmax_backward(probs, grad, seg, n):
    return _impl.segment_softmax_backward(probs, grad, _as_seg(seg), n)


def segment_sum(values, seg, n):
    return _impl.segment_sum(values, _as_seg(seg), n)


def scatter_add_rows(acc, idx, values):
    return _impl.scatter_add_rows(acc, _as_seg(idx), values)
