"""TOGB bank writer (the cross-package file contract).

Layout: magic "TOGB", little-endian u32 (version=1, D, C, M, num_images),
C x D float32 prompt rows, then per image: u32 label, u8 split tag, u16
foreground count plus that many u16 indices (0 when absent), M x D float32
feature rows. Split tags: 0 = support pool, 1 = query.
"""

import struct

import numpy as np

MAGIC = b"TOGB"
VERSION = 1
SPLIT_POOL = 0
SPLIT_QUERY = 1


def write_bank(path, prompts, features, labels, splits):
    """features: (N, M, D) float32-compatible with unit rows; prompts (C, D)."""
    prompts = np.ascontiguousarray(prompts, dtype="<f4")
    features = np.ascontiguousarray(features, dtype="<f4")
    n, m, d = features.shape
    c = prompts.shape[0]
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<5I", VERSION, d, c, m, n))
        fh.write(prompts.tobytes())
        for i in range(n):
            fh.write(struct.pack("<IBH", int(labels[i]), int(splits[i]), 0))
            fh.write(features[i].tobytes())
