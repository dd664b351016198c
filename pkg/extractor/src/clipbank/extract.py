"""Encode a class-per-folder image dataset into a TOGB embedding bank.

Per image, the 18 multi-scale views are cropped in pixel space on the
original image, resized to the encoder resolution, encoded and
L2-normalized; row 0 is the global view. One prompt per class is encoded
from the template. Class folder names define the label order, which is
written to a sidecar JSON next to the bank (the binary format itself has no
name field).
"""

import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .encoders import RESOLUTION, make_encoder
from .layout import VIEWS, crop_boxes
from .togb import SPLIT_POOL, SPLIT_QUERY, write_bank

IMAGE_SUFFIXES = {".jpg", ".jpeg", ".png", ".bmp", ".webp"}


@dataclass
class ExtractionJob:
    data_dir: str
    out_path: str
    model: str = "vit-b-16"
    template: str = "a photo of a {cls}."
    device: str = "cpu"
    query_fraction: float = 0.5
    skipped: list = field(default_factory=list)


def list_classes(data_dir):
    root = Path(data_dir)
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise FileNotFoundError(f"no class folders under {data_dir}")
    return classes


def class_images(data_dir, cls):
    folder = Path(data_dir) / cls
    return sorted(p for p in folder.iterdir()
                  if p.suffix.lower() in IMAGE_SUFFIXES)


def crop_views(img):
    """The 18 views of one image, cropped then resized to the encoder input."""
    crops = []
    for box in crop_boxes(*img.size):
        crops.append(img.crop(box).resize((RESOLUTION, RESOLUTION),
                                          Image.BILINEAR))
    return crops


def extract(job):
    """Run the extraction; returns (bank_path, num_images). Unreadable images
    are skipped with a warning; an empty class is a hard error."""
    encoder = make_encoder(job.model, device=job.device)
    classes = list_classes(job.data_dir)
    prompts = encoder.encode_texts(
        [job.template.format(cls=c.replace("_", " ")) for c in classes])

    features, labels, splits = [], [], []
    for label, cls in enumerate(classes):
        paths = class_images(job.data_dir, cls)
        rows_here = 0
        encoded = []
        for p in paths:
            try:
                with Image.open(p) as img:
                    views = crop_views(img.convert("RGB"))
            except OSError as exc:
                job.skipped.append(str(p))
                print(f"warning: skipping unreadable image {p}: {exc}",
                      file=sys.stderr)
                continue
            encoded.append(encoder.encode_images(views))
            rows_here += 1
        if rows_here == 0:
            raise FileNotFoundError(f"class {cls!r} has no readable images")
        pool_count = max(1, rows_here - max(1, round(job.query_fraction * rows_here)))
        for i, rows in enumerate(encoded):
            features.append(rows)
            labels.append(label)
            splits.append(SPLIT_POOL if i < pool_count else SPLIT_QUERY)

    features = np.stack(features).astype(np.float32)
    write_bank(job.out_path, prompts.astype(np.float32), features,
               np.asarray(labels), np.asarray(splits))
    sidecar = {
        "classes": classes,
        "model": encoder.name,
        "template": job.template,
        "views": [kind for kind, _ in VIEWS],
        "skipped": job.skipped,
    }
    with open(str(job.out_path) + ".labels.json", "w") as fh:
        json.dump(sidecar, fh, indent=2)
        fh.write("\n")
    return job.out_path, len(labels)
