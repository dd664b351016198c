"""Image/text encoders behind a tiny common interface.

The production encoder wraps a frozen pretrained CLIP from transformers.
The stub encoder is a deterministic pixel-hash embedding used by the tests
and by offline smoke runs; it exercises the full extraction pipeline
(cropping, resizing, normalization, bank layout) without model weights.
"""

import hashlib

import numpy as np

RESOLUTION = 224

CLIP_MODELS = {
    "vit-b-16": "openai/clip-vit-base-patch16",
    "vit-b-32": "openai/clip-vit-base-patch32",
    "vit-l-14": "openai/clip-vit-large-patch14",
}


class StubEncoder:
    """Deterministic stand-in encoder: a fixed random projection of the
    resized grayscale pixels. Same pixels always give the same embedding."""

    name = "stub-512"

    def __init__(self, dim=512, seed=7):
        self.dim = dim
        rng = np.random.default_rng(seed)
        self._proj = rng.normal(size=(256, dim)) / 16.0

    def encode_images(self, images):
        rows = np.empty((len(images), self.dim), dtype=np.float64)
        for i, img in enumerate(images):
            gray = img.convert("L").resize((16, 16))
            px = np.asarray(gray, dtype=np.float64).ravel() / 255.0
            px = px - px.mean()
            rows[i] = px @ self._proj + 1e-3 * np.sin(np.arange(self.dim))
        return rows / np.linalg.norm(rows, axis=1, keepdims=True)

    def encode_texts(self, texts):
        rows = np.empty((len(texts), self.dim), dtype=np.float64)
        for i, text in enumerate(texts):
            digest = hashlib.sha256(text.encode("utf-8")).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            rows[i] = rng.normal(size=self.dim)
        return rows / np.linalg.norm(rows, axis=1, keepdims=True)


class ClipEncoder:
    """Frozen pretrained CLIP (transformers); images are expected already
    cropped and resized to the model resolution."""

    def __init__(self, model_name="vit-b-16", device="cpu", batch_size=64):
        import torch
        from transformers import CLIPModel, CLIPProcessor

        hf_name = CLIP_MODELS.get(model_name, model_name)
        self.name = model_name
        self._torch = torch
        self.device = device
        self.batch_size = batch_size
        self.model = CLIPModel.from_pretrained(hf_name).to(device).eval()
        self.processor = CLIPProcessor.from_pretrained(hf_name)
        self.dim = self.model.config.projection_dim

    def _batched(self, items):
        for i in range(0, len(items), self.batch_size):
            yield items[i:i + self.batch_size]

    def encode_images(self, images):
        out = []
        with self._torch.no_grad():
            for chunk in self._batched(images):
                inputs = self.processor(images=chunk, return_tensors="pt").to(self.device)
                feats = self.model.get_image_features(**inputs)
                out.append(feats.cpu().double().numpy())
        rows = np.concatenate(out, axis=0)
        return rows / np.linalg.norm(rows, axis=1, keepdims=True)

    def encode_texts(self, texts):
        out = []
        with self._torch.no_grad():
            for chunk in self._batched(texts):
                inputs = self.processor(text=chunk, return_tensors="pt",
                                        padding=True).to(self.device)
                feats = self.model.get_text_features(**inputs)
                out.append(feats.cpu().double().numpy())
        rows = np.concatenate(out, axis=0)
        return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def make_encoder(model_name, device="cpu"):
    if model_name.startswith("stub"):
        dim = int(model_name.split("-")[1]) if "-" in model_name else 512
        return StubEncoder(dim=dim)
    return ClipEncoder(model_name=model_name, device=device)
