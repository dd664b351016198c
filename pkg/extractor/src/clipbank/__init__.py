"""Dataset-to-bank extraction with a frozen pretrained backbone."""

__version__ = "0.1.0"
