"""Backdoor poisoning, tiny ViT/CNN training, and patch-processing backdoor detection."""

__version__ = "0.1.0"
