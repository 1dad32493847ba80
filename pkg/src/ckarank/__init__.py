"""CKA-guided per-layer LoRA rank allocation for domain-shifted segmentation."""

__version__ = "0.1.0"
