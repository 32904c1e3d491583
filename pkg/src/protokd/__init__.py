"""Prototype knowledge distillation for missing-modality segmentation, at desk scale."""

__version__ = "0.1.0"
