"""Glioma grade and survival-class prediction from BraTS-style MRI with
frozen pretrained backbones and clinical features."""

__version__ = "0.1.0"
