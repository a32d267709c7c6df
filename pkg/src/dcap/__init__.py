"""Few-shot classification with dense-classification pre-training and attentive pooling."""
__version__ = "0.1.0"
