"""l2-norm pooling, residual classification and pyramid-pooled lesion detection."""
__version__ = "0.1.0"
