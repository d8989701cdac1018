"""Encoder-as-generator toolkit: a Transformer encoder that writes text by
iteratively appending a mask token, optionally grounded in projected
object-region features, with staged training, n-gram metrics, and a
cross-modal alignment probe."""

__version__ = "0.1.0"
