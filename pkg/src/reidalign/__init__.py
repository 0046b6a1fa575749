"""Stripe-aligned embedding learning for person re-identification, desk scale.

The package trains a small two-branch embedding network (global feature +
per-stripe local features), compares images with a dynamic-programming
alignment over stripe distances, and evaluates retrieval quality with
CMC/mAP, k-reciprocal re-ranking, and a human-evaluation protocol.
"""

__version__ = "0.1.0"
