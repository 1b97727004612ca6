"""Audio-text relevance learning with graded and binary relevances.

ListNet over continuous ratings, symmetric InfoNCE over binary pairs, and
their convex combination, trained on affine projection heads over
precomputed features.
"""

__version__ = "0.1.0"
