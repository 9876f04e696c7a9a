"""finid: metric-learning re-identification of individual animals.

Trains a Euclidean embedding of fin images with batch-hard triplet loss,
evaluates it under an open-set query/gallery protocol, and serves a
human-verified catalogue-matching workflow.
"""

__version__ = "0.1.0"
