"""Desk-scale learning-to-rank engine.

Trains a small text cross-encoder with pairwise/listwise ranking losses
(ranknet, listnet, listmle, approxndcg), distills it into a bi-encoder via
margin MSE, and serves dot-product ranking over precomputed embeddings.
"""

__version__ = "0.1.0"
