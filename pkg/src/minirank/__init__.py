"""Desk-scale passage re-ranking lab.

BM25 first-stage retrieval, a compact trainable cross-encoder with exact
analytic gradients, three learning-to-rank objectives (point-wise
classification, pair-wise hinge on normalized score differences, pair-wise
cross-entropy), chunk segmentation with attention or max pooling, and an
evaluation kit (P@1 / MAP / MRR, gold injection, cross-validation).
"""

__version__ = "0.1.0"
