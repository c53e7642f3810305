"""Unsupervised discovery of phoneme-specific critical articulators.

An inversion network maps acoustic frames to 12 articulator channels, a weight
network predicts per-frame channel weights, and a phoneme classifier reads the
weighted (ground-truth) articulators; the weights that help classification are
read back as criticality scores.
"""

__version__ = "0.1.0"
