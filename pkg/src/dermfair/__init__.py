"""Skin-tone bias auditing and unlearning for dermatological image classifiers.

The package covers the full experimental loop: manifest ingestion and diagnosis
harmonization, stratified splitting with condition-balanced batching, pluggable
feature extractors, adversarial/contrastive/VAE bias-unlearning heads, group
fairness metrics (per-group TPR, balanced accuracy, EOM, PQD), a synthetic
tone-confounded benchmark for desk-scale verification, and report rendering.
"""

__version__ = "0.1.0"

from dermfair.records import Condition, DataSource, ImageRecord

__all__ = ["Condition", "DataSource", "ImageRecord", "__version__"]
