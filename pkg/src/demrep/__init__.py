"""Demographic representation workbench.

Pretrains age/gender encoders against a comorbidity-score target, transfers
the learned embeddings into a gradient-boosted tree classifier on tabular
disease datasets, and evaluates discrimination, calibration, significance,
and feature-importance shifts under a reproducible, manifest-logged CLI.
"""

__version__ = "0.1.0"
