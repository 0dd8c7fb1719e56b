"""Attention-guided curriculum learning at desk scale.

Synthetic severity-annotated image corpus -> report mining -> multi-label
baseline -> per-disease curriculum fine-tuning -> seed harvesting ->
attention-guided iterative refinement -> AUC and IoBB evaluation.
"""

__version__ = "0.1.0"
