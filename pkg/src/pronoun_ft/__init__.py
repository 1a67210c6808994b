"""Pronoun-targeted fine-tuning for context-aware translation on a synthetic task."""

from .loss import LossBreakdown, LossSpec, clm_loss, hybrid_loss, mm_disc_loss, nll_disc_loss, select_negative

__version__ = "0.1.0"

__all__ = [
    "LossBreakdown",
    "LossSpec",
    "clm_loss",
    "hybrid_loss",
    "mm_disc_loss",
    "nll_disc_loss",
    "select_negative",
]
