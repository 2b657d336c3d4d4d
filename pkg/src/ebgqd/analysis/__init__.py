"""Curve fitting and figure-of-merit extraction."""

from .fitting import (
    FitResult,
    fit_decay_irf,
    fit_hom_dip,
    fit_telegraph_envelope,
    fit_two_sided_exp,
)
from .metrics import (
    EfficiencyBudget,
    correct_g2_background,
    corrected_visibility,
    efficiency_budget,
    polarization_ratio,
    purcell,
)

__all__ = [
    "FitResult",
    "fit_decay_irf",
    "fit_hom_dip",
    "fit_telegraph_envelope",
    "fit_two_sided_exp",
    "EfficiencyBudget",
    "correct_g2_background",
    "corrected_visibility",
    "efficiency_budget",
    "polarization_ratio",
    "purcell",
]
