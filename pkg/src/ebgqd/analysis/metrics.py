"""Closed-form figures of merit."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import DegenerateDataError, InconsistentInputsError, OutOfDomainError, ParameterError


def correct_g2_background(g2_raw: float, rho: float) -> float:
    """Remove uncorrelated background from a measured g2(0).

    ``rho`` is the signal fraction of the counts on each detector; the raw
    value mixes as ``rho^2 g2 + (1 - rho^2)``. Floored at zero.
    """
    if not 0 < rho <= 1:
        raise ParameterError("rho must lie in (0, 1]")
    r2 = rho * rho
    return max((g2_raw - (1.0 - r2)) / r2, 0.0)


def purcell(tau_slab: float, tau_cav: float, sigma_slab: float = 0.0, sigma_cav: float = 0.0):
    """Purcell factor ``tau_slab / tau_cav`` and its quadrature-propagated error."""
    if not (tau_slab > 0 and tau_cav > 0):
        raise ParameterError("lifetimes must be > 0")
    f = tau_slab / tau_cav
    return f, f * math.hypot(sigma_slab / tau_slab, sigma_cav / tau_cav)


def polarization_ratio(angles, intensities):
    """Fit ``a + b cos^2(phi - phi0)`` to a polariser sweep (angles in degrees).

    Returns ``(ratio, phi0)`` with ``ratio = (Imax - Imin) / (Imax + Imin)``
    and ``phi0`` in degrees within [0, 180). The fit is linear in
    ``1, cos 2 phi, sin 2 phi``.
    """
    phi = np.deg2rad(np.asarray(angles, dtype=float))
    y = np.asarray(intensities, dtype=float)
    if phi.size < 4:
        raise ParameterError("need at least 4 polariser angles")
    if np.ptp(phi) < math.pi - 1e-9:
        raise ParameterError("polariser angles must span at least 180 degrees")
    if not np.any(y != 0):
        raise DegenerateDataError("all intensities are zero")
    basis = np.column_stack([np.ones_like(phi), np.cos(2 * phi), np.sin(2 * phi)])
    (c0, c1, c2), *_ = np.linalg.lstsq(basis, y, rcond=None)
    if c0 <= 0:
        raise DegenerateDataError("non-positive mean intensity")
    amp = math.hypot(c1, c2)
    ratio = min(amp / c0, 1.0)
    phi0 = math.degrees(0.5 * math.atan2(c2, c1)) % 180.0
    return ratio, phi0


def corrected_visibility(v_raw: float, R: float, T: float, g2_zero: float) -> float:
    """Correct a measured HOM visibility for splitter imbalance and multiphoton events.

    ``V = v_raw (R^2 + T^2) / (2 R T) / (1 - 2 g2_zero)``.
    """
    if abs(R + T - 1.0) > 1e-9 or not 0 < R < 1:
        raise ParameterError("R and T must be positive and sum to 1")
    if g2_zero >= 0.5:
        raise OutOfDomainError("g2_zero must be < 0.5")
    return v_raw * (R * R + T * T) / (2.0 * R * T) / (1.0 - 2.0 * g2_zero)


@dataclass(frozen=True)
class EfficiencyBudget:
    """Count-rate budget. ``fiber_rate`` (1/s) is already corrected for detector efficiency."""

    fiber_rate: float
    setup_efficiency: float
    rep_rate: float
    g2_zero: float = 0.0
    detector_efficiency: float = 1.0
    first_lens_raw: float = float("nan")
    first_lens_purity: float = float("nan")

    def to_dict(self):
        return asdict(self)


def efficiency_budget(
    fiber_rate: float,
    setup_efficiency: float,
    rep_rate: float,
    g2_zero: float = 0.0,
    detector_efficiency: float = 1.0,
) -> EfficiencyBudget:
    """First-lens collection efficiency from the fibre-coupled count rate.

    ``first_lens_raw = fiber_rate / (rep_rate * setup_efficiency)`` and
    ``first_lens_purity = first_lens_raw * sqrt(1 - g2_zero)``.
    """
    for name, v in (("setup_efficiency", setup_efficiency), ("detector_efficiency", detector_efficiency)):
        if not 0 < v <= 1:
            raise ParameterError(f"{name} must lie in (0, 1]")
    if not rep_rate > 0:
        raise ParameterError("rep_rate must be > 0")
    if fiber_rate < 0:
        raise ParameterError("fiber_rate must be >= 0")
    if not 0 <= g2_zero <= 1:
        raise ParameterError("g2_zero must lie in [0, 1]")
    raw = fiber_rate / (rep_rate * setup_efficiency)
    if raw > 1:
        raise InconsistentInputsError(f"first-lens efficiency {raw:.3f} exceeds 1")
    return EfficiencyBudget(
        fiber_rate,
        setup_efficiency,
        rep_rate,
        g2_zero,
        detector_efficiency,
        raw,
        raw * math.sqrt(1.0 - g2_zero),
    )
