"""Phenomenological two-mode model of the elliptical Bragg grating cavity.

The ellipticity splits the fundamental mode into a horizontally polarised
left mode (H) and a vertically polarised right mode (V). Each mode is a
Lorentzian in wavelength with its own peak Purcell factor and first-lens
collection efficiency; a dipole at in-plane angle ``theta`` couples to H with
weight cos^2(theta) and to V with sin^2(theta).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateDataError, ParameterError


@dataclass(frozen=True)
class EbgGeometry:
    """Design record of the grating (nm). Not used in any computation."""

    disk_radius: float = 660.0
    period: float = 660.0
    trench: float = 120.0
    aspect_ratio: float = 0.99

    def __post_init__(self):
        for name in ("disk_radius", "period", "trench"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be > 0")
        if not 0 < self.aspect_ratio <= 1:
            raise ParameterError("aspect_ratio must lie in (0, 1]")


@dataclass(frozen=True)
class CavityParams:
    """Two Lorentzian modes. Wavelengths and widths in nm."""

    lambda_h: float
    lambda_v: float
    fwhm_h: float
    fwhm_v: float
    f_h_max: float
    f_v_max: float
    eta_h: float = 1.0
    eta_v: float = 1.0
    gamma_leak: float = 0.0

    def __post_init__(self):
        if not self.lambda_v > self.lambda_h:
            raise ParameterError("lambda_v must be red of lambda_h")
        if not (self.fwhm_h > 0 and self.fwhm_v > 0):
            raise ParameterError("mode linewidths must be > 0")
        if self.f_h_max < 0 or self.f_v_max < 0:
            raise ParameterError("peak Purcell factors must be >= 0")
        for name in ("eta_h", "eta_v"):
            if not 0 <= getattr(self, name) <= 1:
                raise ParameterError(f"{name} must lie in [0, 1]")
        if self.gamma_leak < 0:
            raise ParameterError("gamma_leak must be >= 0")

    @property
    def splitting(self) -> float:
        return self.lambda_v - self.lambda_h


@dataclass(frozen=True)
class DipoleParams:
    """Emitter line (nm), in-plane angle from the X axis (rad), slab lifetime (ns)."""

    lambda_emit: float
    theta: float = 0.0
    tau_slab: float = 4.065

    def __post_init__(self):
        if not self.tau_slab > 0:
            raise ParameterError("tau_slab must be > 0")


@dataclass(frozen=True)
class Branching:
    p_h: float
    p_v: float
    p_leak: float
    predicted_pol_ratio: float

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.p_h, self.p_v, self.p_leak)


def lorentzian(wavelength, center, fwhm):
    """Unit-height Lorentzian ``1 / (1 + (2 (wavelength - center) / fwhm)^2)``.

    Works elementwise on arrays.
    """
    if np.any(np.asarray(fwhm) <= 0):
        raise ParameterError("fwhm must be > 0")
    x = 2.0 * (np.asarray(wavelength, dtype=float) - center) / fwhm
    out = 1.0 / (1.0 + x * x)
    return float(out) if out.ndim == 0 else out


def purcell_total(cavity: CavityParams, dipole: DipoleParams):
    """Per-mode and total Purcell factors ``(f_h, f_v, f_total)``.

    ``f_total`` includes the leak channel, expressed relative to the slab rate.
    """
    c2 = math.cos(dipole.theta) ** 2
    s2 = math.sin(dipole.theta) ** 2
    f_h = cavity.f_h_max * c2 * lorentzian(dipole.lambda_emit, cavity.lambda_h, cavity.fwhm_h)
    f_v = cavity.f_v_max * s2 * lorentzian(dipole.lambda_emit, cavity.lambda_v, cavity.fwhm_v)
    return f_h, f_v, f_h + f_v + cavity.gamma_leak


def effective_lifetime(f_total: float, tau_slab: float) -> float:
    """Radiative lifetime inside the cavity, in the units of ``tau_slab``."""
    if not f_total > 0:
        raise ParameterError("f_total must be > 0")
    if not tau_slab > 0:
        raise ParameterError("tau_slab must be > 0")
    return tau_slab / f_total


def contrast_ratio(i_max: float, i_min: float) -> float:
    """``(I_max - I_min) / (I_max + I_min)``; order of the arguments is irrelevant."""
    hi, lo = max(i_max, i_min), min(i_max, i_min)
    if hi + lo <= 0:
        raise DegenerateDataError("both intensities are zero")
    return (hi - lo) / (hi + lo)


def emission_branching(cavity: CavityParams, dipole: DipoleParams) -> Branching:
    """Split the total decay into H, V and leak channels.

    The leak channel is treated as unpolarised and never collected, so the
    predicted polarisation ratio is built from the collected H and V
    intensities only.
    """
    f_h, f_v, f_total = purcell_total(cavity, dipole)
    if f_total <= 0:
        raise DegenerateDataError("dipole couples to no channel (f_total = 0)")
    p_h = f_h / f_total
    p_v = f_v / f_total
    p_leak = 1.0 - p_h - p_v
    # keep the sum exact while avoiding -0.0 from rounding
    if p_leak < 0:
        p_leak = 0.0
        p_v = 1.0 - p_h
    i_h = p_h * cavity.eta_h
    i_v = p_v * cavity.eta_v
    ratio = contrast_ratio(i_h, i_v) if i_h + i_v > 0 else 0.0
    return Branching(p_h, p_v, p_leak, ratio)


def collected_intensities(cavity: CavityParams, dipole: DipoleParams) -> tuple[float, float]:
    b = emission_branching(cavity, dipole)
    return b.p_h * cavity.eta_h, b.p_v * cavity.eta_v


def calibrate_device(
    lambda_h: float,
    splitting: float,
    fwhm: float,
    f_total: float,
    pol_ratio: float,
    eta: float = 1.0,
    lambda_emit: float | None = None,
    tau_slab: float = 4.065,
) -> tuple[CavityParams, DipoleParams]:
    """Closed-form calibration of a device coupled to the H mode.

    Chooses the dipole angle so that the collected polarisation ratio equals
    ``pol_ratio``, then the common peak Purcell factor of both modes so that
    the total enhancement equals ``f_total``. Both modes share ``fwhm`` and
    ``eta``; the leak channel is off.
    """
    if not 0 < pol_ratio <= 1:
        raise ParameterError("pol_ratio must lie in (0, 1]")
    lambda_emit = lambda_h if lambda_emit is None else lambda_emit
    l_h = lorentzian(lambda_emit, lambda_h, fwhm)
    l_v = lorentzian(lambda_emit, lambda_h + splitting, fwhm)
    # I_V / I_H = tan^2(theta) * l_v / l_h for equal peaks and efficiencies
    iv_over_ih = (1.0 - pol_ratio) / (1.0 + pol_ratio)
    theta = math.atan(math.sqrt(iv_over_ih * l_h / l_v))
    f_max = f_total / (math.cos(theta) ** 2 * l_h + math.sin(theta) ** 2 * l_v)
    cavity = CavityParams(
        lambda_h=lambda_h,
        lambda_v=lambda_h + splitting,
        fwhm_h=fwhm,
        fwhm_v=fwhm,
        f_h_max=f_max,
        f_v_max=f_max,
        eta_h=eta,
        eta_v=eta,
    )
    return cavity, DipoleParams(lambda_emit=lambda_emit, theta=theta, tau_slab=tau_slab)

