"""Fit models with analytic Jacobians.

Times are in ns. Each model returns ``(value, jacobian)`` where the Jacobian
has one column per fit parameter in the documented order.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erfc, erfcx

SQRT2 = math.sqrt(2.0)
SQRT2PI = math.sqrt(2.0 * math.pi)


def exp_gauss(x, tau, sigma):
    """Unit exponential ``exp(-x/tau) H(x)`` convolved with a normalised Gaussian.

    Returns the value and its partial derivatives with respect to ``x``,
    ``tau`` and ``sigma``. ``sigma = 0`` gives the bare one-sided exponential.
    """
    x = np.asarray(x, dtype=float)
    if sigma <= 0:
        pos = x >= 0
        g = np.where(pos, np.exp(-np.where(pos, x, 0.0) / tau), 0.0)
        return g, -g / tau, g * x / tau**2, np.zeros_like(g)
    b = (sigma / tau - x / sigma) / SQRT2
    gauss = np.exp(-0.5 * (x / sigma) ** 2)
    g = np.empty_like(x)
    hi = b > 0
    # exp(a) erfc(b) = exp(-x^2 / 2 sigma^2) erfcx(b) avoids overflow for b > 0
    g[hi] = 0.5 * gauss[hi] * erfcx(b[hi])
    lo = ~hi
    a = 0.5 * (sigma / tau) ** 2 - x[lo] / tau
    g[lo] = 0.5 * np.exp(a) * erfc(b[lo])
    phi = gauss / (sigma * SQRT2PI)
    dg_dx = -g / tau + phi
    dg_dtau = g * (x / tau**2 - sigma**2 / tau**3) + sigma**2 * phi / tau**2
    dg_dsigma = g * sigma / tau**2 - phi * (sigma / tau + x / sigma)
    return g, dg_dx, dg_dtau, dg_dsigma


def decay_irf(t, params, sigma, period=None, n_wrap=6):
    """``baseline + amplitude * sum_j [exp(-(t - t0 + j P)/tau) (*) Gauss(sigma)]``.

    Parameters ``(tau, amplitude, t0, baseline)``. With ``period`` the tails
    of the ``n_wrap`` preceding pulses are included; otherwise one pulse.
    """
    tau, amp, t0, base = params
    shifts = [0.0] if period is None else [j * period for j in range(n_wrap)]
    g = np.zeros_like(t, dtype=float)
    gx = np.zeros_like(g)
    gt = np.zeros_like(g)
    for s in shifts:
        v, dx, dtau, _ = exp_gauss(t - t0 + s, tau, sigma)
        g += v
        gx += dx
        gt += dtau
    jac = np.column_stack([amp * gt, g, -amp * gx, np.ones_like(g)])
    return base + amp * g, jac


def two_sided_exp(t, params, sign=1.0):
    """``baseline + sign * amplitude * exp(-|t - c| / tau_side)``.

    Parameters ``(amplitude, tau_left, tau_right, center, baseline)``;
    ``tau_left`` applies for ``t < c``.
    """
    amp, tl, tr, c, base = params
    x = np.asarray(t, dtype=float) - c
    left = x < 0
    tau = np.where(left, tl, tr)
    e = np.exp(-np.abs(x) / tau)
    d_tau = amp * sign * e * np.abs(x) / tau**2
    d_c = amp * sign * e * np.sign(x) / tau
    jac = np.column_stack([sign * e, np.where(left, d_tau, 0.0), np.where(left, 0.0, d_tau), d_c, np.ones_like(e)])
    return base + sign * amp * e, jac


def hom_dip(t, params, sigma=None):
    """Two-sided exponential dip convolved with a Gaussian.

    ``baseline - amplitude * [exp(-|t - c| / tau) (*) Gauss(sigma)]``.
    Parameters ``(amplitude, tau, center, baseline)`` plus ``sigma`` as a
    fifth parameter when ``sigma`` is not fixed by the caller.
    """
    if sigma is None:
        amp, tau, c, base, sig = params
    else:
        (amp, tau, c, base), sig = params, sigma
    x = np.asarray(t, dtype=float) - c
    gp, gpx, gpt, gps = exp_gauss(x, tau, sig)
    gm, gmx, gmt, gms = exp_gauss(-x, tau, sig)
    shape = gp + gm
    cols = [-shape, -amp * (gpt + gmt), amp * (gpx - gmx), np.ones_like(shape)]
    if sigma is None:
        cols.append(-amp * (gps + gms))
    return base - amp * shape, np.column_stack(cols)


def telegraph_envelope(t, params):
    """``baseline * (1 + amplitude * exp(-t / tau))`` for the blinking envelope.

    Parameters ``(amplitude, tau, baseline)``.
    """
    amp, tau, base = params
    e = np.exp(-np.asarray(t, dtype=float) / tau)
    jac = np.column_stack([base * e, base * amp * e * t / tau**2, 1.0 + amp * e])
    return base * (1.0 + amp * e), jac
