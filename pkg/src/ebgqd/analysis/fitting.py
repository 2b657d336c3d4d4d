"""Weighted nonlinear least squares for histogram models."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from ..errors import ConvergenceError
from . import models

MAX_ITER = 200
XTOL = 1e-8
N_STARTS = 5


@dataclass
class FitResult:
    """Estimates with 1-sigma uncertainties from the linearised covariance."""

    names: tuple
    values: np.ndarray
    errors: np.ndarray
    residual_norm: float
    converged: bool
    iterations: int
    dof: int
    covariance: np.ndarray | None = None
    derived: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return float(self.values[self.names.index(name)])

    def error(self, name) -> float:
        return float(self.errors[self.names.index(name)])

    def ratio_sigma(self, num: str, den: str) -> float:
        """Propagated error of ``num / den``, correlations included."""
        i, j = self.names.index(num), self.names.index(den)
        a, b = self.values[i], self.values[j]
        grad = np.array([1.0 / b, -a / b**2])
        sub = self.covariance[np.ix_([i, j], [i, j])]
        return float(math.sqrt(max(grad @ sub @ grad, 0.0)))

    @property
    def usable(self) -> bool:
        return self.converged

    @property
    def reduced_chi2(self) -> float:
        return self.residual_norm**2 / max(self.dof, 1)

    def to_dict(self):
        out = {
            "parameters": {n: {"value": float(v), "sigma": float(e)} for n, v, e in zip(self.names, self.values, self.errors)},
            "residual_norm": float(self.residual_norm),
            "reduced_chi2": float(self.reduced_chi2),
            "converged": bool(self.converged),
            "usable": bool(self.usable),
            "iterations": int(self.iterations),
        }
        if self.derived:
            out["derived"] = {k: float(v) for k, v in self.derived.items()}
        return out


def _xy(data):
    """Accept ``(x, y)`` pairs or histogram-like objects (``centers``, ``counts``)."""
    if hasattr(data, "centers") and hasattr(data, "counts"):
        return np.asarray(data.centers, dtype=float), np.asarray(data.counts, dtype=float)
    x, y = data
    return np.asarray(x, dtype=float), np.asarray(y, dtype=float)


def _covariance(jac):
    _, s, vt = np.linalg.svd(jac, full_matrices=False)
    tol = np.finfo(float).eps * max(jac.shape) * s[0]
    s_inv = np.where(s > tol, 1.0 / s, 0.0)
    return (vt.T * s_inv**2) @ vt


def least_squares_fit(model, x, y, sigma, p0, names, bounds=(-np.inf, np.inf), jitter=0.1, seed=0):
    """Multi-start weighted least squares with analytic Jacobian.

    ``model(x, p)`` returns ``(value, jacobian)``. Starts from ``p0`` and
    ``N_STARTS - 1`` multiplicatively jittered copies; the lowest-cost
    converged solution wins.
    """
    sigma = np.asarray(sigma, dtype=float)
    w = 1.0 / sigma

    def fun(p):
        return (model(x, p)[0] - y) * w

    def jac(p):
        return model(x, p)[1] * w[:, None]

    rng = np.random.default_rng(seed)
    p0 = np.asarray(p0, dtype=float)
    lo, hi = (np.broadcast_to(np.asarray(b, dtype=float), p0.shape) for b in bounds)
    starts = [p0] + [p0 * (1.0 + jitter * rng.standard_normal(p0.shape)) for _ in range(N_STARTS - 1)]
    best = None
    for start in starts:
        # strictly inside the box, as the trust-region solver requires
        start = np.where(start <= lo, lo + 1e-9 * (1.0 + np.abs(np.where(np.isfinite(lo), lo, 0.0))), start)
        start = np.where(start >= hi, hi - 1e-9 * (1.0 + np.abs(np.where(np.isfinite(hi), hi, 0.0))), start)
        try:
            res = least_squares(fun, start, jac=jac, bounds=(lo, hi), method="trf", xtol=XTOL, ftol=1e-12, gtol=1e-12, max_nfev=MAX_ITER)
        except (ValueError, FloatingPointError):
            continue
        if not np.all(np.isfinite(res.x)):
            continue
        if best is None or (res.success, -res.cost) > (best.success, -best.cost):
            best = res
    if best is None:
        raise ConvergenceError("no start produced a finite fit")
    cov = _covariance(best.jac)
    errors = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    result = FitResult(
        tuple(names),
        best.x,
        errors,
        float(math.sqrt(2.0 * best.cost)),
        bool(best.success),
        int(best.nfev),
        len(y) - len(p0),
        cov,
    )
    if not result.converged:
        raise ConvergenceError(f"fit did not converge: {best.message}", result)
    return result


def poisson_fit(model, x, y, p0, names, passes=2, **kwargs):
    """Counts fit: first with ``sqrt(max(y, 1))`` weights, then with model weights."""
    sigma = np.sqrt(np.maximum(y, 1.0))
    result = least_squares_fit(model, x, y, sigma, p0, names, **kwargs)
    for _ in range(passes - 1):
        expected = model(x, result.values)[0]
        sigma = np.sqrt(np.maximum(expected, 1.0))
        result = least_squares_fit(model, x, y, sigma, result.values, names, **kwargs)
    return result


def _guess_decay(t, y):
    base = float(np.percentile(y, 5))
    i_max = int(np.argmax(y))
    amp = float(y[i_max] - base)
    tail = (t > t[i_max]) & (y - base > 0.05 * amp) & (y - base < 0.8 * amp)
    if tail.sum() >= 3:
        slope = np.polyfit(t[tail], np.log(y[tail] - base), 1)[0]
        tau = -1.0 / slope if slope < 0 else 1.0
    else:
        tau = 1.0
    return [tau, amp, float(t[i_max]), max(base, 0.0)]


def fit_decay_irf(data, irf_sigma: float, initial_guess=None, rep_period: float | None = None) -> FitResult:
    """Fit an exponential decay convolved with a Gaussian instrument response.

    ``data`` holds delays in ps and counts. ``irf_sigma`` and ``rep_period``
    are in ps. Results are ``tau``, ``amplitude``, ``t0`` (ns) and
    ``baseline`` (counts per bin).
    """
    t_ps, y = _xy(data)
    t = t_ps / 1000.0
    sigma = irf_sigma / 1000.0
    period = None if rep_period is None else rep_period / 1000.0
    p0 = _guess_decay(t, y) if initial_guess is None else list(initial_guess)

    def model(x, p):
        return models.decay_irf(x, p, sigma, period)

    bounds = ([1e-4, 0.0, -np.inf, 0.0], [np.inf, np.inf, np.inf, np.inf])
    return poisson_fit(model, t, y, p0, ("tau", "amplitude", "t0", "baseline"), bounds=bounds)


def _min_width(t):
    # decays shorter than half a bin are not resolvable; letting them through
    # lets the fit chase single-bin noise spikes
    return 0.5 * float(np.min(np.diff(t))) if len(t) > 1 else 1e-4


def _guess_two_sided(t, y, sign):
    base = float(np.median(np.concatenate([y[: len(y) // 8], y[-len(y) // 8 :]])))
    i = int(np.argmax(y)) if sign > 0 else int(np.argmin(y))
    amp = abs(float(y[i]) - base)
    half = np.abs(y - base) > 0.5 * amp
    width = (t[half].max() - t[half].min()) / (2 * math.log(2)) if half.sum() > 1 else (t[-1] - t[0]) / 10
    width = max(width, (t[1] - t[0]) if len(t) > 1 else 1.0)
    return [max(amp, 1e-9), width, width, float(t[i]), base]


def fit_two_sided_exp(data, initial_guess=None, sign: float = 1.0, sigma=None) -> FitResult:
    """Fit ``baseline +/- amplitude * exp(-|t - c| / tau_side)``.

    ``sign = +1`` for a peak, ``-1`` for a dip (CW antibunching). Times in
    ps on input, ns in the result. ``sigma`` gives per-point errors;
    Poisson weights are used otherwise. For dips the result carries the
    derived ``g2_zero = (baseline - amplitude) / baseline``.
    """
    t_ps, y = _xy(data)
    t = t_ps / 1000.0
    p0 = _guess_two_sided(t, y, sign) if initial_guess is None else list(initial_guess)

    def model(x, p):
        return models.two_sided_exp(x, p, sign)

    names = ("amplitude", "tau_left", "tau_right", "center", "baseline")
    tmin = _min_width(t)
    bounds = ([-np.inf, tmin, tmin, t[0], -np.inf], [np.inf, np.inf, np.inf, t[-1], np.inf])
    if sigma is None:
        result = poisson_fit(model, t, y, p0, names, bounds=bounds)
    else:
        result = least_squares_fit(model, t, y, sigma, p0, names, bounds=bounds)
    base, amp = result["baseline"], result["amplitude"]
    if base != 0:
        level = (base + sign * amp) / base
        key = "g2_zero" if sign < 0 else "peak_ratio"
        result.derived[key] = level
        result.derived[key + "_sigma"] = result.ratio_sigma("amplitude", "baseline")
    return result


def fit_hom_dip(data, initial_guess=None, sigma_irf: float | None = None, sigma=None) -> FitResult:
    """Fit a two-sided exponential dip convolved with a Gaussian.

    ``sigma_irf`` (ps) fixes the Gaussian width; when ``None`` it is a free
    parameter. ``sigma`` are per-point errors (Poisson when omitted). The
    derived ``depth`` is ``amplitude / baseline``; ``width`` is the dip's
    exponential time constant in ns.
    """
    t_ps, y = _xy(data)
    t = t_ps / 1000.0
    fixed = None if sigma_irf is None else sigma_irf / 1000.0
    if initial_guess is None:
        amp, tl, tr, c, base = _guess_two_sided(t, y, -1.0)
        p0 = [amp, 0.5 * (tl + tr), c, base]
        if fixed is None:
            p0.append(max(2 * (t[1] - t[0]), 1e-3))
    else:
        p0 = list(initial_guess)

    def model(x, p):
        return models.hom_dip(x, p, fixed)

    names = ["amplitude", "tau", "center", "baseline"]
    lo = [-np.inf, _min_width(t), t[0], -np.inf]
    hi = [np.inf, np.inf, t[-1], np.inf]
    if fixed is None:
        names.append("sigma")
        lo.append(0.0)
        hi.append(np.inf)
    bounds = (lo, hi)
    if sigma is None:
        result = poisson_fit(model, t, y, p0, names, bounds=bounds)
    else:
        result = least_squares_fit(model, t, y, sigma, p0, names, bounds=bounds)
    base, amp = result["baseline"], result["amplitude"]
    result.derived["depth"] = amp / base
    result.derived["depth_sigma"] = result.ratio_sigma("amplitude", "baseline")
    result.derived["width"] = result["tau"]
    return result


def fit_telegraph_envelope(tau_ps, envelope, sigma, initial_guess=None) -> FitResult:
    """Fit ``baseline * (1 + amplitude * exp(-tau / decay))`` to a blinking envelope.

    Delays in ps; the decay time is reported in ns.
    """
    t = np.asarray(tau_ps, dtype=float) / 1000.0
    y = np.asarray(envelope, dtype=float)
    if initial_guess is None:
        amp0 = max(float(y[0] - 1.0), 0.05)
        above = y - 1.0 > amp0 / math.e
        decay0 = float(t[above].max()) if above.any() else float(t[len(t) // 4])
        initial_guess = [amp0, max(decay0, t[1]), 1.0]
    bounds = ([0.0, 1e-6, 0.0], [np.inf, np.inf, np.inf])
    return least_squares_fit(models.telegraph_envelope, t, y, sigma, initial_guess, ("amplitude", "decay", "baseline"), bounds=bounds)

