"""Coincidence histogramming and peak-area arithmetic over timestamp streams."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateDataError, ParameterError, PreconditionError


@dataclass
class CorrelationHistogram:
    """Counts of pairs ``t_b - t_a`` between ``tau_min`` and ``tau_max``, all in ps.

    Each bin is closed on the edge nearer zero delay: ``[e, e + w)`` for
    non-negative delays and ``(e, e + w]`` for negative ones. The binning of
    ``B - A`` is then the exact mirror image of ``A - B``.
    """

    bin_width: int
    tau_min: int
    tau_max: int
    counts: np.ndarray
    total_pairs: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        span = self.tau_max - self.tau_min
        if self.bin_width <= 0 or span <= 0 or span % self.bin_width:
            raise ParameterError("tau range must be a positive multiple of bin_width")
        if len(self.counts) != span // self.bin_width:
            raise ParameterError("counts length does not match the binning")

    @property
    def edges(self) -> np.ndarray:
        return self.tau_min + self.bin_width * np.arange(len(self.counts) + 1, dtype=np.int64)

    @property
    def centers(self) -> np.ndarray:
        return self.tau_min + self.bin_width * (np.arange(len(self.counts)) + 0.5)

    def same_binning(self, other: "CorrelationHistogram") -> bool:
        return (self.bin_width, self.tau_min, self.tau_max) == (other.bin_width, other.tau_min, other.tau_max)


def _as_times(records) -> np.ndarray:
    t = getattr(records, "times", records)
    return np.asarray(t, dtype=np.int64)


def _check_sorted(t, name):
    if len(t) > 1 and np.any(np.diff(t) < 0):
        raise PreconditionError(f"channel {name} is not time-sorted")


def _correlate_chunk(a, b, bin_width, tau_min, tau_max, n_bins):
    """Pairs of one slice of channel A against all of channel B."""
    counts = np.zeros(n_bins, np.int64)
    lo = np.searchsorted(b, a + tau_min, side="right" if tau_min < 0 else "left")
    hi = np.searchsorted(b, a + tau_max, side="right" if tau_max < 0 else "left")
    # walk the window of every A click in lockstep; drop clicks whose window is done
    active = np.flatnonzero(hi > lo)
    pos = lo[active]
    end = hi[active]
    ta = a[active]
    while len(pos):
        d = b[pos] - ta
        idx = np.where(d >= 0, (d - tau_min) // bin_width, -((tau_min - d) // bin_width) - 1)
        counts += np.bincount(idx, minlength=n_bins)
        pos += 1
        more = pos < end
        if not more.all():
            pos, end, ta = pos[more], end[more], ta[more]
    return counts


def correlate(ch_a, ch_b, bin_width: int, tau_min: int, tau_max: int, threads: int | None = None) -> CorrelationHistogram:
    """Histogram of all delays ``t_b - t_a`` between ``tau_min`` and ``tau_max``.

    Bins are closed toward zero delay (see :class:`CorrelationHistogram`), so
    ``correlate(b, a)`` is ``correlate(a, b)`` reversed whenever the range is
    symmetric and zero delay is not a bin edge (see :func:`centered_range`).

    Every click of A scans only the clicks of B inside its delay window, so
    the cost is linear in the number of pairs. A can be split into chunks
    handled by separate threads; the integer counts add up to exactly the
    sequential result.
    """
    a = _as_times(ch_a)
    b = _as_times(ch_b)
    _check_sorted(a, "A")
    _check_sorted(b, "B")
    span = tau_max - tau_min
    if bin_width <= 0 or span <= 0 or span % bin_width:
        raise ParameterError("tau range must be a positive multiple of bin_width")
    n_bins = span // bin_width
    if threads is None:
        threads = max(1, int(os.environ.get("EBGQD_THREADS", "1")))
    if threads > 1 and len(a) > 10000:
        chunks = np.array_split(a, threads)
        with ThreadPoolExecutor(threads) as pool:
            parts = pool.map(lambda c: _correlate_chunk(c, b, bin_width, tau_min, tau_max, n_bins), chunks)
            counts = sum(parts)
    else:
        counts = _correlate_chunk(a, b, bin_width, tau_min, tau_max, n_bins)
    return CorrelationHistogram(bin_width, tau_min, tau_max, counts, int(counts.sum()))


def symmetric_range(half_span: float, bin_width: int) -> tuple[int, int]:
    """Smallest ``(tau_min, tau_max)`` covering ``+-half_span`` on whole bins around 0."""
    n = int(math.ceil(half_span / bin_width))
    return -n * bin_width, n * bin_width


def centered_range(n_bins_half: int, bin_width: int) -> tuple[int, int]:
    """Range whose central bin is centred on zero delay (odd number of bins).

    ``bin_width`` must be even so the edges stay on integer picoseconds.
    """
    if bin_width % 2:
        raise ParameterError("bin_width must be even for a zero-centred bin")
    half = bin_width // 2
    return -n_bins_half * bin_width - half, n_bins_half * bin_width + half


@dataclass
class PeakAreas:
    """Integrated counts per pulse-peak index; index 0 is zero delay."""

    areas: dict
    windows: dict
    rep_period: float

    def __getitem__(self, k):
        return self.areas[k]

    @property
    def side_indices(self):
        return [k for k in self.areas if k != 0]


def _peak_assignment(hist: CorrelationHistogram, rep_period: float, half_window: float):
    c = hist.centers
    k = np.rint(c / rep_period).astype(np.int64)
    inside = np.abs(c - k * rep_period) <= half_window
    return k, inside


def peak_areas(
    hist: CorrelationHistogram,
    rep_period: float,
    half_window: float | None = None,
    side_peak_indices=None,
) -> PeakAreas:
    """Integrate the histogram around each pulse peak ``k * rep_period``.

    A bin belongs to peak ``k`` when its centre lies within ``half_window`` of
    the peak centre. With ``half_window = rep_period / 2`` (the default) the
    whole period is integrated. ``side_peak_indices`` defaults to
    ``+-3 .. +-10``.
    """
    if half_window is None:
        half_window = rep_period / 2
    if half_window > rep_period / 2 + 1e-9:
        raise ParameterError("peak windows overlap (half_window > rep_period / 2)")
    if side_peak_indices is None:
        side_peak_indices = [s * k for k in range(3, 11) for s in (-1, 1)]
    k_of_bin, inside = _peak_assignment(hist, rep_period, half_window)
    areas, windows = {}, {}
    for k in [0, *side_peak_indices]:
        lo, hi = k * rep_period - half_window, k * rep_period + half_window
        if lo < hist.tau_min - 1e-9 or hi > hist.tau_max + 1e-9:
            raise ParameterError(f"peak {k} window lies outside the histogram range")
        sel = inside & (k_of_bin == k)
        areas[k] = int(hist.counts[sel].sum())
        windows[k] = (lo, hi)
    return PeakAreas(areas, windows, rep_period)


def g2_zero_raw(areas: PeakAreas) -> float:
    """Zero-delay peak area over the mean side-peak area."""
    side = [areas[k] for k in areas.side_indices]
    if not side:
        raise ParameterError("at least one side peak is required")
    mean_side = float(np.mean(side))
    if mean_side <= 0:
        raise DegenerateDataError("side peaks are empty")
    return areas[0] / mean_side


def g2_zero_sigma(areas: PeakAreas) -> float:
    """Poisson standard error of :func:`g2_zero_raw`."""
    side = np.array([areas[k] for k in areas.side_indices], dtype=float)
    s = side.mean()
    z = areas[0]
    g = z / s
    var = z / s**2 + g**2 / (len(side) * s)
    return math.sqrt(var)


@dataclass
class BlinkingEnvelope:
    tau: np.ndarray  # ps, |delay| of each point
    envelope: np.ndarray
    sigma: np.ndarray
    flatness: float  # max |envelope - 1| over the points
    flatness_sigma: float  # typical statistical sigma of one point

    def rows(self):
        return list(zip(self.tau.tolist(), self.envelope.tolist()))


def blinking_envelope(
    hist: CorrelationHistogram,
    rep_period: float,
    duration_ps: float | None = None,
    tail_fraction: float = 0.25,
    include_zero: bool = False,
) -> BlinkingEnvelope:
    """Long-delay envelope of the pulse-peak areas.

    When the bins are narrower than the pulse period each peak is integrated
    over its full period; otherwise every bin is one envelope point (bins
    should then span a whole number of periods). Points at ``+k`` and ``-k``
    are merged. When ``duration_ps`` is given, the finite-run overlap
    ``duration - |tau|`` is divided out. Normalisation uses the mean of the
    outermost ``tail_fraction`` of points. The zero-delay point is excluded
    unless ``include_zero``.
    """
    if hist.bin_width < rep_period:
        k_of_bin, inside = _peak_assignment(hist, rep_period, rep_period / 2)
        kmax = int(min(-hist.tau_min, hist.tau_max) // rep_period) - 1
        ks = np.arange(0, kmax + 1)
        area = np.zeros(len(ks))
        npk = np.zeros(len(ks))
        for sign in (1, -1):
            sel = inside & (k_of_bin * sign >= 0) & (np.abs(k_of_bin) <= kmax)
            np.add.at(area, np.abs(k_of_bin[sel]), hist.counts[sel])
            npk += 1
        # the zero peak was added twice
        area[0] /= 2
        npk[0] = 1
        tau = ks * rep_period
    else:
        c = hist.centers
        mag = np.abs(np.rint(c)).astype(np.int64)
        tau, inv = np.unique(mag, return_inverse=True)
        area = np.bincount(inv, weights=hist.counts).astype(float)
        npk = np.bincount(inv).astype(float)
        tau = tau.astype(float)
    if not include_zero:
        keep = tau > rep_period / 2
        tau, area, npk = tau[keep], area[keep], npk[keep]
    if len(tau) < 10:
        raise ParameterError("too few peaks for an envelope (< 10)")
    raw = area / npk
    sigma_raw = np.sqrt(np.maximum(area, 1.0)) / npk
    if duration_ps is not None:
        overlap = (duration_ps - tau) / duration_ps
        raw = raw / overlap
        sigma_raw = sigma_raw / overlap
    n_tail = max(1, int(round(tail_fraction * len(tau))))
    norm = raw[-n_tail:].mean()
    if norm <= 0:
        raise DegenerateDataError("empty envelope tail")
    env = raw / norm
    sig = sigma_raw / norm
    flat = float(np.max(np.abs(env - 1.0)))
    return BlinkingEnvelope(tau, env, sig, flat, float(np.median(sig)))


@dataclass
class HomResult:
    half_widths: np.ndarray  # ps
    s_par: np.ndarray
    s_orth: np.ndarray
    visibility: np.ndarray
    sigma: np.ndarray

    def to_dict(self):
        return {
            "half_widths_ps": self.half_widths.tolist(),
            "s_par": self.s_par.tolist(),
            "s_orth": self.s_orth.tolist(),
            "visibility": self.visibility.tolist(),
            "sigma": self.sigma.tolist(),
        }


def hom_timebin_sums(hist_par: CorrelationHistogram, hist_orth: CorrelationHistogram, half_widths) -> HomResult:
    """``V(w) = 1 - S_par(w) / S_orth(w)`` with sums over bins whose centre has ``|tau| <= w``."""
    if not hist_par.same_binning(hist_orth):
        raise ParameterError("parallel and orthogonal histograms must share binning")
    c = np.abs(hist_par.centers)
    ws = np.asarray(half_widths, dtype=float)
    s_par = np.array([hist_par.counts[c <= w].sum() for w in ws], dtype=np.int64)
    s_orth = np.array([hist_orth.counts[c <= w].sum() for w in ws], dtype=np.int64)
    if np.any(s_orth == 0):
        raise DegenerateDataError("orthogonal sum is zero in at least one time bin")
    ratio = s_par / s_orth
    sigma = ratio * np.sqrt(1.0 / np.maximum(s_par, 1) + 1.0 / s_orth)
    return HomResult(ws, s_par, s_orth, 1.0 - ratio, sigma)


def microtime_histogram(clicks, rep_period: float, bin_width: int, offset: float = 0.0) -> CorrelationHistogram:
    """TCSPC histogram of click times relative to the preceding laser pulse.

    Pulses sit at ``offset + k * rep_period`` (ps). The trailing partial bin
    of each period is dropped.
    """
    t = _as_times(clicks).astype(float) - offset
    micro = t - np.floor(t / rep_period) * rep_period
    n_bins = int(rep_period // bin_width)
    counts = np.bincount((micro // bin_width).astype(np.int64), minlength=n_bins + 1)[:n_bins]
    return CorrelationHistogram(bin_width, 0, n_bins * bin_width, counts.astype(np.int64), int(counts.sum()), {"kind": "microtime"})
