"""Virtual optical benches: turn emission streams into detector clicks."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np

from . import emitter as em
from .cavity import CavityParams, lorentzian
from .errors import ParameterError

C_NM_GHZ = 299792458.0  # c in nm*GHz

# spawn-key tags of the bench random streams
_COLLECT, _SPLIT, _DET_A, _DET_B, _HOM, _POL = 10, 11, 12, 13, 14, 15


@dataclass(frozen=True)
class DetectorParams:
    """SNSPD model: efficiency, dark rate (Hz), Gaussian jitter and dead time (ps)."""

    efficiency: float = 1.0
    dark_rate: float = 0.0
    jitter_sigma: float = 0.0
    dead_time: float = 0.0

    def __post_init__(self):
        if not 0 <= self.efficiency <= 1:
            raise ParameterError("efficiency must lie in [0, 1]")
        if self.dark_rate < 0 or self.jitter_sigma < 0 or self.dead_time < 0:
            raise ParameterError("dark_rate, jitter_sigma and dead_time must be >= 0")


@dataclass(frozen=True)
class MziParams:
    """Unbalanced Mach-Zehnder interferometer.

    ``path_delay`` and ``window`` in ps. The input splitter is 50:50; the
    output splitter has reflectance ``R``. ``window`` is the pairing window for
    interference. It defaults to half the path delay, so every pair of photons
    sharing an output time slot is considered and the wavepacket overlap
    alone decides how strongly they interfere.
    """

    path_delay: float
    R: float = 0.5
    mode: str = "parallel"
    window: float | None = None

    def __post_init__(self):
        if not 0 < self.R < 1:
            raise ParameterError("R must lie in (0, 1)")
        if self.mode not in ("parallel", "orthogonal"):
            raise ParameterError(f"unknown interferometer mode {self.mode!r}")
        if self.path_delay < 0:
            raise ParameterError("path_delay must be >= 0")

    @property
    def T(self) -> float:
        return 1.0 - self.R


@dataclass
class DetectionRecords:
    """Clicks of one channel, integer ps, time-sorted."""

    channel: str
    times: np.ndarray

    def __len__(self):
        return len(self.times)


def _times_of(events) -> np.ndarray:
    if isinstance(events, em.EmissionStream):
        return events.time
    return np.asarray(events, dtype=np.int64)


@numba.njit(cache=True)
def _dead_time_mask(times, dead_time):
    keep = np.ones(times.shape[0], np.bool_)
    last = -(1 << 62)
    for i in range(times.shape[0]):
        if times[i] - last < dead_time:
            keep[i] = False
        else:
            last = times[i]
    return keep


def apply_detector(
    events,
    det: DetectorParams,
    seed: int = 0,
    duration_ps: int | None = None,
    channel: str = "A",
    stream_tag: int = _DET_A,
) -> DetectionRecords:
    """Thin by efficiency, add jitter and dark counts, enforce dead time.

    Dark counts are spread uniformly over ``[0, duration_ps)``; the duration
    defaults to the stream's own duration when ``events`` is an
    :class:`~ebgqd.emitter.EmissionStream`.
    """
    times = _times_of(events)
    if duration_ps is None:
        duration_ps = getattr(events, "duration_ps", int(times[-1]) + 1 if len(times) else 0)
    rng = em._generator(seed, stream_tag)
    kept = times[rng.random(len(times)) < det.efficiency] if det.efficiency < 1 else times.copy()
    if det.jitter_sigma > 0 and len(kept):
        kept = np.rint(kept + rng.normal(0.0, det.jitter_sigma, len(kept))).astype(np.int64)
        np.maximum(kept, 0, out=kept)
    if det.dark_rate > 0 and duration_ps > 0:
        n_dark = rng.poisson(det.dark_rate * duration_ps * 1e-12)
        dark = np.floor(rng.random(n_dark) * duration_ps).astype(np.int64)
        kept = np.concatenate([kept, dark])
    kept = np.sort(kept, kind="stable")
    if det.dead_time > 0 and len(kept):
        kept = kept[_dead_time_mask(kept, det.dead_time)]
    return DetectionRecords(channel, kept)


def collect(stream: em.EmissionStream, cavity: CavityParams | None = None, throughput: float = 1.0, seed: int = 0):
    """Keep photons reaching the fibre.

    H and V photons survive with the cavity's first-lens efficiency times
    ``throughput``; leak photons are lost.
    """
    if not 0 <= throughput <= 1:
        raise ParameterError("throughput must lie in [0, 1]")
    eta_h = cavity.eta_h if cavity is not None else 1.0
    eta_v = cavity.eta_v if cavity is not None else 1.0
    p_keep = np.array([eta_h, eta_v, 0.0]) * throughput
    rng = em._generator(seed, _COLLECT)
    keep = rng.random(len(stream)) < p_keep[stream.polarization]
    return stream.select(keep)


def run_hbt(events, det_a: DetectorParams, det_b: DetectorParams, seed: int = 0, duration_ps=None):
    """Ideal 50:50 splitter followed by one detector per output."""
    times = _times_of(events)
    if duration_ps is None:
        duration_ps = getattr(events, "duration_ps", None)
    rng = em._generator(seed, _SPLIT)
    to_a = rng.random(len(times)) < 0.5
    a = apply_detector(times[to_a], det_a, seed, duration_ps, "A", _DET_A)
    b = apply_detector(times[~to_a], det_b, seed, duration_ps, "B", _DET_B)
    return a, b


def wavepacket_overlap(dt, dnu, tau):
    """Overlap of two single-sided exponential wavepackets.

    ``dt`` in ps, ``dnu`` in GHz, ``tau`` in ns:
    ``exp(-|dt| / tau) / (1 + (2 pi dnu tau)^2)``.
    """
    if not tau > 0:
        raise ParameterError("tau must be > 0")
    dt_ns = np.abs(np.asarray(dt, dtype=float)) / 1000.0
    x = 2.0 * math.pi * np.asarray(dnu, dtype=float) * tau
    out = np.exp(-dt_ns / tau) / (1.0 + x * x)
    return float(out) if out.ndim == 0 else out


# two-photon outcomes at the output splitter; port a = short arm, b = long arm
CD, DC, CC, DD = 0, 1, 2, 3


def two_photon_outcome_probs(M, R, chi):
    """Outcome probabilities ``(a->c b->d, a->d b->c, both c, both d)``.

    Coincidences occur with probability ``R^2 + T^2 - 2 R T M chi``; they are
    split between the two port assignments in the ratio ``T^2 : R^2`` and the
    bunched remainder evenly, so ``chi = 0`` gives classical routing exactly.
    """
    M = np.asarray(M, dtype=float)
    T = 1.0 - R
    p_co = R * R + T * T - 2.0 * R * T * M * chi
    p_cd = p_co * T * T / (R * R + T * T)
    p_dc = p_co - p_cd
    p_b = 0.5 * (1.0 - p_co)
    return np.stack(np.broadcast_arrays(p_cd, p_dc, p_b, p_b), axis=-1)


def interfere_pairs(M, R, chi, u) -> np.ndarray:
    """Sample pair outcomes from uniforms ``u`` (one per pair)."""
    cdf = np.cumsum(two_photon_outcome_probs(M, R, chi), axis=-1)
    u = np.asarray(u)
    return np.minimum((u[:, None] >= cdf[..., :3]).sum(axis=-1), 3).astype(np.int8)


def _greedy_pairs(candidate: np.ndarray) -> np.ndarray:
    """Resolve overlapping neighbour pairs (i, i+1) greedily in time order."""
    idx = np.arange(len(candidate))
    last_break = np.maximum.accumulate(np.where(candidate, -1, idx))
    return candidate & ((idx - last_break - 1) % 2 == 0)


def run_hom(
    events: em.EmissionStream,
    mzi: MziParams,
    det_a: DetectorParams,
    det_b: DetectorParams,
    seed: int = 0,
    tau: float = 1.0,
    overlap=None,
    rep_period: float | None = None,
):
    """Send photons through an unbalanced MZI and detect both outputs.

    Each photon takes the short or long arm with probability 1/2. Photons
    meeting at the output splitter via different arms interfere pairwise with wavepacket overlap computed from their arrival
    time and frequency differences (``tau`` is the radiative lifetime in ns).
    ``overlap`` overrides the computed overlap with a constant, for
    calibration and pair-level checks. All other photons route classically.

    Photons meet when they are neighbours in arrival order and share an
    output time slot. With ``rep_period`` (ps) and a pulsed stream the slot is
    the pulse index advanced by the arm delay in periods; otherwise photons
    closer than ``mzi.window`` share a slot.

    Random draws do not depend on ``mzi.mode``, so the parallel and
    orthogonal runs of one seed share arm choices and pairings.
    """
    rng = em._generator(seed, _HOM)
    n = len(events)
    long_arm = rng.random(n) < 0.5
    u_pair = rng.random(n)
    u_route = rng.random(n)
    arrival = events.time + np.where(long_arm, np.int64(round(mzi.path_delay)), 0)
    order = np.argsort(arrival, kind="stable")
    arrival = arrival[order]
    long_arm = long_arm[order]
    nu = events.nu_offset[order]

    pulses = events.pulse_index[order]
    if rep_period is not None and n and pulses.min() >= 0:
        slot = pulses + long_arm * int(round(mzi.path_delay / rep_period))
        together = slot[1:] == slot[:-1]
    else:
        if mzi.window is not None:
            window = mzi.window
        else:
            window = 0.5 * mzi.path_delay if mzi.path_delay > 0 else 3.0 * tau * 1000.0
        together = np.diff(arrival) < window
    first = _greedy_pairs(together & (long_arm[1:] != long_arm[:-1]))
    i1 = np.flatnonzero(first)
    i2 = i1 + 1

    # classical routing: port a (short) -> c with T, port b (long) -> c with R
    to_c = np.where(long_arm, u_route < mzi.R, u_route < mzi.T)
    if len(i1):
        if overlap is None:
            m = wavepacket_overlap(arrival[i2] - arrival[i1], nu[i2] - nu[i1], tau)
        else:
            m = np.full(len(i1), float(overlap))
        chi = 1.0 if mzi.mode == "parallel" else 0.0
        outcome = interfere_pairs(m, mzi.R, chi, u_pair[: len(i1)])
        a_is_first = ~long_arm[i1]
        a_to_c = (outcome == CD) | (outcome == CC)
        b_to_c = (outcome == DC) | (outcome == CC)
        to_c[i1] = np.where(a_is_first, a_to_c, b_to_c)
        to_c[i2] = np.where(a_is_first, b_to_c, a_to_c)

    duration = events.duration_ps + int(round(mzi.path_delay))
    a = apply_detector(arrival[to_c], det_a, seed, duration, "A", _DET_A)
    b = apply_detector(arrival[~to_c], det_b, seed, duration, "B", _DET_B)
    return a, b


def run_polarizer_sweep(i_h: float, i_v: float, angles, axis: float = 0.0):
    """Malus-law transmission for polariser angles in degrees.

    ``axis`` is the polariser angle (degrees) that passes the H mode.
    """
    if i_h < 0 or i_v < 0:
        raise ParameterError("intensities must be >= 0")
    phi = np.deg2rad(np.asarray(angles, dtype=float) - axis)
    return i_h * np.cos(phi) ** 2 + i_v * np.sin(phi) ** 2


def count_polarizations(stream: em.EmissionStream) -> tuple[int, int]:
    """Collected H and V photon counts of a stream."""
    counts = np.bincount(stream.polarization, minlength=3)
    return int(counts[em.H]), int(counts[em.V])


def nu_to_wavelength(lambda0: float, nu_offset):
    """Shift a line at ``lambda0`` (nm) by frequency offsets in GHz."""
    nu0 = C_NM_GHZ / lambda0
    return C_NM_GHZ / (nu0 + np.asarray(nu_offset, dtype=float))


def run_spectrometer(
    stream: em.EmissionStream,
    cavity: CavityParams,
    lambda_emit: float,
    grid,
    mode_level: float = 0.5,
    qd_linewidth: float = 0.1,
):
    """Normalised spectrum on ``grid`` (nm).

    Sum of the two cavity modes as seen under broadband excitation, each with
    height ``mode_level`` relative to the QD line, plus the QD line built from
    the stream's collected H/V photons (each broadened by a Lorentzian of
    FWHM ``qd_linewidth``). The result peaks at 1.
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ParameterError("empty wavelength grid")
    modes = lorentzian(grid, cavity.lambda_h, cavity.fwhm_h) + lorentzian(grid, cavity.lambda_v, cavity.fwhm_v)
    weights = np.array([cavity.eta_h, cavity.eta_v, 0.0])[stream.polarization]
    qd = np.zeros_like(grid)
    if weights.sum() > 0:
        lam = nu_to_wavelength(lambda_emit, stream.nu_offset)
        # group photons on a fine wavelength lattice before broadening
        step = qd_linewidth / 20.0
        key = np.rint((lam - lambda_emit) / step).astype(np.int64)
        uniq, inv = np.unique(key, return_inverse=True)
        w = np.bincount(inv, weights=weights)
        centers = lambda_emit + uniq * step
        for c, wi in zip(centers, w):
            qd += wi * lorentzian(grid, c, qd_linewidth)
        qd /= qd.max()
    spectrum = mode_level * modes + qd
    return spectrum / spectrum.max()


def local_maxima(grid, spectrum, min_height: float = 0.05):
    """Wavelengths of strict local maxima above ``min_height``."""
    s = np.asarray(spectrum)
    inner = (s[1:-1] > s[:-2]) & (s[1:-1] >= s[2:]) & (s[1:-1] >= min_height)
    return np.asarray(grid)[1:-1][inner]
