"""Stochastic photon emission from a non-resonantly pumped quantum dot.

All times inside the simulator are float picoseconds; event timestamps are
rounded to integer picoseconds on output. Runs are split into fixed-size
segments, each drawing from its own counter-derived random stream, so the
result depends only on ``(params, seed)`` and never on how the work is
scheduled.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numba
import numpy as np

from .errors import ParameterError

PS_PER_NS = 1000.0
PS_PER_S = 1e12

EXCITON, REFILL = 0, 1
ORIGINS = ("exciton", "refill")
H, V, LEAK = 0, 1, 2
POLARIZATIONS = ("H", "V", "leak")

# pulses per pulsed segment / renewal intervals per CW block
SEGMENT_PULSES = 1 << 20
CW_BLOCK = 1 << 20

# spawn-key tags for the independent random streams of a run
_TELEGRAPH, _PULSED, _CW = 0, 1, 2


@dataclass(frozen=True)
class EmitterParams:
    """Emitter dynamics.

    Times in ns, blinking rates in 1/ms, spectral diffusion in GHz and the
    saturation scale in uW. ``blink_on_rate`` is the dark-to-bright rate and
    ``blink_off_rate`` the bright-to-dark rate; both zero disables blinking.
    ``refill_depth`` caps the refill chain length (``None`` = geometric,
    unbounded). ``refill_power_exponent`` scales the recapture probability as
    ``p_refill * p_exc ** exponent``; zero makes refilling power independent.
    """

    tau_cav: float
    tau_relax: float = 0.1
    p_refill: float = 0.0
    tau_refill: float = 1.5
    blink_on_rate: float = 0.0
    blink_off_rate: float = 0.0
    sigma_nu: float = 0.0
    p_sat_power: float = 1.0
    refill_depth: int | None = None
    refill_power_exponent: float = 0.0

    def __post_init__(self):
        if not self.tau_cav > 0:
            raise ParameterError("tau_cav must be > 0")
        if self.tau_relax < 0 or self.tau_refill < 0:
            raise ParameterError("delays must be >= 0")
        if not 0 <= self.p_refill < 1:
            raise ParameterError("p_refill must lie in [0, 1)")
        if self.blink_on_rate < 0 or self.blink_off_rate < 0:
            raise ParameterError("blinking rates must be >= 0")
        if self.sigma_nu < 0:
            raise ParameterError("sigma_nu must be >= 0")
        if not self.p_sat_power > 0:
            raise ParameterError("p_sat_power must be > 0")
        if self.refill_depth is not None and self.refill_depth < 0:
            raise ParameterError("refill_depth must be >= 0")

    @property
    def blinking(self) -> bool:
        return self.blink_on_rate > 0 or self.blink_off_rate > 0

    @property
    def duty_cycle(self) -> float:
        if not self.blinking:
            return 1.0
        return self.blink_on_rate / (self.blink_on_rate + self.blink_off_rate)


@dataclass(frozen=True)
class ExcitationSchedule:
    """Pump settings: ``rep_rate`` in MHz, ``power`` in uW, ``duration`` in s."""

    mode: str = "pulsed"
    rep_rate: float = 76.0
    power: float = 1.0
    duration: float = 1e-3

    def __post_init__(self):
        if self.mode not in ("pulsed", "cw"):
            raise ParameterError(f"unknown excitation mode {self.mode!r}")
        if self.mode == "pulsed" and not self.rep_rate > 0:
            raise ParameterError("rep_rate must be > 0 in pulsed mode")
        if self.power < 0:
            raise ParameterError("power must be >= 0")
        if self.duration < 0:
            raise ParameterError("duration must be >= 0")

    @property
    def period_ps(self) -> float:
        return 1e6 / self.rep_rate

    @property
    def duration_ps(self) -> int:
        return int(round(self.duration * PS_PER_S))

    @property
    def n_pulses(self) -> int:
        return int(math.floor(self.duration * self.rep_rate * 1e6 + 1e-9))


@dataclass(frozen=True)
class EmissionEvent:
    time: int
    pulse_index: int
    origin: str
    polarization: str
    nu_offset: float


@dataclass
class EmissionStream:
    """Column-oriented, time-ordered emission record."""

    time: np.ndarray
    pulse_index: np.ndarray
    origin: np.ndarray
    polarization: np.ndarray
    nu_offset: np.ndarray
    duration_ps: int

    def __len__(self):
        return len(self.time)

    def __getitem__(self, i) -> EmissionEvent:
        return EmissionEvent(
            int(self.time[i]),
            int(self.pulse_index[i]),
            ORIGINS[self.origin[i]],
            POLARIZATIONS[self.polarization[i]],
            float(self.nu_offset[i]),
        )

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    def select(self, mask) -> "EmissionStream":
        return EmissionStream(
            self.time[mask],
            self.pulse_index[mask],
            self.origin[mask],
            self.polarization[mask],
            self.nu_offset[mask],
            self.duration_ps,
        )

    @classmethod
    def empty(cls, duration_ps: int = 0) -> "EmissionStream":
        return cls(
            np.zeros(0, np.int64),
            np.zeros(0, np.int64),
            np.zeros(0, np.int8),
            np.zeros(0, np.int8),
            np.zeros(0, np.float64),
            duration_ps,
        )

    @classmethod
    def concatenate(cls, parts, duration_ps: int) -> "EmissionStream":
        """Merge segments into one stream ordered by time (stable on ties)."""
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls.empty(duration_ps)
        time = np.concatenate([p.time for p in parts])
        order = np.argsort(time, kind="stable")
        return cls(
            time[order],
            np.concatenate([p.pulse_index for p in parts])[order],
            np.concatenate([p.origin for p in parts])[order],
            np.concatenate([p.polarization for p in parts])[order],
            np.concatenate([p.nu_offset for p in parts])[order],
            duration_ps,
        )


def excitation_probability(power: float, p_sat_power: float) -> float:
    """Per-pulse excitation probability ``1 - exp(-power / p_sat_power)``."""
    if power < 0:
        raise ParameterError("power must be >= 0")
    if not p_sat_power > 0:
        raise ParameterError("p_sat_power must be > 0")
    return -math.expm1(-power / p_sat_power)


def mean_photons_per_pulse(p_exc: float, p_refill: float) -> float:
    """Mean photon number per pulse with geometric refill chains."""
    if not 0 <= p_refill < 1:
        raise ParameterError("p_refill must lie in [0, 1)")
    return p_exc / (1.0 - p_refill)


def effective_refill(emitter: EmitterParams, p_exc: float) -> float:
    if emitter.refill_power_exponent == 0:
        return emitter.p_refill
    return emitter.p_refill * p_exc**emitter.refill_power_exponent


def _generator(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed) & (2**64 - 1), spawn_key=key)
    return np.random.Generator(np.random.PCG64(ss))


def _threads() -> int:
    return max(1, int(os.environ.get("EBGQD_THREADS", "1")))


def telegraph_switches(emitter: EmitterParams, duration_ps: float, seed: int):
    """Switching times (ps) of the bright/dark telegraph and the initial state.

    The initial state is drawn from the stationary distribution.
    """
    rng = _generator(seed, _TELEGRAPH)
    if not emitter.blinking:
        return np.zeros(0), True
    on0 = bool(rng.random() < emitter.duty_cycle)
    # mean dwell times in ps; a zero rate means the state is absorbing
    dwell_on = math.inf if emitter.blink_off_rate == 0 else 1e9 / emitter.blink_off_rate
    dwell_off = math.inf if emitter.blink_on_rate == 0 else 1e9 / emitter.blink_on_rate
    switches = []
    t, on = 0.0, on0
    chunk = []
    while t < duration_ps:
        if not chunk:
            chunk = list(rng.standard_exponential(256))
        mean = dwell_on if on else dwell_off
        if math.isinf(mean):
            break
        t += mean * chunk.pop()
        switches.append(t)
        on = not on
    return np.asarray(switches, dtype=float), on0


def telegraph_state(times, switches, on0: bool) -> np.ndarray:
    """Bright-state mask at the given times."""
    n_before = np.searchsorted(switches, times, side="right")
    return (n_before % 2 == 0) == on0


def _tag_photons(rng, n, branching, sigma_nu):
    p_h, p_v, _ = branching
    u = rng.random(n)
    pol = (u >= p_h).astype(np.int8) + (u >= p_h + p_v).astype(np.int8)
    nu = rng.normal(0.0, sigma_nu, n) if sigma_nu > 0 else np.zeros(n)
    return pol, nu


def _refill_chains(rng, parent_time, parent_pulse, emitter, p_refill):
    """Grow refill chains level by level; returns (times, pulses) of refills."""
    times, pulses = [], []
    cur_t, cur_k = parent_time, parent_pulse
    depth = 0
    while len(cur_t) and p_refill > 0:
        if emitter.refill_depth is not None and depth >= emitter.refill_depth:
            break
        keep = rng.random(len(cur_t)) < p_refill
        cur_t, cur_k = cur_t[keep], cur_k[keep]
        n = len(cur_t)
        delay = (
            emitter.tau_refill * rng.standard_exponential(n)
            + emitter.tau_cav * rng.standard_exponential(n)
        ) * PS_PER_NS
        # rounded child must stay strictly after its rounded parent
        cur_t = np.maximum(cur_t + delay, np.rint(cur_t) + 1.0)
        times.append(cur_t)
        pulses.append(cur_k)
        depth += 1
    if not times:
        return np.zeros(0), np.zeros(0, np.int64)
    return np.concatenate(times), np.concatenate(pulses)


def _pulsed_segment(seg, emitter, schedule, branching, seed, telegraph, p_exc, p_refill):
    rng = _generator(seed, _PULSED, seg)
    k0 = seg * SEGMENT_PULSES
    k1 = min(schedule.n_pulses, k0 + SEGMENT_PULSES)
    k = np.arange(k0, k1, dtype=np.int64)
    t_pulse = k * schedule.period_ps
    fired = rng.random(len(k)) < p_exc
    if emitter.blinking:
        fired &= telegraph_state(t_pulse, *telegraph)
    k = k[fired]
    n = len(k)
    t_x = t_pulse[fired] + (
        emitter.tau_relax * rng.standard_exponential(n)
        + emitter.tau_cav * rng.standard_exponential(n)
    ) * PS_PER_NS
    t_r, k_r = _refill_chains(rng, t_x, k, emitter, p_refill)
    time = np.concatenate([t_x, t_r])
    pulse = np.concatenate([k, k_r])
    origin = np.concatenate([np.zeros(n, np.int8), np.ones(len(t_r), np.int8)])
    pol, nu = _tag_photons(rng, len(time), branching, emitter.sigma_nu)
    order = np.argsort(time, kind="stable")
    return EmissionStream(
        np.rint(time[order]).astype(np.int64),
        pulse[order],
        origin[order],
        pol[order],
        nu[order],
        schedule.duration_ps,
    )


@numba.njit(cache=True)
def _renewal_types(u, p_refill, max_depth):
    """Interval types of the CW renewal process (1 = refill, 0 = re-excitation).

    ``max_depth < 0`` means unbounded chains.
    """
    out = np.zeros(u.shape[0], np.int8)
    depth = 0
    for i in range(u.shape[0]):
        if u[i] < p_refill and (max_depth < 0 or depth < max_depth):
            out[i] = 1
            depth += 1
        else:
            depth = 0
    return out


def _cw_stream(emitter, schedule, branching, seed, telegraph, p_refill):
    duration = float(schedule.duration_ps)
    pump_rate = schedule.power / emitter.p_sat_power / emitter.tau_cav  # 1/ns
    if pump_rate <= 0 or duration <= 0:
        return EmissionStream.empty(schedule.duration_ps)
    max_depth = -1 if emitter.refill_depth is None else emitter.refill_depth
    times, origins = [], []
    t_end = 0.0
    block = 0
    while t_end < duration:
        rng = _generator(seed, _CW, block)
        n = CW_BLOCK
        kind = _renewal_types(rng.random(n), p_refill, max_depth)
        # the first interval of a block never continues a previous block's chain
        excite = (
            rng.standard_exponential(n) / pump_rate
            + emitter.tau_relax * rng.standard_exponential(n)
        )
        refill = emitter.tau_refill * rng.standard_exponential(n)
        interval = (np.where(kind == 1, refill, excite) + emitter.tau_cav * rng.standard_exponential(n)) * PS_PER_NS
        t = t_end + np.cumsum(interval)
        t_end = t[-1]
        times.append(t)
        origins.append(kind)
        block += 1
    time = np.concatenate(times)
    origin = np.concatenate(origins)
    keep = time < duration
    time, origin = time[keep], origin[keep]
    if emitter.blinking:
        on = telegraph_state(time, *telegraph)
        time, origin = time[on], origin[on]
    rng = _generator(seed, _CW, 1 << 30)
    pol, nu = _tag_photons(rng, len(time), branching, emitter.sigma_nu)
    return EmissionStream(
        np.rint(time).astype(np.int64),
        np.full(len(time), -1, np.int64),
        origin.astype(np.int8),
        pol,
        nu,
        schedule.duration_ps,
    )


def _check_branching(branching):
    p = np.asarray(branching, dtype=float)
    if p.shape != (3,) or np.any(p < 0) or np.any(p > 1) or abs(p.sum() - 1) > 1e-9:
        raise ParameterError("branching must be three probabilities summing to 1")


def simulate_stream(
    emitter: EmitterParams,
    schedule: ExcitationSchedule,
    branching=(1.0, 0.0, 0.0),
    seed: int = 0,
) -> EmissionStream:
    """Simulate the time-ordered photon emission of one run.

    Pulsed excitation fires each pulse with ``excitation_probability`` while
    the emitter is bright; the exciton photon leaves after an exponential
    relaxation delay plus an exponential radiative delay. Every photon may be
    followed, with probability ``p_refill``, by a refill photon after a
    recapture delay plus a radiative delay. CW excitation is a renewal
    process with pump rate ``power / p_sat_power`` per ``tau_cav``.

    Parameters
    ----------
    branching : (p_h, p_v, p_leak)
        Polarisation channel probabilities assigned per photon.
    seed : int
        64-bit seed; identical inputs give identical streams.
    """
    _check_branching(branching)
    if schedule.duration <= 0:
        return EmissionStream.empty(0)
    telegraph = telegraph_switches(emitter, schedule.duration_ps, seed)
    p_exc = excitation_probability(schedule.power, emitter.p_sat_power)
    p_refill = effective_refill(emitter, p_exc)
    if schedule.mode == "cw":
        return _cw_stream(emitter, schedule, branching, seed, telegraph, p_refill)
    n_seg = -(-schedule.n_pulses // SEGMENT_PULSES)

    def run(seg):
        return _pulsed_segment(seg, emitter, schedule, branching, seed, telegraph, p_exc, p_refill)

    threads = _threads()
    if threads > 1 and n_seg > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(run, range(n_seg)))
    else:
        parts = [run(s) for s in range(n_seg)]
    return EmissionStream.concatenate(parts, schedule.duration_ps)
