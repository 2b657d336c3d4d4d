"""Experiment pipelines: simulate, bench, correlate, analyze, report.

Every experiment runs in three stages whose products can live on disk:

``simulate``
    emission plus optical bench; produces timestamp files and bench tables
    (spectra, polariser sweeps, count rates).
``correlate``
    turns timestamp channels into histograms.
``analyze``
    fits and figures of merit; produces the report and plot data.
"""

from __future__ import annotations

import csv
import json
import math
import platform
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import bench
from . import correlator as corr
from . import emitter as em
from .analysis import fitting, metrics
from .cavity import CavityParams, DipoleParams, effective_lifetime, emission_branching, purcell_total
from .config import compute_hash
from .errors import ConvergenceError, DegenerateDataError, EbgError, InconsistentInputsError, ParameterError
from .io import (
    TimestampFile,
    histogram_from_dict,
    histogram_to_dict,
    read_timestamps,
    write_columns_csv,
    write_histogram_csv,
    write_json,
    write_timestamps,
)

REPORT_VERSION = 1
EXIT_OK, EXIT_SCHEMA, EXIT_ANALYSIS = 0, 2, 3

# spawn-key tag for polariser shot noise
_POL_NOISE = 30


class InsufficientData(EbgError):
    """The run produced too few events to analyse."""


@dataclass
class Products:
    """Output of the simulate stage."""

    timestamps: dict = field(default_factory=dict)  # run name -> TimestampFile
    tables: dict = field(default_factory=dict)  # name -> (header, columns)
    info: dict = field(default_factory=dict)


@dataclass
class Analysis:
    metrics: dict = field(default_factory=dict)
    fits: dict = field(default_factory=dict)
    series: dict = field(default_factory=dict)
    plots: dict = field(default_factory=dict)  # name -> (header, columns)
    flags: list = field(default_factory=list)


# ---------------------------------------------------------------- building blocks


@dataclass
class Device:
    cavity: CavityParams
    dipole: DipoleParams
    branching: tuple
    emitter: em.EmitterParams
    predicted_pol_ratio: float


def build_device(cfg: dict) -> Device:
    cavity = CavityParams(**cfg["cavity"])
    dipole = DipoleParams(**cfg["dipole"])
    eta = cfg.get("bench", {}).get("eta_override")
    if eta is not None:
        cavity = replace(cavity, eta_h=eta, eta_v=eta)
    b = emission_branching(cavity, dipole)
    kw = dict(cfg.get("emitter", {}))
    if kw.get("tau_cav") is None:
        kw["tau_cav"] = effective_lifetime(purcell_total(cavity, dipole)[2], dipole.tau_slab)
    return Device(cavity, dipole, b.as_tuple(), em.EmitterParams(**kw), b.predicted_pol_ratio)


def build_schedule(cfg: dict, power: float | None = None) -> em.ExcitationSchedule:
    kw = {k: v for k, v in cfg.get("schedule", {}).items() if k != "powers"}
    if power is not None:
        kw["power"] = power
    return em.ExcitationSchedule(**kw)


def detectors(cfg: dict):
    b = cfg.get("bench", {})
    det_a = bench.DetectorParams(**b.get("detector", {}))
    det_b = bench.DetectorParams(**b["detector_b"]) if "detector_b" in b else det_a
    return det_a, det_b


def subseed(seed: int, index: int) -> int:
    """Independent 64-bit seed for the ``index``-th sub-run of a sweep."""
    return int(np.random.SeedSequence([int(seed) & (2**64 - 1), index]).generate_state(1, np.uint64)[0])


def with_background(det: bench.DetectorParams, signal_rate: float, rho: float | None) -> bench.DetectorParams:
    """Add dark counts so that signal clicks make up a fraction ``rho``."""
    if rho is None or rho >= 1 or signal_rate <= 0:
        return det
    extra = signal_rate * (1.0 - rho) / rho
    return replace(det, dark_rate=det.dark_rate + extra)


def _collected(cfg, dev: Device, schedule, seed):
    stream = em.simulate_stream(dev.emitter, schedule, dev.branching, seed)
    return bench.collect(stream, dev.cavity, cfg.get("bench", {}).get("throughput", 1.0), seed)


def _hbt_detect(cfg, photons, schedule, seed, ctx_hash, name, background_rate=None):
    """Split, detect and package one HBT run.

    ``background_rate`` (1/s per detector) overrides the fixed signal
    fraction of ``bench.signal_fraction``.
    """
    det_a, det_b = detectors(cfg)
    rho = cfg.get("bench", {}).get("signal_fraction")
    duration_s = schedule.duration_ps * 1e-12
    info = {"n_collected": len(photons), "duration_ps": schedule.duration_ps}
    if background_rate is not None:
        det_a = replace(det_a, dark_rate=det_a.dark_rate + background_rate)
        det_b = replace(det_b, dark_rate=det_b.dark_rate + background_rate)
    elif duration_s > 0:
        det_a = with_background(det_a, 0.5 * len(photons) * det_a.efficiency / duration_s, rho)
        det_b = with_background(det_b, 0.5 * len(photons) * det_b.efficiency / duration_s, rho)
    info["dark_rate_a"] = det_a.dark_rate
    info["dark_rate_b"] = det_b.dark_rate
    a, b = bench.run_hbt(photons, det_a, det_b, seed, schedule.duration_ps)
    tf = TimestampFile({"A": a.times, "B": b.times}, schedule.duration_ps, seed, ctx_hash, {"run": name})
    return tf, info


def _hbt_run(cfg, dev: Device, schedule, seed, ctx_hash, name="hbt") -> tuple[TimestampFile, dict]:
    photons = _collected(cfg, dev, schedule, seed)
    return _hbt_detect(cfg, photons, schedule, seed, ctx_hash, name)


def _hbt_sweep(cfg, seed, chash) -> Products:
    """HBT runs over ``schedule.powers``.

    ``bench.background_scaling`` sets how uncorrelated background follows the
    pump: ``"fraction"`` keeps the signal fraction fixed at every power,
    ``"linear"`` scales the background rate with power and ``"constant"``
    keeps it fixed; the latter two anchor the signal fraction at
    ``schedule.power``, which must be one of the swept powers.
    """
    dev = build_device(cfg)
    powers = list(cfg["schedule"]["powers"])
    b = cfg.get("bench", {})
    scaling = b.get("background_scaling", "fraction")
    if scaling not in ("fraction", "linear", "constant"):
        raise ParameterError(f"unknown background_scaling {scaling!r}")
    products = Products(info={"powers": powers})
    seeds = [subseed(seed, i) for i in range(len(powers))]
    if scaling == "fraction":
        for i, p in enumerate(powers):
            schedule = build_schedule(cfg, p)
            tf, info = _hbt_run(cfg, dev, schedule, seeds[i], chash, f"p{i}")
            products.timestamps[f"p{i}"] = tf
            products.info[f"p{i}"] = info
            products.info["rep_period_ps"] = schedule.period_ps
        return products
    p_ref = cfg["schedule"].get("power", 1.0)
    if p_ref not in powers:
        raise ParameterError("schedule.power must be one of schedule.powers to anchor the background")
    schedules = [build_schedule(cfg, p) for p in powers]
    collected = [_collected(cfg, dev, s, sd) for s, sd in zip(schedules, seeds)]
    i_ref = powers.index(p_ref)
    det_a, _ = detectors(cfg)
    s_ref = 0.5 * len(collected[i_ref]) * det_a.efficiency / (schedules[i_ref].duration_ps * 1e-12)
    rho = b.get("signal_fraction") or 1.0
    bg_ref = s_ref * (1.0 - rho) / rho
    for i, (p, schedule, photons) in enumerate(zip(powers, schedules, collected)):
        bg = bg_ref * (p / p_ref if scaling == "linear" else 1.0)
        tf, info = _hbt_detect(cfg, photons, schedule, seeds[i], chash, f"p{i}", bg)
        products.timestamps[f"p{i}"] = tf
        products.info[f"p{i}"] = info
        products.info["rep_period_ps"] = schedule.period_ps
    return products


def _require_counts(*arrays, minimum=1):
    if any(len(a) < minimum for a in arrays):
        raise InsufficientData("not enough clicks to analyse")


def _fit_record(analysis: Analysis, name: str, fn, *args, **kwargs):
    """Run a fit, store its summary; convergence failures keep the partial result."""
    try:
        result = fn(*args, **kwargs)
    except ConvergenceError as exc:
        if exc.result is not None:
            analysis.fits[name] = exc.result.to_dict()
        analysis.flags.append(f"convergence_failure:{name}")
        raise
    analysis.fits[name] = result.to_dict()
    return result


def _period(cfg) -> float:
    return build_schedule(cfg).period_ps


# ---------------------------------------------------------------- experiments


class Experiment:
    """Base class; subclasses implement the three stages."""

    def simulate(self, cfg, seed, chash) -> Products:
        raise NotImplementedError

    def correlate(self, cfg, products: Products) -> dict:
        return {}

    def analyze(self, cfg, products: Products, hists: dict, out: Analysis) -> None:
        raise NotImplementedError


class Spectrum(Experiment):
    def simulate(self, cfg, seed, chash):
        dev = build_device(cfg)
        schedule = build_schedule(cfg)
        photons = _collected(cfg, dev, schedule, seed)
        sp = cfg.get("bench", {}).get("spectrometer", {})
        grid = np.arange(sp.get("grid_min", 1500.0), sp.get("grid_max", 1580.0) + 1e-9, sp.get("grid_step", 0.01))
        channels = {
            "H": photons.time[photons.polarization == em.H],
            "V": photons.time[photons.polarization == em.V],
        }
        tf = TimestampFile(channels, schedule.duration_ps, seed, chash, {"run": "spectrum"})
        products = Products({"spectrum": tf}, info={"n_collected": len(photons)})
        if len(photons):
            spec = bench.run_spectrometer(
                photons, dev.cavity, dev.dipole.lambda_emit, grid, sp.get("mode_level", 0.5), sp.get("qd_linewidth", 0.1)
            )
            products.tables["spectrum"] = (["wavelength_nm", "intensity"], [grid, spec])
        return products

    def analyze(self, cfg, products, hists, out):
        if "spectrum" not in products.tables:
            raise InsufficientData("no photons reached the spectrometer")
        grid, spec = (np.asarray(c, dtype=float) for c in products.tables["spectrum"][1])
        maxima = bench.local_maxima(grid, spec)
        if len(maxima) < 2:
            raise DegenerateDataError("fewer than two spectral maxima")
        heights = np.interp(maxima, grid, spec)
        top = np.sort(maxima[np.argsort(heights)[::-1][:2]])
        out.metrics["mode_splitting_nm"] = float(top[1] - top[0])
        out.metrics["peak_wavelength_nm"] = float(grid[np.argmax(spec)])
        out.metrics["n_maxima"] = float(len(maxima))
        out.series["maxima_nm"] = [float(x) for x in maxima]
        out.plots["spectrum"] = (["wavelength_nm", "intensity"], [grid, spec])


class Polarization(Experiment):
    def simulate(self, cfg, seed, chash):
        dev = build_device(cfg)
        schedule = build_schedule(cfg)
        photons = _collected(cfg, dev, schedule, seed)
        n_h, n_v = bench.count_polarizations(photons)
        b = cfg.get("bench", {})
        angles = np.asarray(b.get("polarizer_angles", list(range(0, 361, 10))), dtype=float)
        expected = bench.run_polarizer_sweep(n_h, n_v, angles, b.get("polarizer_axis", 0.0))
        counts = em._generator(seed, _POL_NOISE).poisson(expected)
        channels = {
            "H": photons.time[photons.polarization == em.H],
            "V": photons.time[photons.polarization == em.V],
        }
        tf = TimestampFile(channels, schedule.duration_ps, seed, chash, {"run": "polarization"})
        info = {"n_h": n_h, "n_v": n_v, "predicted_pol_ratio": dev.predicted_pol_ratio}
        return Products({"polarization": tf}, {"polarizer": (["angle_deg", "counts"], [angles, counts])}, info)

    def analyze(self, cfg, products, hists, out):
        angles, counts = (np.asarray(c, dtype=float) for c in products.tables["polarizer"][1])
        if counts.sum() == 0:
            raise InsufficientData("no counts in the polariser sweep")
        ratio, axis = metrics.polarization_ratio(angles, counts)
        out.metrics["pol_ratio"] = ratio
        out.metrics["axis_deg"] = axis
        out.metrics["predicted_pol_ratio"] = float(products.info["predicted_pol_ratio"])
        out.metrics["n_h"] = float(products.info["n_h"])
        out.metrics["n_v"] = float(products.info["n_v"])
        phi = np.deg2rad(angles - axis)
        i_max = counts.mean() * (1 + ratio)
        i_min = counts.mean() * (1 - ratio)
        model = i_min + (i_max - i_min) * np.cos(phi) ** 2
        out.plots["polarizer"] = (["angle_deg", "counts", "model"], [angles, counts, model])


class Lifetime(Experiment):
    """TCSPC decay of the cavity-coupled dot and of a reference dot in bulk."""

    def simulate(self, cfg, seed, chash):
        dev = build_device(cfg)
        schedule = build_schedule(cfg)
        det, _ = detectors(cfg)
        throughput = cfg.get("bench", {}).get("throughput", 1.0)
        cav_stream = em.simulate_stream(dev.emitter, schedule, dev.branching, seed)
        cav = bench.collect(cav_stream, dev.cavity, throughput, seed)
        slab_emitter = replace(dev.emitter, tau_cav=dev.dipole.tau_slab)
        slab_duration = cfg.get("bench", {}).get("slab_duration")
        slab_schedule = schedule if slab_duration is None else replace(schedule, duration=slab_duration)
        s2 = subseed(seed, 1)
        slab_stream = em.simulate_stream(slab_emitter, slab_schedule, (1.0, 0.0, 0.0), s2)
        slab = bench.collect(slab_stream, dev.cavity, throughput, s2)
        a = bench.apply_detector(cav, det, seed, channel="cavity")
        b = bench.apply_detector(slab, det, s2, channel="slab")
        tf_c = TimestampFile({"cavity": a.times}, schedule.duration_ps, seed, chash, {"run": "cavity"})
        tf_s = TimestampFile({"slab": b.times}, slab_schedule.duration_ps, s2, chash, {"run": "slab"})
        return Products({"cavity": tf_c, "slab": tf_s}, info={"rep_period_ps": schedule.period_ps})

    def correlate(self, cfg, products):
        c = cfg.get("correlator", {})
        period = products.info["rep_period_ps"]
        bw = int(c.get("bin_width", 32))
        offset = -float(c.get("microtime_lead", 1000))
        hists = {}
        for name in ("cavity", "slab"):
            clicks = products.timestamps[name].channels[name]
            hists[name] = corr.microtime_histogram(clicks, period, bw, offset)
        return hists

    def analyze(self, cfg, products, hists, out):
        a = cfg.get("analysis", {})
        irf = float(a.get("irf_sigma", cfg.get("bench", {}).get("detector", {}).get("jitter_sigma", 0.0)))
        period = products.info["rep_period_ps"]
        taus = {}
        for name in ("cavity", "slab"):
            out.metrics[f"counts_{name}"] = float(hists[name].counts.sum())
        for name in ("cavity", "slab"):
            h = hists[name]
            if h.counts.sum() < 1000:
                raise InsufficientData(f"fewer than 1000 counts in the {name} decay")
            fit = _fit_record(out, name, fitting.fit_decay_irf, h, irf, rep_period=period)
            taus[name] = (fit["tau"], fit.error("tau"))
            model = fitting.models.decay_irf(h.centers / 1000.0, fit.values, irf / 1000.0, period / 1000.0)[0]
            out.plots[f"decay_{name}"] = (["t_ps", "counts", "model"], [h.centers, h.counts, model])
        f, sf = metrics.purcell(taus["slab"][0], taus["cavity"][0], taus["slab"][1], taus["cavity"][1])
        out.metrics.update(
            tau_cav=taus["cavity"][0],
            tau_cav_sigma=taus["cavity"][1],
            tau_slab=taus["slab"][0],
            tau_slab_sigma=taus["slab"][1],
            purcell=f,
            purcell_sigma=sf,
        )


def _pulsed_histogram(cfg, tf: TimestampFile, period: float):
    c = cfg.get("correlator", {})
    bw = int(c.get("bin_width", 64))
    sides = c.get("side_peaks", [3, 10])
    span = (max(sides) + 0.5) * period
    lo, hi = corr.symmetric_range(span, bw)
    return corr.correlate(tf.channels["A"], tf.channels["B"], bw, lo, hi)


def _side_peak_set(cfg):
    lo, hi = cfg.get("correlator", {}).get("side_peaks", [3, 10])
    return [s * k for k in range(lo, hi + 1) for s in (-1, 1)]


def _shoulder_z(hist, period):
    """Significance of the refill shoulders over the inter-peak floor."""
    c = hist.centers
    y = hist.counts.astype(float)
    shoulder = (np.abs(c) >= 300) & (np.abs(c) <= 2000)
    frac = (np.abs(c) / period) % 1.0
    floor = (np.abs(c) > 2.5 * period) & (np.abs(frac - 0.5) <= 0.125)
    s, b = y[shoulder].mean(), y[floor].mean()
    sig = math.sqrt(s / shoulder.sum() + b / floor.sum())
    return (s - b) / sig if sig > 0 else 0.0, s, b


def _g2_metrics(cfg, hist, period, prefix=""):
    c = cfg.get("correlator", {})
    half = c.get("half_window")
    areas = corr.peak_areas(hist, period, half, _side_peak_set(cfg))
    g2 = corr.g2_zero_raw(areas)
    sig = corr.g2_zero_sigma(areas)
    rho = cfg.get("analysis", {}).get("rho", cfg.get("bench", {}).get("signal_fraction", 1.0)) or 1.0
    g2c = metrics.correct_g2_background(g2, rho)
    return {
        prefix + "g2_raw": g2,
        prefix + "g2_raw_sigma": sig,
        prefix + "g2_corrected": g2c,
        prefix + "g2_corrected_sigma": sig / (rho * rho),
    }, areas


class PulsedG2(Experiment):
    def simulate(self, cfg, seed, chash):
        dev = build_device(cfg)
        schedule = build_schedule(cfg)
        tf, info = _hbt_run(cfg, dev, schedule, seed, chash)
        info["rep_period_ps"] = schedule.period_ps
        return Products({"hbt": tf}, info=info)

    def correlate(self, cfg, products):
        return {"g2": _pulsed_histogram(cfg, products.timestamps["hbt"], products.info["rep_period_ps"])}

    def analyze(self, cfg, products, hists, out):
        tf = products.timestamps["hbt"]
        _require_counts(tf.channels["A"], tf.channels["B"], minimum=10)
        period = products.info["rep_period_ps"]
        h = hists["g2"]
        m, areas = _g2_metrics(cfg, h, period)
        out.metrics.update(m)
        z, s, b = _shoulder_z(h, period)
        out.metrics.update(shoulder_z=z, shoulder_level=s, interpeak_level=b)
        out.metrics["mean_side_area"] = float(np.mean([areas[k] for k in areas.side_indices]))
        out.metrics["zero_area"] = float(areas[0])
        # shape of one side peak
        k = min(abs(i) for i in _side_peak_set(cfg))
        sel = np.abs(h.centers - k * period) <= period / 2
        fit = _fit_record(out, "side_peak", fitting.fit_two_sided_exp, (h.centers[sel] - k * period, h.counts[sel]))
        out.metrics["side_peak_tau_ns"] = 0.5 * (fit["tau_left"] + fit["tau_right"])
        out.plots["g2"] = (["tau_ps", "counts"], [h.centers, h.counts])


class PulsedPowerSweep(Experiment):
    def simulate(self, cfg, seed, chash):
        return _hbt_sweep(cfg, seed, chash)

    def correlate(self, cfg, products):
        period = products.info["rep_period_ps"]
        return {name: _pulsed_histogram(cfg, tf, period) for name, tf in products.timestamps.items()}

    def analyze(self, cfg, products, hists, out):
        period = products.info["rep_period_ps"]
        powers = products.info["powers"]
        g2c = []
        for i, p in enumerate(powers):
            tf = products.timestamps[f"p{i}"]
            _require_counts(tf.channels["A"], tf.channels["B"], minimum=10)
            m, _ = _g2_metrics(cfg, hists[f"p{i}"], period, prefix=f"p{i}_")
            out.metrics.update(m)
            g2c.append(m[f"p{i}_g2_corrected"])
        _sweep_summary(out, powers, g2c)


def _sweep_summary(out: Analysis, powers, g2):
    order = np.argsort(powers)
    p = np.asarray(powers, dtype=float)[order]
    g = np.asarray(g2, dtype=float)[order]
    out.series["powers_uW"] = p.tolist()
    out.series["g2"] = g.tolist()
    out.metrics["g2_lowest_power"] = float(g[0])
    out.metrics["g2_highest_power"] = float(g[-1])
    out.metrics["g2_min"] = float(g.min())
    out.metrics["power_at_g2_min"] = float(p[np.argmin(g)])
    out.metrics["purity_improves_at_low_power"] = float(g[0] < g[-1])
    out.plots["g2_vs_power"] = (["power_uW", "g2"], [p, g])


def _cw_histogram(cfg, tf: TimestampFile):
    c = cfg.get("correlator", {})
    bw = int(c.get("bin_width", 16))
    n = int(c.get("n_bins_half", math.ceil(c.get("tau_span", 5000) / bw)))
    lo, hi = corr.centered_range(n, bw)
    return corr.correlate(tf.channels["A"], tf.channels["B"], bw, lo, hi)


def _cw_fit(cfg, out: Analysis, h, name, prefix=""):
    span = float(cfg.get("analysis", {}).get("fit_span", 5000))
    sel = np.abs(h.centers) <= span
    fit = _fit_record(out, name, fitting.fit_two_sided_exp, (h.centers[sel], h.counts[sel]), sign=-1.0)
    out.metrics[prefix + "g2_fit"] = fit.derived["g2_zero"]
    out.metrics[prefix + "g2_fit_sigma"] = fit.derived["g2_zero_sigma"]
    out.metrics[prefix + "dip_tau_ns"] = 0.5 * (fit["tau_left"] + fit["tau_right"])
    return fit


class CwG2(Experiment):
    def simulate(self, cfg, seed, chash):
        dev = build_device(cfg)
        schedule = build_schedule(cfg)
        tf, info = _hbt_run(cfg, dev, schedule, seed, chash)
        return Products({"hbt": tf}, info=info)

    def correlate(self, cfg, products):
        return {"g2": _cw_histogram(cfg, products.timestamps["hbt"])}

    def analyze(self, cfg, products, hists, out):
        tf = products.timestamps["hbt"]
        _require_counts(tf.channels["A"], tf.channels["B"], minimum=10)
        h = hists["g2"]
        fit = _cw_fit(cfg, out, h, "dip")
        model = fitting.models.two_sided_exp(h.centers / 1000.0, fit.values, -1.0)[0]
        out.plots["g2"] = (["tau_ps", "counts", "model"], [h.centers, h.counts, model])


class CwPowerSweep(Experiment):
    def simulate(self, cfg, seed, chash):
        return _hbt_sweep(cfg, seed, chash)

    def correlate(self, cfg, products):
        return {name: _cw_histogram(cfg, tf) for name, tf in products.timestamps.items()}

    def analyze(self, cfg, products, hists, out):
        powers = products.info["powers"]
        g2 = []
        for i, _ in enumerate(powers):
            tf = products.timestamps[f"p{i}"]
            _require_counts(tf.channels["A"], tf.channels["B"], minimum=10)
            _cw_fit(cfg, out, hists[f"p{i}"], f"dip_p{i}", prefix=f"p{i}_")
            g2.append(out.metrics[f"p{i}_g2_fit"])
        _sweep_summary(out, powers, g2)


class Blinking(Experiment):
    def simulate(self, cfg, seed, chash):
        dev = build_device(cfg)
        schedule = build_schedule(cfg)
        tf, info = _hbt_run(cfg, dev, schedule, seed, chash)
        info["rep_period_ps"] = schedule.period_ps
        info["blinking"] = dev.emitter.blinking
        return Products({"hbt": tf}, info=info)

    def correlate(self, cfg, products):
        c = cfg.get("correlator", {})
        bw = int(c.get("bin_width", 250000))
        n = int(c.get("n_bins_half", math.ceil(c.get("tau_span", 500e6) / bw)))
        lo, hi = corr.centered_range(n, bw)
        tf = products.timestamps["hbt"]
        return {"envelope": corr.correlate(tf.channels["A"], tf.channels["B"], bw, lo, hi)}

    def analyze(self, cfg, products, hists, out):
        tf = products.timestamps["hbt"]
        _require_counts(tf.channels["A"], tf.channels["B"], minimum=10)
        tail = cfg.get("analysis", {}).get("tail_fraction", 0.25)
        env = corr.blinking_envelope(hists["envelope"], products.info["rep_period_ps"], tf.duration_ps, tail)
        out.metrics.update(
            flatness=env.flatness,
            flatness_sigma=env.flatness_sigma,
            flatness_z=env.flatness / env.flatness_sigma,
            n_points=float(len(env.tau)),
        )
        columns = [env.tau, env.envelope, env.sigma]
        if products.info.get("blinking"):
            fit = _fit_record(out, "telegraph", fitting.fit_telegraph_envelope, env.tau, env.envelope, env.sigma)
            out.metrics["decay_ms"] = fit["decay"] * 1e-6
            out.metrics["decay_ms_sigma"] = fit.error("decay") * 1e-6
            out.metrics["zero_delay_envelope"] = 1.0 + fit["amplitude"]
            columns.append(fitting.models.telegraph_envelope(env.tau / 1000.0, fit.values)[0] / fit["baseline"])
        header = ["tau_ps", "envelope", "sigma", "model"][: len(columns)]
        out.plots["envelope"] = (header, columns)


class Efficiency(Experiment):
    """Count rate versus power and the first-lens efficiency budget."""

    def simulate(self, cfg, seed, chash):
        dev = build_device(cfg)
        a = cfg.get("analysis", {})
        det, _ = detectors(cfg)
        setup = a.get("setup_efficiency", 0.13)
        powers = cfg["schedule"].get("powers", [cfg["schedule"].get("power", 1.0)])
        products = Products()
        rates = []
        for i, p in enumerate(powers):
            schedule = build_schedule(cfg, p)
            s = subseed(seed, i)
            stream = em.simulate_stream(dev.emitter, schedule, dev.branching, s)
            fibre = bench.collect(stream, dev.cavity, setup, s)
            clicks = bench.apply_detector(fibre, det, s, channel="fiber")
            products.timestamps[f"p{i}"] = TimestampFile({"fiber": clicks.times}, schedule.duration_ps, s, chash, {"run": f"p{i}"})
            duration_s = schedule.duration_ps * 1e-12
            rates.append(len(clicks) / det.efficiency / duration_s if duration_s > 0 else 0.0)
        products.tables["count_rate"] = (["power_uW", "fiber_rate_per_s"], [list(powers), rates])
        products.info["rep_rate_hz"] = build_schedule(cfg).rep_rate * 1e6
        return products

    def analyze(self, cfg, products, hists, out):
        a = cfg.get("analysis", {})
        setup = a.get("setup_efficiency", 0.13)
        g2 = a.get("g2_zero", 0.0)
        if "fiber_rate" in a:
            budget = metrics.efficiency_budget(
                a["fiber_rate"], setup, a.get("rep_rate_hz", 76e6), g2, a.get("detector_efficiency", 1.0)
            )
            out.metrics["first_lens_raw"] = budget.first_lens_raw
            out.metrics["first_lens_purity"] = budget.first_lens_purity
        powers, rates = (np.asarray(c, dtype=float) for c in products.tables["count_rate"][1])
        if rates.max() <= 0:
            raise InsufficientData("no photons reached the fibre")
        rep = products.info["rep_rate_hz"]
        eff = []
        for r in rates:
            try:
                eff.append(metrics.efficiency_budget(r, setup, rep, g2).first_lens_raw)
            except InconsistentInputsError:
                eff.append(float("nan"))
        eff = np.asarray(eff)
        i = int(np.argmax(rates))
        out.metrics["sim_fiber_rate_max"] = float(rates[i])
        out.metrics["sim_power_at_max"] = float(powers[i])
        out.metrics["sim_first_lens_raw_max"] = float(eff[i])
        out.metrics["sim_first_lens_purity_max"] = float(eff[i] * math.sqrt(1.0 - g2))
        out.plots["efficiency"] = (["power_uW", "fiber_rate_per_s", "first_lens_raw"], [powers, rates, eff])


class Hom(Experiment):
    """Two-photon interference in an unbalanced Mach-Zehnder interferometer."""

    def simulate(self, cfg, seed, chash):
        dev = build_device(cfg)
        schedule = build_schedule(cfg)
        photons = _collected(cfg, dev, schedule, seed)
        det_a, det_b = detectors(cfg)
        mzi_cfg = dict(cfg.get("bench", {}).get("mzi", {}))
        mzi_cfg.setdefault("path_delay", schedule.period_ps)
        products = Products(info={"rep_period_ps": schedule.period_ps, "n_collected": len(photons)})
        for mode in ("parallel", "orthogonal"):
            mzi = bench.MziParams(**{**mzi_cfg, "mode": mode})
            a, b = bench.run_hom(photons, mzi, det_a, det_b, seed, tau=dev.emitter.tau_cav, rep_period=schedule.period_ps)
            duration = schedule.duration_ps + int(round(mzi.path_delay))
            products.timestamps[mode] = TimestampFile({"A": a.times, "B": b.times}, duration, seed, chash, {"run": mode})
        return products

    def correlate(self, cfg, products):
        c = cfg.get("correlator", {})
        bw = int(c.get("bin_width", 16))
        n = int(c.get("n_bins_half", math.ceil(c.get("tau_span", 2.5 * products.info["rep_period_ps"]) / bw)))
        lo, hi = corr.centered_range(n, bw)
        return {
            mode: corr.correlate(tf.channels["A"], tf.channels["B"], bw, lo, hi) for mode, tf in products.timestamps.items()
        }

    def analyze(self, cfg, products, hists, out):
        for tf in products.timestamps.values():
            _require_counts(tf.channels["A"], tf.channels["B"], minimum=10)
        c = cfg.get("correlator", {})
        a = cfg.get("analysis", {})
        mzi = cfg.get("bench", {}).get("mzi", {})
        R = a.get("R", mzi.get("R", 0.5))
        T = a.get("T", 1.0 - R)
        widths = c.get("hom_half_widths", [50, 100, 200, 400, 800, 1600, 3200])
        par, orth = hists["parallel"], hists["orthogonal"]
        res = corr.hom_timebin_sums(par, orth, widths)
        out.metrics["v_smallest"] = float(res.visibility[0])
        out.metrics["v_smallest_sigma"] = float(res.sigma[0])
        out.metrics["v_largest"] = float(res.visibility[-1])
        out.metrics["v_corrected"] = metrics.corrected_visibility(res.visibility[0], R, T, a.get("g2_for_correction", 0.0))
        out.metrics["s_orth_smallest"] = float(res.s_orth[0])
        out.series["timebins"] = res.to_dict()
        out.plots["visibility"] = (["half_width_ps", "s_par", "s_orth", "visibility", "sigma"], [res.half_widths, res.s_par, res.s_orth, res.visibility, res.sigma])
        # dip in the parallel/orthogonal ratio near zero delay
        span = float(a.get("fit_span", 3000))
        sel = (np.abs(par.centers) <= span) & (orth.counts > 0)
        ratio = par.counts[sel] / orth.counts[sel]
        sig = ratio * np.sqrt(1.0 / np.maximum(par.counts[sel], 1) + 1.0 / orth.counts[sel])
        sig = np.maximum(sig, 1.0 / orth.counts[sel])
        jitter = cfg.get("bench", {}).get("detector", {}).get("jitter_sigma", 0.0)
        irf = a.get("irf_sigma", math.sqrt(2.0) * jitter)
        fit = _fit_record(out, "dip", fitting.fit_hom_dip, (par.centers[sel], ratio), sigma_irf=irf if irf > 0 else None, sigma=sig)
        out.metrics["dip_depth"] = fit.derived["depth"]
        out.metrics["dip_depth_sigma"] = fit.derived["depth_sigma"]
        out.metrics["dip_width_ns"] = fit.derived["width"]
        out.plots["hom"] = (["tau_ps", "parallel", "orthogonal"], [par.centers, par.counts, orth.counts])


EXPERIMENT_TYPES = {
    "spectrum": Spectrum,
    "polarization": Polarization,
    "lifetime": Lifetime,
    "pulsed_g2": PulsedG2,
    "pulsed_power_sweep": PulsedPowerSweep,
    "cw_g2": CwG2,
    "cw_power_sweep": CwPowerSweep,
    "blinking": Blinking,
    "efficiency": Efficiency,
    "hom": Hom,
}


# ---------------------------------------------------------------- persistence


def _write_table(path, header, columns):
    write_columns_csv(path, header, [np.asarray(c).tolist() for c in columns])


def _read_table(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header, body = rows[0], rows[1:]
    cols = [np.array([float(r[i]) for r in body]) for i in range(len(header))]
    return header, cols


def save_products(out: Path, products: Products, csv_mirror=False, write_ts=True):
    files = {"timestamps": {}, "tables": {}}
    for name, tf in products.timestamps.items():
        if write_ts:
            p = write_timestamps(out / f"timestamps_{name}.bin", tf, csv_mirror)
            files["timestamps"][name] = p.name
    for name, (header, cols) in products.tables.items():
        fn = f"bench_{name}.csv"
        _write_table(out / fn, header, cols)
        files["tables"][name] = fn
    write_json(out / "bench.json", {"info": _jsonable(products.info), "files": files})


def load_products(out: Path, chash: str | None = None) -> Products:
    meta = json.loads((out / "bench.json").read_text())
    products = Products(info=meta["info"])
    for name, fn in meta["files"]["timestamps"].items():
        tf = read_timestamps(out / fn)
        if chash is not None and tf.config_hash != chash:
            raise InconsistentInputsError(f"{fn} was produced by a different configuration")
        products.timestamps[name] = tf
    for name, fn in meta["files"]["tables"].items():
        products.tables[name] = _read_table(out / fn)
    return products


def save_histograms(out: Path, hists: dict):
    for name, h in hists.items():
        write_histogram_csv(out / f"hist_{name}.csv", h)
        write_json(out / f"hist_{name}.json", histogram_to_dict(h))


def load_histograms(out: Path) -> dict:
    hists = {}
    for p in sorted(out.glob("hist_*.json")):
        hists[p.stem[len("hist_") :]] = histogram_from_dict(json.loads(p.read_text()))
    return hists


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


# ---------------------------------------------------------------- driver


@dataclass
class RunResult:
    report: dict
    exit_code: int
    products: Products | None = None
    histograms: dict | None = None


def _base_report(cfg, chash):
    return {
        "report_version": REPORT_VERSION,
        "package_version": __version__,
        "experiment": cfg["experiment"],
        "preset": cfg.get("preset"),
        "seed": cfg["seed"],
        "config_hash": chash,
        "status": "ok",
        "metrics": {},
        "fits": {},
        "series": {},
        "flags": [],
    }


def _finish(report, analysis: Analysis | None, out: Path | None):
    if analysis is not None:
        report["metrics"] = _jsonable(analysis.metrics)
        report["fits"] = _jsonable(analysis.fits)
        report["series"] = _jsonable(analysis.series)
        report["flags"] = list(analysis.flags) + report["flags"]
        if out is not None:
            for name, (header, cols) in analysis.plots.items():
                _write_table(out / f"plot_{name}.csv", header, cols)
    if out is not None:
        write_json(out / "report.json", report)
    return report


def write_run_info(out: Path, cfg: dict, chash: str):
    write_json(
        out / "run_info.json",
        {
            "generated_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
            "package_version": __version__,
            "python": platform.python_version(),
            "threads": em._threads(),
            "config_hash": chash,
        },
    )
    write_json(out / "config.json", cfg)


def _analysis_stage(exp, cfg, products, hists, report, out):
    analysis = Analysis()
    try:
        exp.analyze(cfg, products, hists, analysis)
    except InsufficientData as exc:
        report["status"] = "insufficient_data"
        report["flags"].append(f"insufficient_data: {exc}")
    except DegenerateDataError as exc:
        report["status"] = "insufficient_data"
        report["flags"].append(f"degenerate_data: {exc}")
    except ConvergenceError as exc:
        report["status"] = "convergence_failure"
        report["flags"].append(f"convergence_failure: {exc}")
    code = EXIT_OK if report["status"] == "ok" else EXIT_ANALYSIS
    return _finish(report, analysis, out), code


def _empty(products: Products) -> bool:
    n = sum(len(t) for tf in products.timestamps.values() for t in tf.channels.values())
    return n == 0 and not products.tables


def run_pipeline(cfg: dict, out=None) -> RunResult:
    """Simulate, correlate and analyse one resolved configuration.

    Writes all artefacts when ``out`` is given. The report carries an exit
    code: 0 on success, 3 when data are insufficient or a fit fails.
    """
    chash = compute_hash(cfg)
    exp = EXPERIMENT_TYPES[cfg["experiment"]]()
    out = None if out is None else Path(out)
    o = cfg.get("output", {})
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        write_run_info(out, cfg, chash)
    products = exp.simulate(cfg, cfg["seed"], chash)
    if out is not None:
        save_products(out, products, o.get("csv_mirror", False), o.get("write_timestamps", True))
    report = _base_report(cfg, chash)
    if _empty(products):
        report["status"] = "insufficient_data"
        report["flags"].append("insufficient_data: the run produced no events")
        return RunResult(_finish(report, None, out), EXIT_ANALYSIS, products, {})
    hists = exp.correlate(cfg, products)
    if out is not None:
        save_histograms(out, hists)
    report, code = _analysis_stage(exp, cfg, products, hists, report, out)
    return RunResult(report, code, products, hists)


def simulate_stage(cfg: dict, out) -> Products:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    chash = compute_hash(cfg)
    write_run_info(out, cfg, chash)
    products = EXPERIMENT_TYPES[cfg["experiment"]]().simulate(cfg, cfg["seed"], chash)
    o = cfg.get("output", {})
    save_products(out, products, o.get("csv_mirror", False), True)
    return products


def correlate_stage(cfg: dict, out) -> dict:
    out = Path(out)
    products = load_products(out, compute_hash(cfg))
    hists = EXPERIMENT_TYPES[cfg["experiment"]]().correlate(cfg, products)
    save_histograms(out, hists)
    return hists


def analyze_stage(cfg: dict, out) -> RunResult:
    out = Path(out)
    chash = compute_hash(cfg)
    products = load_products(out, chash)
    hists = load_histograms(out)
    report = _base_report(cfg, chash)
    if _empty(products):
        report["status"] = "insufficient_data"
        report["flags"].append("insufficient_data: the run produced no events")
        return RunResult(_finish(report, None, out), EXIT_ANALYSIS)
    report, code = _analysis_stage(EXPERIMENT_TYPES[cfg["experiment"]](), cfg, products, hists, report, out)
    return RunResult(report, code)


# ---------------------------------------------------------------- verification


def verify_report(report: dict, expectations: dict, config_hash: str | None = None) -> dict:
    """Compare report metrics with their expectations.

    Each expectation is ``{"target": x, "tol": t}`` (pass when
    ``|value - x| <= t``) or a one-sided bound ``{"min": a}`` / ``{"max": b}``.
    A missing metric fails. When ``config_hash`` is given (or the
    expectations carry one) it must match the report's hash. Returns a
    summary with an overall ``passed`` flag and one entry per check.
    """
    expected_hash = config_hash or expectations.get("config_hash")
    checks = []
    if expected_hash is not None and report.get("config_hash") != expected_hash:
        checks.append({"metric": "config_hash", "passed": False, "reason": "config hash mismatch"})
    found = report.get("metrics", {})
    for name, spec in expectations.get("metrics", {}).items():
        entry = {"metric": name, **{k: float(v) for k, v in spec.items()}}
        if name not in found or found[name] is None:
            checks.append({**entry, "passed": False, "reason": "missing"})
            continue
        value = float(found[name])
        ok = True
        if "target" in spec:
            ok &= abs(value - float(spec["target"])) <= float(spec.get("tol", 0.0))
        if "min" in spec:
            ok &= value >= float(spec["min"])
        if "max" in spec:
            ok &= value <= float(spec["max"])
        checks.append({**entry, "value": value, "passed": bool(ok)})
    if report.get("status") not in (None, "ok"):
        checks.append({"metric": "status", "passed": False, "reason": report["status"]})
    return {"passed": all(c["passed"] for c in checks), "checks": checks}
