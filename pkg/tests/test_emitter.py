import math

import numpy as np
import pytest
from scipy import stats

from ebgqd import emitter as em
from ebgqd.errors import ParameterError


def pulsed(duration=2e-3, power=50.0, **kw):
    return em.ExcitationSchedule("pulsed", 76.0, power, duration)


def run(emitter, schedule=None, branching=(1.0, 0.0, 0.0), seed=1):
    return em.simulate_stream(emitter, schedule or pulsed(), branching, seed)


def same(a, b):
    return all(
        np.array_equal(getattr(a, f), getattr(b, f)) for f in ("time", "pulse_index", "origin", "polarization", "nu_offset")
    )


def test_schedule_quantities():
    s = em.ExcitationSchedule("pulsed", 76.0, 1.0, 1e-3)
    assert s.period_ps == pytest.approx(13157.894737)
    assert s.n_pulses == 76000
    assert s.duration_ps == 10**9
    with pytest.raises(ParameterError):
        em.ExcitationSchedule("burst")
    with pytest.raises(ParameterError):
        em.ExcitationSchedule(duration=-1)


def test_excitation_probability():
    assert em.excitation_probability(0.0, 1.0) == 0.0
    assert em.excitation_probability(1.0, 1.0) == pytest.approx(1 - math.exp(-1))
    with pytest.raises(ParameterError):
        em.excitation_probability(1.0, 0.0)
    assert em.mean_photons_per_pulse(0.5, 0.2) == pytest.approx(0.625)


def test_same_seed_same_stream_different_seed_differs():
    e = em.EmitterParams(0.775, p_refill=0.1, sigma_nu=0.3)
    a, b, c = run(e, seed=7), run(e, seed=7), run(e, seed=8)
    assert same(a, b)
    assert not np.array_equal(a.time[:100], c.time[:100])


def test_thread_count_does_not_change_stream(monkeypatch):
    e = em.EmitterParams(0.775, p_refill=0.1)
    sched = em.ExcitationSchedule("pulsed", 76.0, 50.0, 3 * em.SEGMENT_PULSES / 76e6)
    monkeypatch.setenv("EBGQD_THREADS", "1")
    a = run(e, sched)
    monkeypatch.setenv("EBGQD_THREADS", "3")
    b = run(e, sched)
    assert same(a, b)


def test_zero_duration_gives_empty_stream():
    s = run(em.EmitterParams(0.775), em.ExcitationSchedule(duration=0.0))
    assert len(s) == 0
    s = run(em.EmitterParams(0.775), em.ExcitationSchedule("cw", duration=0.0))
    assert len(s) == 0


def test_stream_is_time_ordered_and_in_range():
    s = run(em.EmitterParams(0.775, p_refill=0.2))
    assert np.all(np.diff(s.time) >= 0)
    assert s.time[0] >= 0


def test_photon_number_per_pulse_matches_geometric_chains():
    p_exc, p = 0.6, 0.1
    e = em.EmitterParams(0.775, p_refill=p, p_sat_power=1.0)
    power = -math.log(1 - p_exc)
    s = run(e, pulsed(5e-3, power))
    n_pulses = pulsed(5e-3).n_pulses
    expected = em.mean_photons_per_pulse(p_exc, p) * n_pulses
    # variance of a compound count, conservatively bounded by the mean of n^2
    sigma = math.sqrt(n_pulses * p_exc * (1 + p) / (1 - p) ** 2)
    assert abs(len(s) - expected) < 4 * sigma
    frac = np.mean(s.origin == em.REFILL)
    assert frac == pytest.approx(p, abs=4 * math.sqrt(p * (1 - p) / len(s)))


def test_depth_one_refill_fraction():
    p = 0.1
    s = run(em.EmitterParams(0.775, p_refill=p, refill_depth=1), pulsed(5e-3))
    frac = np.mean(s.origin == em.REFILL)
    assert frac == pytest.approx(p / (1 + p), abs=4 * math.sqrt(frac / len(s)))


def test_refill_follows_its_parent():
    s = run(em.EmitterParams(0.775, p_refill=0.3, refill_depth=1))
    ref = np.flatnonzero(s.origin == em.REFILL)
    for i in ref[:200]:
        k = s.pulse_index[i]
        parents = np.flatnonzero((s.pulse_index == k) & (s.origin == em.EXCITON))
        assert len(parents) == 1 and s.time[parents[0]] < s.time[i]


def test_exciton_delay_is_relaxation_plus_radiative():
    e = em.EmitterParams(0.775, tau_relax=0.2)
    s = run(e, pulsed(5e-3))
    period = pulsed().period_ps
    delay = (s.time - s.pulse_index * period) / 1000.0
    assert delay.min() >= -1e-3
    assert delay.mean() == pytest.approx(0.975, abs=4 * 0.8 / math.sqrt(len(s)))


def test_polarization_tags_follow_branching():
    branching = (0.7, 0.2, 0.1)
    s = run(em.EmitterParams(0.775), branching=branching)
    counts = np.bincount(s.polarization, minlength=3)
    chi2, p = stats.chisquare(counts, np.array(branching) * len(s))
    assert p > 1e-3


def test_spectral_diffusion_width():
    s = run(em.EmitterParams(0.775, sigma_nu=0.4))
    assert np.std(s.nu_offset) == pytest.approx(0.4, rel=0.03)
    assert np.all(run(em.EmitterParams(0.775)).nu_offset == 0)


def test_blinking_duty_cycle():
    e = em.EmitterParams(0.775, blink_on_rate=3.0, blink_off_rate=1.0)
    assert e.duty_cycle == 0.75
    sched = em.ExcitationSchedule("pulsed", 1.0, 50.0, 2.0)
    s = run(e, sched)
    bright = len(s) / sched.n_pulses
    # about 2 * 2000 ms * (1/3 + 1) switches; relative error ~ sqrt(tau_c / T)
    assert bright == pytest.approx(0.75, abs=0.05)


def test_telegraph_switch_statistics():
    e = em.EmitterParams(0.775, blink_on_rate=2.0, blink_off_rate=2.0)
    switches, on0 = em.telegraph_switches(e, 5e12, seed=3)
    dwell = np.diff(switches) / 1e9  # ms
    assert dwell.mean() == pytest.approx(0.5, rel=0.05)
    assert stats.kstest(dwell, "expon", args=(0, 0.5)).pvalue > 1e-3


def test_cw_interval_mean():
    e = em.EmitterParams(0.775, tau_relax=0.1, p_sat_power=1.0)
    sched = em.ExcitationSchedule("cw", power=1.0, duration=2e-4)
    s = run(e, sched)
    gaps = np.diff(s.time) / 1000.0
    expected = 0.775 + 0.1 + 0.775  # 1 / pump rate + relaxation + radiative
    assert gaps.mean() == pytest.approx(expected, rel=0.01)
    assert np.all(s.pulse_index == -1)


def test_cw_refill_fraction():
    e = em.EmitterParams(0.775, p_refill=0.2, p_sat_power=1.0)
    s = run(e, em.ExcitationSchedule("cw", power=1.0, duration=2e-4))
    assert np.mean(s.origin == em.REFILL) == pytest.approx(0.2, abs=0.01)


def test_stream_container_behaviour():
    s = run(em.EmitterParams(0.775, p_refill=0.1), pulsed(1e-5))
    ev = s[0]
    assert ev.origin in em.ORIGINS and ev.polarization in em.POLARIZATIONS
    assert len(list(iter(s))) == len(s)
    sub = s.select(s.origin == em.EXCITON)
    assert len(sub) <= len(s) and sub.duration_ps == s.duration_ps
    merged = em.EmissionStream.concatenate([sub, s.select(s.origin == em.REFILL)], s.duration_ps)
    assert np.array_equal(np.sort(merged.time), np.sort(s.time))


@pytest.mark.parametrize(
    "kw",
    [dict(tau_cav=0.0), dict(tau_cav=1.0, p_refill=1.0), dict(tau_cav=1.0, sigma_nu=-1), dict(tau_cav=1.0, refill_depth=-1)],
)
def test_invalid_emitter(kw):
    with pytest.raises(ParameterError):
        em.EmitterParams(**kw)


def test_invalid_branching():
    with pytest.raises(ParameterError):
        run(em.EmitterParams(0.775), branching=(0.5, 0.6, 0.0))
