import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ebgqd import correlator as corr
from ebgqd.errors import DegenerateDataError, ParameterError, PreconditionError
from ebgqd.io import histogram_from_dict, histogram_to_dict, read_histogram_json, write_histogram_csv, write_histogram_json


def brute(a, b, bw, lo, hi):
    n = (hi - lo) // bw
    d = (b[None, :] - a[:, None]).ravel()
    # closed toward zero: floor above zero, ceil below
    idx = np.where(d >= 0, np.floor((d - lo) / bw), np.ceil((d - lo) / bw) - 1).astype(np.int64)
    idx = idx[(idx >= 0) & (idx < n)]
    return np.bincount(idx, minlength=n)


def random_stream(n, span, seed):
    return np.sort(np.random.default_rng(seed).integers(0, span, n))


def test_matches_brute_force():
    a, b = random_stream(400, 200_000, 1), random_stream(500, 200_000, 2)
    h = corr.correlate(a, b, 64, -6400, 6400)
    assert np.array_equal(h.counts, brute(a, b, 64, -6400, 6400))
    assert h.total_pairs == h.counts.sum()


def test_identical_channels_give_symmetric_histogram():
    a = random_stream(3000, 10**5, 3)
    h = corr.correlate(a, a, 16, *corr.centered_range(100, 16))
    assert np.array_equal(h.counts, h.counts[::-1])
    # with an edge at zero delay the range must exclude zero
    h = corr.correlate(a, a, 16, 16, 1600)
    m = corr.correlate(a, a, 16, -1600, -16)
    assert np.array_equal(h.counts, m.counts[::-1])


def test_swap_reverses_histogram():
    # integer times land on bin edges often; the mirror must still be exact
    a, b = random_stream(2000, 10**5, 3), random_stream(2000, 10**5, 4)
    lo, hi = corr.centered_range(100, 16)
    ab = corr.correlate(a, b, 16, lo, hi)
    ba = corr.correlate(b, a, 16, lo, hi)
    assert np.array_equal(ab.counts, ba.counts[::-1])
    assert np.array_equal(ab.counts, brute(a, b, 16, lo, hi))


@settings(max_examples=40, deadline=None)
@given(
    a=st.lists(st.integers(0, 5000), max_size=60),
    b=st.lists(st.integers(0, 5000), max_size=60),
    bw=st.sampled_from([2, 10, 64]),
    n=st.integers(1, 30),
)
def test_symmetry_and_conservation(a, b, bw, n):
    a, b = np.sort(np.array(a, np.int64)), np.sort(np.array(b, np.int64))
    lo, hi = corr.centered_range(n, bw)
    ab = corr.correlate(a, b, bw, lo, hi)
    ba = corr.correlate(b, a, bw, lo, hi)
    assert np.array_equal(ab.counts, ba.counts[::-1])
    assert np.array_equal(ab.counts, brute(a, b, bw, lo, hi) if len(a) and len(b) else np.zeros_like(ab.counts))
    assert ab.total_pairs == ab.counts.sum()


def test_one_sided_ranges_follow_the_edge_rule():
    a = np.array([0])
    b = np.array([-20, -10, 0, 10, 20])
    assert corr.correlate(a, b, 10, 0, 20).counts.tolist() == [1, 1]
    assert corr.correlate(a, b, 10, -20, 0).counts.tolist() == [1, 0]
    assert corr.correlate(a, b, 10, -30, -10).counts.tolist() == [1, 1]


def test_threads_are_bit_identical():
    a, b = random_stream(50_000, 10**8, 5), random_stream(50_000, 10**8, 6)
    one = corr.correlate(a, b, 64, -20_000, 20_000, threads=1)
    four = corr.correlate(a, b, 64, -20_000, 20_000, threads=4)
    assert np.array_equal(one.counts, four.counts)


def test_segment_merge_is_exact_with_wide_gap():
    a1, b1 = random_stream(500, 10**6, 7), random_stream(500, 10**6, 8)
    a2, b2 = random_stream(500, 10**6, 9) + 3 * 10**6, random_stream(500, 10**6, 10) + 3 * 10**6
    lo, hi = -50_000, 50_000
    whole = corr.correlate(np.concatenate([a1, a2]), np.concatenate([b1, b2]), 100, lo, hi)
    parts = corr.correlate(a1, b1, 100, lo, hi).counts + corr.correlate(a2, b2, 100, lo, hi).counts
    assert np.array_equal(whole.counts, parts)


def test_unsorted_input_rejected():
    with pytest.raises(PreconditionError):
        corr.correlate(np.array([3, 1]), np.array([1, 2]), 10, -100, 100)


def test_bad_range_rejected():
    with pytest.raises(ParameterError):
        corr.correlate(np.array([1]), np.array([1]), 10, -100, 95)
    with pytest.raises(ParameterError):
        corr.centered_range(10, 15)


def pulsed_poisson(n_pulses, period, mean, seed, jitter=50.0):
    rng = np.random.default_rng(seed)
    k = np.repeat(np.arange(n_pulses), rng.poisson(mean, n_pulses))
    t = k * period + rng.normal(1000.0, jitter, len(k))
    return np.sort(np.rint(t).astype(np.int64))


def test_poisson_source_has_unit_g2():
    period = 13_158
    a = pulsed_poisson(400_000, period, 0.05, 1)
    b = pulsed_poisson(400_000, period, 0.05, 2)
    lo, hi = corr.symmetric_range(10.5 * period, 64)
    h = corr.correlate(a, b, 64, lo, hi)
    areas = corr.peak_areas(h, period)
    g2 = corr.g2_zero_raw(areas)
    assert g2 == pytest.approx(1.0, abs=4 * corr.g2_zero_sigma(areas))
    assert sorted(areas.side_indices) == sorted([s * k for k in range(3, 11) for s in (-1, 1)])


def test_peak_area_errors():
    h = corr.CorrelationHistogram(64, -64 * 50, 64 * 50, np.ones(100, np.int64))
    with pytest.raises(ParameterError):
        corr.peak_areas(h, 1000.0, half_window=600.0)
    with pytest.raises(ParameterError):
        corr.peak_areas(h, 1000.0)  # peak 10 lies outside
    empty = corr.peak_areas(h, 300.0, side_peak_indices=[3, -3])
    empty.areas[3] = empty.areas[-3] = 0
    with pytest.raises(DegenerateDataError):
        corr.g2_zero_raw(empty)


def test_blinking_envelope_flat_for_poisson_and_needs_peaks():
    period = 1000
    a = pulsed_poisson(300_000, period, 0.1, 3, jitter=10)
    b = pulsed_poisson(300_000, period, 0.1, 4, jitter=10)
    lo, hi = corr.symmetric_range(40.5 * period, 50)
    h = corr.correlate(a, b, 50, lo, hi)
    env = corr.blinking_envelope(h, period, duration_ps=300_000 * period)
    assert len(env.tau) == 39
    assert np.all(np.abs(env.envelope - 1) < 5 * env.sigma)
    small = corr.correlate(a, b, 50, *corr.symmetric_range(8.5 * period, 50))
    with pytest.raises(ParameterError):
        corr.blinking_envelope(small, period)


def test_blinking_envelope_coarse_bins_merge_signs():
    h = corr.CorrelationHistogram(10, -205, 205, np.arange(41, dtype=np.int64) % 3 + 10)
    env = corr.blinking_envelope(h, 10.0, tail_fraction=0.5)
    assert len(env.tau) == 20
    assert np.all(np.diff(env.tau) > 0)


def test_hom_timebin_trivial_cases():
    lo, hi = corr.centered_range(20, 16)
    counts = np.random.default_rng(0).integers(10, 100, (hi - lo) // 16)
    h = corr.CorrelationHistogram(16, lo, hi, counts)
    res = corr.hom_timebin_sums(h, h, [16, 64, 200])
    assert np.all(res.visibility == 0)
    par = corr.CorrelationHistogram(16, lo, hi, np.where(np.abs(h.centers) <= 16, 0, counts))
    res = corr.hom_timebin_sums(par, h, [16, 64])
    assert res.visibility[0] == 1.0
    with pytest.raises(DegenerateDataError):
        corr.hom_timebin_sums(h, corr.CorrelationHistogram(16, lo, hi, np.zeros_like(counts)), [16])
    with pytest.raises(ParameterError):
        corr.hom_timebin_sums(h, corr.CorrelationHistogram(32, lo - 8, hi + 8, np.ones(21, np.int64)), [16])


def test_microtime_histogram():
    period = 1000.0
    t = np.array([0, 10, 1005, 2999, 3500])
    h = corr.microtime_histogram(t, period, 100)
    assert h.counts.sum() == 5
    assert h.counts[0] == 3 and h.counts[9] == 1 and h.counts[5] == 1


def test_histogram_serialisation_round_trip(tmp_path):
    h = corr.CorrelationHistogram(64, -640, 640, np.arange(20, dtype=np.int64), 190, {"kind": "test"})
    back = histogram_from_dict(histogram_to_dict(h))
    assert back.same_binning(h) and np.array_equal(back.counts, h.counts) and back.meta == h.meta
    write_histogram_json(tmp_path / "h.json", h)
    assert np.array_equal(read_histogram_json(tmp_path / "h.json").counts, h.counts)
    write_histogram_csv(tmp_path / "h.csv", h)
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "tau_ps,counts" and len(lines) == 21
    assert math.isclose(float(lines[1].split(",")[0]), -608.0)
