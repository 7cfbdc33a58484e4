import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from econodiag import dfa, series, synth
from econodiag.dfa import DfaConfig, DfaError, DfaResult


def oracle_fluctuation(x, sizes, order=1, both_ends=True):
    """Straightforward per-box polyfit DFA used as an independent reference."""
    x = np.asarray(x, dtype=float)
    y = np.cumsum(x - x.mean())
    N = len(y)
    out = []
    for n in sizes:
        k = np.arange(n)
        starts = [list(range(0, (N // n) * n, n))]
        if both_ends:
            starts.append(list(range(N - (N // n) * n, N - n + 1, n)))
        passes = []
        for group in starts:
            msr = []
            for a in group:
                seg = y[a:a + n]
                coef = np.polyfit(k, seg, order)
                msr.append(np.mean((seg - np.polyval(coef, k)) ** 2))
            passes.append(np.mean(msr))
        out.append(np.sqrt(np.mean(passes)))
    return np.array(out)


def test_profile_examples():
    assert dfa.build_profile([1, -1, 1, -1]).tolist() == [1, 0, 1, 0]
    assert dfa.build_profile([3, 3, 3, 3]).tolist() == [0, 0, 0, 0]
    with pytest.raises(DfaError):
        dfa.build_profile([2, 0])


def test_box_sizes_default_grid():
    sizes = DfaConfig().box_sizes(1024)
    assert sizes[0] == 4 and sizes[-1] == 256
    assert np.all(np.diff(sizes) > 0)


@pytest.mark.parametrize("order", [1, 2])
def test_fluctuation_matches_oracle(order):
    x = synth.gen_white(3000, 4).values
    cfg = DfaConfig(detrend_order=order)
    res = dfa.fluctuation_function(dfa.build_profile(x), cfg)
    ref = oracle_fluctuation(x, res.box_sizes, order)
    assert np.allclose(res.fluctuations, ref, rtol=1e-9)


def test_forward_coverage_matches_oracle():
    x = synth.gen_white(1001, 8).values
    cfg = DfaConfig(coverage="forward")
    res = dfa.fluctuation_function(dfa.build_profile(x), cfg)
    assert np.allclose(res.fluctuations, oracle_fluctuation(x, res.box_sizes, 1, both_ends=False), rtol=1e-9)


def test_linear_profile_is_removed_exactly():
    profile = 3.0 + 0.25 * np.arange(4096)
    res = dfa.fluctuation_function(profile, DfaConfig())
    rms = np.sqrt(np.mean(profile ** 2))
    assert np.all(res.fluctuations < 1e-9 * rms)


def test_white_and_brownian_calibration():
    t0 = time.perf_counter()
    a = dfa.dfa(synth.gen_white(65536, 1)).alpha
    assert time.perf_counter() - t0 < 5
    b = dfa.dfa(synth.gen_brownian(65536, 1)).alpha
    assert abs(a - 0.5) < 0.05
    assert abs(b - 1.5) < 0.10


def test_fit_exponent_examples():
    n = np.array([4, 8, 16, 32, 64])
    r = dfa.fit_exponent(DfaResult(n, 2.5 * n ** 0.75))
    assert abs(r.alpha - 0.75) < 1e-12 and r.alpha_stderr < 1e-12
    r = dfa.fit_exponent(DfaResult(n, np.full(5, 3.0)))
    assert abs(r.alpha) < 1e-12
    with pytest.raises(DfaError):
        dfa.fit_exponent(DfaResult(n, np.zeros(5)))


def test_zero_fluctuations_are_excluded_and_counted():
    n = np.array([4, 8, 16, 32, 64, 128])
    f = n ** 0.5 * 1.0
    f[0] = 0.0
    r = dfa.fit_exponent(DfaResult(n, f))
    assert r.excluded_zero == 1 and abs(r.alpha - 0.5) < 1e-12


def test_moving_dfa_white():
    s = synth.gen_white(8192, 21)
    track = dfa.moving_dfa(s, 1024, 128)
    a = track.alphas()
    assert len(a) == (8192 - 1024) // 128 + 1
    assert np.all(np.abs(a - 0.5) < 0.1)
    assert track.entries[0][0] == 1024


def test_moving_dfa_splice():
    w = synth.gen_white(8192, 2).values
    b = synth.gen_brownian(8192, 3).values
    s = series.from_values(np.concatenate([w, b - b[0]]))
    a = dfa.moving_dfa(s, 2048, 1024).alphas()
    assert abs(a[0] - 0.5) < 0.1
    assert abs(a[-1] - 1.5) < 0.15
    assert a[-1] > a[0] + 0.8


def test_moving_single_window_equals_whole():
    s = synth.gen_white(2000, 6)
    track = dfa.moving_dfa(s, 2000, 2000)
    assert len(track.entries) == 1
    whole = dfa.dfa(s)
    assert track.entries[0][1] == whole.alpha


def test_moving_errors():
    s = synth.gen_white(100, 1)
    with pytest.raises(DfaError):
        dfa.moving_dfa(s, 200, 1)
    with pytest.raises(DfaError):
        dfa.moving_dfa(s, 10, 1)
    with pytest.raises(DfaError):
        dfa.moving_dfa(s, 50, 0)


def test_moving_gap_for_flat_window():
    v = np.concatenate([np.zeros(64), synth.gen_white(200, 1).values])
    track = dfa.moving_dfa(series.from_values(v), 64, 64)
    assert track.entries[0][1] is None
    assert track.to_csv().splitlines()[1] == "64,,,"


def test_jobs_do_not_change_results():
    s = synth.gen_white(4096, 5)
    a = dfa.moving_dfa(s, 512, 64, jobs=1).to_csv()
    b = dfa.moving_dfa(s, 512, 64, jobs=4).to_csv()
    assert a == b


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2 ** 32), c=st.floats(0.01, 100), shift=st.floats(-1e3, 1e3))
def test_scale_and_shift(seed, c, shift):
    x = synth.gen_white(600, seed).values
    base = dfa.dfa(x)
    scaled = dfa.dfa(c * x)
    assert np.allclose(scaled.fluctuations, c * base.fluctuations, rtol=1e-9)
    assert abs(scaled.alpha - base.alpha) < 1e-12
    shifted = dfa.dfa(x + shift)
    assert np.allclose(shifted.fluctuations, base.fluctuations, rtol=1e-6, atol=1e-9)
    assert abs(shifted.alpha - base.alpha) < 1e-6


def test_config_validation():
    with pytest.raises(DfaError):
        DfaConfig(detrend_order=2, min_box=3)
    with pytest.raises(DfaError):
        DfaConfig(coverage="sideways")
    with pytest.raises(DfaError):
        DfaConfig().box_sizes(10)
