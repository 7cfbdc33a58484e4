import json
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from econodiag import lppl, series, synth
from econodiag.lppl import FitConfig, FitError, FitReport, LpplParams

TRUE = LpplParams("log", 7.0, -0.5, 0.1, 8.0, 1.0, 520.0)
COARSE = FitConfig(tc_count=40, w_count=30, m_count=7)


@pytest.fixture(scope="module")
def clean():
    return synth.gen_lppl(TRUE, 500)


def shifted(s, delta):
    return series.TimeSeries(s.label, s.times + delta, s.values, s.kind)


def report(t_c, se, converged=True, at_bound=False, c_sig=True):
    p = LpplParams("log", 0.0, -1.0, 0.1, 8.0, 0.0, t_c)
    return FitReport(p, 1.0, 0.1, {}, converged, 100, se, window=(1, 100), c_significant=c_sig,
                     at_bound=at_bound)


# ---------------------------------------------------------------- model


def test_eval_examples():
    t_c = 100.0
    t = t_c - t_c * math.exp(-1)
    p = LpplParams("log", 10.0, -2.0, 0.0, None, None, t_c)
    assert eval_close(lppl.eval_model(p, t), 12.0)
    q = LpplParams("power", 0.0, 1.0, 0.0, None, None, 100.0, m=0.5)
    assert eval_close(lppl.eval_model(q, 75.0), 2.0)
    with pytest.raises(FitError):
        lppl.eval_model(p, t_c)


def eval_close(a, b):
    return abs(float(a) - b) < 1e-12


def test_eval_positive_exponent_and_linear_form():
    q = LpplParams("power", 1.0, 2.0, 0.0, None, None, 100.0, m=0.5, exponent_sign=1)
    assert eval_close(lppl.eval_model(q, 75.0), 1.0 + 2.0 * 0.5)
    lin = LpplParams("log", 0.0, 1.0, 0.5, 1.0, 0.2, 100.0, linear_lpo=True)
    lnx = math.log(0.25)
    assert eval_close(lppl.eval_model(lin, 75.0), lnx * (1 + 0.5 * (lnx + 0.2)))


def test_params_validation():
    with pytest.raises(FitError):
        LpplParams("power", 0, 1, 0, None, None, 10, m=1.5).validate()
    with pytest.raises(FitError):
        LpplParams("log", 0, 1, 0, None, None, 10, m=0.5).validate()
    with pytest.raises(FitError):
        LpplParams("log", 0, 1, 1.2, 8.0, 0.0, 10).validate()
    with pytest.raises(FitError):
        LpplParams("log", 0, 1, 0.1, 50.0, 0.0, 10).validate(w_band=(2, 40))
    with pytest.raises(FitError):
        FitConfig(w_band=(5, 2))
    with pytest.raises(FitError):
        FitConfig(tc_count=0)


# ---------------------------------------------------------------- linear sub-fit


def test_linear_subfit_recovers_truth(clean):
    sub = lppl.linear_subfit(clean, TRUE.t_c, None, TRUE.w)
    assert abs(sub.A - TRUE.A) < 1e-8 * abs(TRUE.A)
    assert abs(sub.B - TRUE.B) < 1e-8 * abs(TRUE.B)
    assert abs(sub.C - TRUE.C) < 1e-6 and abs(sub.phi - TRUE.phi) < 1e-6
    assert sub.rss < 1e-18


def test_linear_subfit_power_variant():
    p = LpplParams("power", 3.0, 0.2, 0.05, 6.0, 4.0, 320.0, m=0.4)
    s = synth.gen_lppl(p, 300)
    sub = lppl.linear_subfit(s, p.t_c, p.m, p.w, "power")
    assert abs(sub.A - 3.0) < 1e-8 and abs(sub.B - 0.2) < 1e-9
    assert abs(sub.C - 0.05) < 1e-6 and abs(sub.phi - 4.0) < 1e-6


def test_linear_subfit_null_oscillation():
    s = synth.gen_lppl(replace(TRUE, C=0.0), 300)
    sub = lppl.linear_subfit(s, 520.0, None, 8.0)
    assert abs(sub.D) < 1e-10 and abs(sub.E) < 1e-10


def test_linear_subfit_errors(clean):
    with pytest.raises(FitError):
        lppl.linear_subfit(series.head(clean, 2), 520.0, None, 8.0)
    with pytest.raises(FitError):
        lppl.linear_subfit(clean, 400.0, None, 8.0)


# ---------------------------------------------------------------- full fit


def test_fit_full_noiseless(clean):
    r = lppl.fit_full(clean, "log")
    assert r.converged
    assert abs(r.t_c - 520) <= 2
    assert abs(r.params.w - 8) < 0.05 * 8
    assert abs(r.params.C - 0.1) < 1e-4
    assert r.rss >= 0 and all(v >= 0 for v in r.stderr.values())


def test_fit_full_power_variant():
    p = LpplParams("power", 1.0, 0.4, 0.08, 7.0, 2.0, 330.0, m=0.5)
    s = synth.gen_lppl(p, 300)
    r = lppl.fit_full(s, "power", COARSE)
    assert abs(r.t_c - 330) < 2 and abs(r.params.m - 0.5) < 0.05 and abs(r.params.w - 7) < 0.35


def test_fit_full_linear_trend_not_critical():
    s = series.from_values(1.0 + 0.01 * np.arange(200))
    r = lppl.fit_full(s, "log", COARSE)
    assert r.converged and r.c_significant is False


def test_fit_floor():
    s = series.from_values(np.linspace(1, 2, 10))
    with pytest.raises(FitError):
        lppl.fit_full(s, "power")


def test_linear_lpo_form_fits_its_own_data():
    p = LpplParams("log", 2.0, -0.3, 0.2, 1.0, 0.5, 230.0, linear_lpo=True)
    s = synth.gen_lppl(p, 200)
    r = lppl.fit_full(s, "log", replace(COARSE, linear_lpo=True))
    assert abs(r.t_c - 230) < 0.5
    assert r.params.linear_lpo and r.params.w == 1.0


def test_jacobian_uncertainty(clean):
    noisy = synth.gen_lppl(TRUE, 500, 0.01, seed=3)
    r = lppl.fit_full(noisy, "log", replace(COARSE, uncertainty="jacobian"))
    assert r.tc_stderr == r.stderr["t_c"] and 0 < r.tc_stderr < 50


def test_report_json(clean):
    r = lppl.fit_full(clean, "log", COARSE)
    d = json.loads(r.to_json())
    for key in ("params", "rss", "sigma", "stderr", "converged", "n_obs", "tc_stderr"):
        assert key in d
    assert d["params"]["t_c"] == r.t_c


# ---------------------------------------------------------------- properties


def brute_force_cell(s, tcs, ws):
    t = np.arange(1, len(s) + 1, dtype=float)
    best = None
    for tc in tcs:
        lnx = np.log((tc - t) / tc)
        for w in ws:
            X = np.column_stack([np.ones_like(t), lnx, lnx * np.cos(w * lnx), lnx * np.sin(w * lnx)])
            coef = np.linalg.lstsq(X, s.values, rcond=None)[0]
            rss = float(np.sum((s.values - X @ coef) ** 2))
            if best is None or rss < best[0] * (1 - 1e-9):
                best = (rss, tc, w)
    return best


@pytest.mark.parametrize("seed", range(5))
def test_oracle_equivalence_on_coarse_grid(seed):
    p = LpplParams("log", 3.0, -0.4, 0.15, 9.0, 2.0, 112.0)
    s = synth.gen_lppl(p, 90, noise_sigma=0.02, seed=seed)
    cfg = FitConfig(tc_count=10, w_count=10, refine=False)
    r = lppl.fit_full(s, "log", cfg)
    rss, tc, w = brute_force_cell(s, cfg.tc_grid(90), cfg.w_grid())
    assert r.grid_cell["t_c"] == tc and r.grid_cell["w"] == w
    assert abs(r.grid_cell["rss"] - rss) < 1e-9 * max(rss, 1e-12)


@settings(max_examples=12, deadline=None)
@given(a=st.floats(0.1, 50), b=st.floats(-100, 100), seed=st.integers(0, 10 ** 6))
def test_affine_equivariance(a, b, seed):
    s = synth.gen_lppl(TRUE, 120, noise_sigma=0.02, seed=seed)
    cfg = FitConfig(tc_count=15, w_count=15, refine=False)
    base = lppl.fit_full(s, "log", cfg)
    moved = lppl.fit_full(replace(s, values=a * s.values + b), "log", cfg)
    assert moved.grid_cell["t_c"] == base.grid_cell["t_c"] and moved.grid_cell["w"] == base.grid_cell["w"]
    scale = abs(a * base.params.A) + abs(b) + 1
    assert abs(moved.params.A - (a * base.params.A + b)) < 1e-7 * scale
    assert abs(moved.params.B - a * base.params.B) < 1e-7 * abs(a * base.params.B)
    assert abs(moved.params.C - base.params.C) < 1e-7
    assert abs(moved.params.phi - base.params.phi) < 1e-6 or abs(abs(moved.params.phi - base.params.phi) - 2 * math.pi) < 1e-6


@settings(max_examples=10, deadline=None)
@given(delta=st.integers(-10 ** 6, 10 ** 6))
def test_translation_equivariance(delta):
    s = synth.gen_lppl(TRUE, 120, noise_sigma=0.02, seed=1)
    cfg = FitConfig(tc_count=15, w_count=15)
    base = lppl.fit_full(s, "log", cfg)
    moved = lppl.fit_full(shifted(s, delta), "log", cfg)
    assert moved.t_c - base.t_c == delta
    assert moved.params.w == base.params.w and moved.params.phi == base.params.phi
    env0 = lppl.fit_envelope(s, cfg)
    env1 = lppl.fit_envelope(shifted(s, delta), cfg)
    assert env1.t_c - env0.t_c == delta


@pytest.mark.parametrize("count", [5, 17, 40])
def test_grid_refinement_never_hurts(count):
    s = synth.gen_lppl(TRUE, 150, noise_sigma=0.02, seed=count)
    coarse = lppl.fit_full(s, "log", FitConfig(tc_count=count, w_count=20, refine=False))
    fine = lppl.fit_full(s, "log", FitConfig(tc_count=2 * count - 1, w_count=20, refine=False))
    assert fine.rss <= coarse.rss * (1 + 1e-12)


def test_tie_break_prefers_smallest_tc_then_w():
    rss = np.array([[[3.0], [1.0]], [[1.0], [1.0]]])
    assert lppl._argmin_first(rss) == (0, 1, 0)


def test_parallel_grid_is_bit_identical(clean):
    noisy = synth.gen_lppl(TRUE, 300, 0.02, seed=8)
    a = lppl.fit_full(noisy, "log", replace(COARSE, jobs=1))
    b = lppl.fit_full(noisy, "log", replace(COARSE, jobs=4))
    assert a.to_json() == b.to_json()


# ---------------------------------------------------------------- two-stage


def test_envelope_round_trip():
    p = LpplParams("log", 5.0, -1.5, 0.0, None, None, 330.0)
    s = synth.gen_lppl(p, 300)
    env = lppl.fit_envelope(s)
    assert abs(env.params.A - 5) < 1e-6 and abs(env.params.B + 1.5) < 1e-6
    assert abs(env.t_c - 330) < 1e-4


def test_envelope_constant_series():
    env = lppl.fit_envelope(series.from_values(np.full(100, 2.5)))
    assert not env.converged
    with pytest.raises(FitError):
        lppl.fit_oscillation(series.from_values(np.full(100, 2.5)), env)


def test_envelope_bias_below_one_period(clean):
    env = lppl.fit_envelope(clean)
    # one oscillation period in time at the end of the data
    period = (TRUE.t_c - 500) * (1 - math.exp(-2 * math.pi / TRUE.w))
    assert abs(env.t_c - TRUE.t_c) < period


def test_oscillation_with_true_envelope(clean):
    env = report(TRUE.t_c, 1.0)
    env = replace(env, params=replace(TRUE, C=0.0, w=None, phi=None))
    osc = lppl.fit_oscillation(clean, env)
    assert abs(osc.params.C - 0.1) < 1e-6 * 0.1
    assert abs(osc.params.w - 8) < 1e-6 * 8
    assert abs(osc.params.phi - 1) < 1e-6
    assert abs(osc.t_c - 520) < 1e-6 * 520


@pytest.mark.parametrize("seed", range(3))
def test_oscillation_null_input(seed):
    s = synth.gen_lppl(replace(TRUE, C=0.0), 500, noise_sigma=0.01, seed=seed)
    env, osc, est = lppl.two_stage(s)
    assert osc.c_significant is False and not est.agrees
    assert osc.c_threshold > 3


def test_look_elsewhere_threshold():
    cfg = FitConfig(tc_count=10, w_count=10)
    assert lppl._c_threshold(cfg, 100) == pytest.approx(math.sqrt(9 + 2 * math.log(100)))
    assert lppl._c_threshold(replace(cfg, look_elsewhere=False), 100) == 3.0


def test_wrong_envelope_is_worse():
    s = synth.gen_lppl(TRUE, 500, noise_sigma=0.01, seed=4)
    good = replace(report(TRUE.t_c, 1.0), params=replace(TRUE, C=0.0, w=None, phi=None))
    bad = replace(good, params=replace(good.params, A=TRUE.A + 10 * 0.01))
    assert lppl.fit_oscillation(s, bad).rss > 2 * lppl.fit_oscillation(s, good).rss


def test_estimate_rupture_examples():
    est = lppl.estimate_rupture(report(100, 2), report(101, 2), 2)
    assert est.agrees and est.tc_combined == 100.5
    assert not lppl.estimate_rupture(report(100, 1), report(110, 1), 2).agrees
    same = lppl.estimate_rupture(report(100, 3), report(100, 3), 2)
    assert same.agrees and same.tc_combined == 100
    with pytest.raises(FitError):
        lppl.estimate_rupture(report(100, 1, converged=False), report(100, 1), 2)


def test_estimate_rupture_guards():
    assert not lppl.estimate_rupture(report(100, math.inf), report(100, 1), 2).agrees
    assert not lppl.estimate_rupture(report(100, 1), report(100, 1, at_bound=True), 2).agrees
    assert not lppl.estimate_rupture(report(100, 1), report(100, 1, c_sig=False), 2).agrees
    d = json.loads(lppl.estimate_rupture(report(100, 2), report(101, 2), 2).to_json())
    assert d["tc_combined"]["value"] == 100.5
    assert d["tc_combined"]["stderr"] == pytest.approx(math.sqrt(2), rel=1e-15)


def test_two_stage_noiseless(clean):
    env, osc, est = lppl.two_stage(clean)
    assert est.agrees and abs(est.tc_combined - 520) <= 2


def test_scan_contracts_toward_truth():
    s = synth.gen_lppl(TRUE, 494)
    entries = lppl.scan_expanding(s, first_window=294, step=40)
    errs = [e.estimate.tc_combined_stderr or e.estimate.tc_oscillation_stderr for e in entries[-5:]]
    slope = np.polyfit(np.arange(5), errs, 1)[0]
    assert slope <= 0
    assert abs(entries[-1].estimate.tc_oscillation - 520) < abs(entries[0].estimate.tc_oscillation - 520) + 1


def test_scan_single_window_equals_one_shot(clean):
    sub = series.head(clean, 300)
    (entry,) = lppl.scan_expanding(sub, first_window=300, step=1000)
    assert entry.estimate == lppl.two_stage(sub)[2]
    assert entry.window_end == 300


def test_scan_errors(clean):
    with pytest.raises(FitError):
        lppl.scan_expanding(clean, first_window=10)
    with pytest.raises(FitError):
        lppl.scan_expanding(clean, first_window=600)


def test_scan_csv_format(clean):
    entries = lppl.scan_expanding(series.head(clean, 300), first_window=280, step=20, cfg=COARSE)
    lines = lppl.scan_to_csv(entries).splitlines()
    assert lines[0] == "window_end,tc_env,tc_env_err,tc_osc,tc_osc_err,agrees,tc_combined,warning"
    assert len(lines) == 3 and lines[1].startswith("280,")
