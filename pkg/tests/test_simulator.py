import numpy as np
import pytest

from fhnn.simulator import (
    CatchmentParams,
    SimulationError,
    StoreState,
    WeatherConfig,
    default_split,
    generate_weather,
    make_fleet,
    perturb_params,
    simulate,
)


def demo_params(**over):
    kw = dict(ddf=1.5, t_snow=0.0, soil_cap=100.0, et_coeff=0.0008, frac_fast=0.6, k_fast=0.2, k_slow=0.01)
    kw.update(over)
    return CatchmentParams(**kw)


# --- weather -----------------------------------------------------------------


def test_weather_same_seed_identical():
    cfg = WeatherConfig(seed=11)
    p1, t1 = generate_weather(500, cfg)
    p2, t2 = generate_weather(500, cfg)
    assert np.array_equal(p1, p2)
    assert np.array_equal(t1, t2)


def test_weather_noise_free_sinusoid():
    cfg = WeatherConfig(temp_noise=0.0, precip_prob=0.0, temp_mean=5.0, temp_amp=10.0, steps_per_year=100, seed=1)
    precip, temp = generate_weather(250, cfg)
    assert np.array_equal(precip, np.zeros(250))
    t = np.arange(250)
    expected = 5.0 - 10.0 * np.cos(2 * np.pi * t / 100)
    assert np.allclose(temp, expected)
    assert temp[0] == pytest.approx(-5.0)  # coldest at the start of the year


def test_weather_mean_precip_matches_expectation():
    cfg = WeatherConfig(seed=3)
    n = 10 * cfg.steps_per_year
    precip, _ = generate_weather(n, cfg)
    expected = cfg.mean_precip_per_step()
    assert abs(precip.mean() - expected) <= 0.2 * expected


def test_weather_rejects_bad_config():
    with pytest.raises(SimulationError):
        WeatherConfig(precip_prob=1.5)
    with pytest.raises(SimulationError):
        generate_weather(0, WeatherConfig())


# --- bucket model ---------------------------------------------------------------


def test_recession_closed_form():
    # no input, warm and dry: the fast reservoir drains geometrically
    params = demo_params()
    a = 40.0
    n = 30
    res = simulate(np.zeros(n), np.full(n, 15.0), params, init=StoreState(s_fast=a))
    t = np.arange(n)
    expected = params.k_fast * a * (1.0 - params.k_fast) ** t
    assert np.allclose(res.flow, expected, rtol=1e-12)


def test_mass_balance():
    cfg = WeatherConfig(seed=5)
    precip, temp = generate_weather(4000, cfg)
    params = demo_params()
    init = StoreState(snow=10.0, soil=30.0, s_fast=2.0, s_slow=20.0)
    res = simulate(precip, temp, params, init=init)
    total_in = precip.sum()
    total_out = res.flow.sum() + res.et.sum() + (res.final.total() - init.total())
    assert abs(total_in - total_out) <= 1e-8 * max(total_in, 1.0)


def test_steady_state_flow_approaches_input_minus_et():
    params = demo_params(et_coeff=0.001)
    p, t = 2.0, 10.0
    n = 3000
    res = simulate(np.full(n, p), np.full(n, t), params, init=StoreState(soil=params.soil_cap))
    # equilibrium: soil returns to capacity each step, ET acts on cap + p
    et_ss = params.et_coeff * t * (params.soil_cap + p)
    assert res.flow[-1] == pytest.approx(p - et_ss, rel=1e-3)
    assert res.et[-1] == pytest.approx(et_ss, rel=1e-6)


def test_stores_and_flow_nonnegative():
    cfg = WeatherConfig(seed=9, temp_mean=0.0, temp_amp=16.0)
    precip, temp = generate_weather(5000, cfg)
    res = simulate(precip, temp, demo_params(t_snow=1.0))
    for arr in (res.flow, res.et, res.snow, res.soil, res.s_fast, res.s_slow):
        assert np.all(arr >= 0.0)


def test_recession_non_increasing_without_input():
    res = simulate(np.zeros(50), np.full(50, 12.0), demo_params(), init=StoreState(s_fast=5.0, s_slow=50.0))
    assert np.all(np.diff(res.flow) <= 1e-12)


def test_simulate_rejects_negative_precip():
    with pytest.raises(SimulationError):
        simulate(np.array([-1.0]), np.array([5.0]), demo_params())


def test_param_invariants():
    with pytest.raises(SimulationError):
        demo_params(k_fast=0.01, k_slow=0.05)
    with pytest.raises(SimulationError):
        demo_params(frac_fast=1.5)
    with pytest.raises(SimulationError):
        demo_params(soil_cap=-1.0)


# --- fleet ----------------------------------------------------------------------


def test_fleet_zero_perturbation_sim_equals_truth():
    fleet = make_fleet(2, years=2, regime="mixed", seed=4, perturbation=0.0)
    for fb in fleet:
        assert np.array_equal(fb.series.sim_response, fb.series.response)


def test_fleet_same_seed_identical():
    a = make_fleet(3, years=2, regime="span", seed=12)
    b = make_fleet(3, years=2, regime="span", seed=12)
    for fa, fb in zip(a, b):
        assert np.array_equal(fa.series.response, fb.series.response)
        assert np.array_equal(fa.series.drivers, fb.series.drivers)
        assert fa.truth.as_dict() == fb.truth.as_dict()


def test_fleet_perturbed_sim_is_biased_but_correlated():
    fleet = make_fleet(2, years=3, regime="mixed", seed=8, perturbation=0.25)
    for fb in fleet:
        assert not np.allclose(fb.series.sim_response, fb.series.response)
        corr = np.corrcoef(fb.series.sim_response, fb.series.response)[0, 1]
        assert corr > 0.5


def test_dry_snowy_ratio_below_wet_flashy():
    dry = make_fleet(5, years=4, regime="dry-snowy", seed=21)
    wet = make_fleet(5, years=4, regime="wet-flashy", seed=22)
    assert max(fb.runoff_ratio for fb in dry) < min(fb.runoff_ratio for fb in wet)


def test_span_fleet_covers_target_ratio_range():
    fleet = make_fleet(6, years=10, regime="span", seed=7)
    ratios = [fb.runoff_ratio for fb in fleet]
    assert all(0.0 < r <= 1.0 for r in ratios)
    assert min(ratios) <= 0.2
    assert max(ratios) >= 0.4
    assert max(ratios) - min(ratios) >= 0.25


def test_fleet_rejects_unknown_regime():
    with pytest.raises(SimulationError):
        make_fleet(2, years=1, regime="tropical")


def test_default_split_year_aligned():
    fleet = make_fleet(1, years=10, regime="mixed", seed=1)
    split = default_split(fleet)
    ts = fleet[0].series.timestamps
    assert ts[0] < split.train_end < split.val_end < split.test_end
    assert split.test_end > ts[-1]
    spy = 1460
    n_train = int(np.sum(ts < split.train_end))
    assert n_train == 7 * spy


def test_perturb_params_respects_invariants():
    rng = np.random.default_rng(0)
    for _ in range(50):
        p = perturb_params(demo_params(), 0.4, rng)
        assert 0.0 <= p.frac_fast <= 1.0
        assert 0.0 < p.k_slow < p.k_fast <= 1.0
