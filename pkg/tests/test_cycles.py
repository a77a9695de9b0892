import math
from dataclasses import replace

import numpy as np
import pytest

from rrlcal import cycles, plant
from rrlcal.cli import reference_map
from rrlcal.cycles import (
    CycleDomainError,
    CycleFormatError,
    DriverModel,
    DriverState,
    EpisodeSetup,
    driver_step,
    load_cycle,
    parse_cycle,
    residual_audit,
    run_episode,
)
from rrlcal.ecu import VirtualECU
from rrlcal.maps import interpolate
from rrlcal.plant import ActuatorCommand, PlantConfig, PlantFault, PlantState
from rrlcal.rl import NumericalFault, init_params

SETUP = EpisodeSetup()


@pytest.fixture(scope="module")
def ref():
    return reference_map()


@pytest.fixture(scope="module")
def desk():
    return load_cycle("desk60")


@pytest.fixture(scope="module")
def baseline(desk, ref):
    return run_episode(desk, SETUP, ref)


def agent_for(m, seed=0, scale=60.0, log_std=-0.7):
    p = init_params(seed, (m.x_axis.lo, m.y_axis.lo), (m.x_axis.hi, m.y_axis.hi), action_scale=scale,
                    init_log_std=log_std)
    rng = np.random.default_rng(seed)
    vec = p.policy_vector()
    vec[:-1] += rng.normal(0, 0.3, vec.size - 1)
    return p.with_policy_vector(vec)


# -- loading ----------------------------------------------------------------------

def test_two_point_resample():
    c = parse_cycle("time_s,speed_kmh\n0,0\n10,50\n", "ramp", dt=0.01)
    assert len(c.speed_kmh) == 1001
    np.testing.assert_allclose(c.speed_kmh, np.linspace(0, 50, 1001), atol=1e-12)
    assert c.duration == pytest.approx(10.0)


def test_shipped_cycle_statistics():
    c = load_cycle("wltc_like")
    assert c.duration == pytest.approx(430.9, abs=1e-9)
    assert abs(c.mean_speed - 37.6) <= 0.5
    assert c.dt == 0.01
    d = load_cycle("desk60")
    assert d.duration == pytest.approx(60.0)


def test_synthetic_generators_match_shipped_files():
    c = load_cycle("wltc_like", dt=None)
    s = cycles.synthetic_wltc_like(c.dt)
    np.testing.assert_allclose(c.speed_kmh, s.speed_kmh, atol=1e-9)


def test_format_errors(tmp_path):
    with pytest.raises(CycleFormatError, match="empty"):
        parse_cycle("")
    with pytest.raises(CycleFormatError, match="header"):
        parse_cycle("t,v\n0,0\n1,1\n")
    with pytest.raises(CycleFormatError, match="uniform"):
        parse_cycle("time_s,speed_kmh\n0,0\n1,1\n3,2\n")
    with pytest.raises(CycleFormatError, match="increasing"):
        parse_cycle("time_s,speed_kmh\n0,0\n1,1\n1,2\n")
    with pytest.raises(CycleDomainError):
        parse_cycle("time_s,speed_kmh\n0,0\n1,-1\n")
    p = tmp_path / "mine.csv"
    p.write_text("time_s,speed_kmh\n0,0\n0.5,3\n1.0,6\n")
    c = load_cycle(p)
    assert c.id == "mine" and len(c.speed_kmh) == 101
    with pytest.raises(FileNotFoundError):
        load_cycle("no_such_cycle")


def test_csv_round_trip():
    c = parse_cycle("time_s,speed_kmh\n0,0\n1,10\n2,5\n", "x", dt=0.5)
    back = parse_cycle(c.to_csv(), "x", dt=None)
    np.testing.assert_array_equal(back.speed_kmh, c.speed_kmh)


# -- driver -------------------------------------------------------------------------

def test_driver_cutoff_forces_exact_zero_and_no_emissions():
    cfg = PlantConfig()
    drv = DriverModel()
    st = PlantState(v_vehicle=60.0, gear=5, n_eng=plant.engine_speed(60.0, 5, cfg))
    ds = DriverState()
    m, brake = driver_step(drv, ds, 20.0, 10.0, st, cfg, cfg.dt)
    assert ds.cutoff and m == 0.0 and brake >= 0.0
    _, f = plant.step(st, ActuatorCommand(u_hp_egr=40, u_lp_egr=20, m_inj_tot=m, brake_force=brake), cfg)
    assert f.mdot_nox == 0.0 and f.mdot_soot == 0.0


def test_driver_demand_bounded():
    cfg = PlantConfig()
    drv = DriverModel()
    rng = np.random.default_rng(0)
    ds = DriverState()
    for _ in range(2000):
        v = float(rng.uniform(0, 120))
        g = plant.gear_for_speed(v, 1, cfg)
        st = PlantState(v_vehicle=v, gear=g, n_eng=plant.engine_speed(v, g, cfg))
        m, brake = driver_step(drv, ds, float(rng.uniform(0, 130)), float(rng.uniform(0, 130)), st, cfg, cfg.dt)
        assert 0.0 <= m <= drv.m_max and brake >= 0.0
    with pytest.raises(ValueError):
        DriverModel(cutoff_on=1.0, cutoff_off=0.5)


# -- episodes -------------------------------------------------------------------------

def test_experience_count(desk, ref, baseline):
    n = math.floor(desk.duration / (SETUP.agent_period * desk.dt) + 1e-9)
    assert len(baseline.episode) == n == 600
    short = parse_cycle("time_s,speed_kmh\n0,0\n1.234,5\n", "s", dt=0.01)
    assert len(run_episode(short, SETUP, ref).episode) == 12


def test_baseline_tracks_speed(baseline):
    assert baseline.speed_rmse < 1.5
    assert not baseline.episode.aborted
    assert np.all(baseline.episode.rewards <= 0)


def test_wltc_like_tracking(ref):
    r = run_episode(load_cycle("wltc_like"), SETUP, ref)
    assert r.speed_rmse < 1.0


def test_zero_policy_reproduces_baseline(desk, ref, baseline):
    zero = agent_for(ref).zeroed_mean()
    r = run_episode(desk, SETUP, ref, policy=zero, explore=False)
    for col in cycles.LOG_COLUMNS:
        if col in ("mu", "sigma", "sample"):
            continue
        np.testing.assert_array_equal(r.log[col], baseline.log[col], err_msg=col)
    np.testing.assert_array_equal(r.episode.rewards, baseline.episode.rewards)
    np.testing.assert_array_equal(r.episode.obs, baseline.episode.obs)
    assert r.cum_nox_g == baseline.cum_nox_g


def test_same_seed_same_episode(desk, ref):
    p = agent_for(ref, 3)
    a = run_episode(desk, SETUP, ref, policy=p, explore=True, seed=11)
    b = run_episode(desk, SETUP, ref, policy=p, explore=True, seed=11)
    c = run_episode(desk, SETUP, ref, policy=p, explore=True, seed=12)
    for name in ("obs", "actions", "logps", "rewards"):
        np.testing.assert_array_equal(getattr(a.episode, name), getattr(b.episode, name))
    assert not np.array_equal(a.episode.actions, c.episode.actions)
    v1 = run_episode(desk, SETUP, ref, policy=p, explore=False, seed=1)
    v2 = run_episode(desk, SETUP, ref, policy=p, explore=False, seed=2)
    np.testing.assert_array_equal(v1.episode.rewards, v2.episode.rewards)


def test_residual_composition_audit_and_speed_following(desk, ref, baseline):
    p = agent_for(ref, 5, log_std=0.0)
    r = run_episode(desk, SETUP, ref, policy=p, explore=True, seed=4)
    assert residual_audit(r, SETUP.ecu.setpoint_min, SETUP.ecu.setpoint_max) < 1e-9
    # every applied delta respects the clamp around the base value at the observation
    base = np.array([interpolate(ref, n, m) for n, m in zip(r.log["n_eng"], r.log["m_inj_tot"])])
    bound = np.minimum(SETUP.clamp.max_abs_delta, SETUP.clamp.max_rel_delta * np.abs(base))
    assert np.all(np.abs(r.log["delta_applied"]) <= bound * (1 + 1e-12))
    assert np.any(np.abs(r.log["delta_applied"]) > 0)
    np.testing.assert_array_equal(r.episode.applied, r.log["delta_applied"])
    assert r.speed_rmse <= 2.0 * baseline.speed_rmse


def test_cutoff_steps_have_zero_emissions(desk, ref):
    cfg = SETUP.plant
    ecu = VirtualECU(ref, SETUP.ecu, SETUP.clamp)
    drv, ds = SETUP.driver, DriverState()
    state = PlantState(n_eng=cfg.n_idle)
    sensors = plant.sensors_of(state, ActuatorCommand(), cfg)
    v = desk.speed_kmh
    cut = 0
    for k in range(len(v) - 1):
        m, brake = driver_step(drv, ds, v[k], v[min(k + 100, len(v) - 1)], state, cfg, cfg.dt)
        cmd = replace(ecu.step(state.n_eng, m, sensors), brake_force=brake)
        state, sensors = plant.step(state, cmd, cfg)
        if ds.cutoff:
            assert m == 0.0
            assert sensors.mdot_nox == 0.0 and sensors.mdot_soot == 0.0
            cut += 1
    assert cut > 50


def test_plant_fault_aborts_episode(desk, ref, monkeypatch):
    real = plant.step
    calls = {"n": 0}

    def flaky(*a, **kw):
        calls["n"] += 1
        if calls["n"] == 1234:
            raise PlantFault("p_intake", float("nan"))
        return real(*a, **kw)

    monkeypatch.setattr(cycles.plant_mod, "step", flaky)
    r = run_episode(desk, SETUP, ref, policy=agent_for(ref), explore=True, seed=0)
    assert r.episode.aborted and r.fault
    assert len(r.episode) == 1233 // SETUP.agent_period
    assert len(r.log["reward"]) == len(r.episode)
    assert not r.episode.dones.any() or r.episode.dones[-1]


def test_non_finite_policy_raises(desk, ref):
    p = agent_for(ref)
    vec = p.policy_vector()
    vec[0] = np.nan
    with pytest.raises(NumericalFault):
        run_episode(desk, SETUP, ref, policy=p.with_policy_vector(vec))


def test_log_csv_has_all_columns(baseline):
    head = baseline.log_csv().splitlines()[0]
    assert head.split(",") == list(cycles.LOG_COLUMNS)
    assert len(baseline.log_csv().splitlines()) == len(baseline.episode) + 1
