import json

import numpy as np
import pytest

from rrlcal import plant
from rrlcal.ecu import (
    AirPathController,
    CalibrationAccessError,
    CalibrationWriteRejected,
    EcuConfig,
    SetpointStage,
    VirtualECU,
    compute_setpoint,
    control_step,
)
from rrlcal.maps import DeltaClamp, LookupMap2D, interpolate
from rrlcal.plant import ActuatorCommand, PlantConfig, PlantState, SensorFrame

X = [800.0, 1400.0, 2000.0, 3000.0]
Y = [0.0, 10.0, 20.0, 40.0]


def flat_map(v=500.0):
    return LookupMap2D.from_arrays(X, Y, np.full((4, 4), v))


def frame(m_air=500.0, p_boost=150.0):
    return SensorFrame(m_air_act=m_air, p_boost_act=p_boost, mdot_nox=0.0, mdot_soot=0.0, lam=2.0, torque=0.0)


def test_setpoint_pass_through_and_delta():
    rng = np.random.default_rng(0)
    m = LookupMap2D.from_arrays(X, Y, rng.uniform(300, 900, (4, 4)))
    st = SetpointStage(m, EcuConfig())
    assert compute_setpoint(st, 1700, 13) == interpolate(m, 1700, 13)
    st = SetpointStage(flat_map(), EcuConfig())
    st.delta_injection = 15.0
    assert compute_setpoint(st, 1500, 10) == 515.0
    st = SetpointStage(flat_map(), EcuConfig(setpoint_max=900.0))
    st.delta_injection = 500.0
    assert compute_setpoint(st, 1500, 10) == 900.0


def test_setpoint_validation_always_in_bounds():
    cfg = EcuConfig(setpoint_min=200.0, setpoint_max=900.0)
    st = SetpointStage(flat_map(), cfg)
    rng = np.random.default_rng(1)
    for _ in range(2000):
        st.delta_injection = rng.normal(0, 1000)
        st.update_dynamics(rng.uniform(0, 60), 0.01)
        sp = st.compute(rng.uniform(0, 5000), rng.uniform(-10, 80))
        assert cfg.setpoint_min <= sp <= cfg.setpoint_max


def test_zero_error_holds_commands():
    ctrl = AirPathController(EcuConfig())
    a = control_step(ctrl, 500.0, frame(500.0, 150.0), 0.01, 150.0)
    b = control_step(ctrl, 500.0, frame(500.0, 150.0), 0.01, 150.0)
    assert a == b


def test_air_excess_raises_egr():
    ctrl = AirPathController(EcuConfig())
    prev = control_step(ctrl, 500.0, frame(500.0), 0.01, 150.0)
    nxt = control_step(ctrl, 500.0, frame(560.0), 0.01, 150.0)
    assert nxt.u_hp_egr >= prev.u_hp_egr and nxt.u_lp_egr >= prev.u_lp_egr
    assert nxt.u_hp_egr > prev.u_hp_egr


def test_anti_windup_bounds_integrator():
    ctrl = AirPathController(EcuConfig())
    for _ in range(5000):
        cmd = control_step(ctrl, 300.0, frame(900.0, 100.0), 0.01, 250.0)
    assert ctrl.i_egr == 100.0
    assert ctrl.i_vgt == ctrl.cfg.vgt_max
    for u in (cmd.u_hp_egr, cmd.u_lp_egr, cmd.u_throttle, cmd.u_vgt):
        assert 0.0 <= u <= 100.0
    # recovery starts immediately once the error flips
    cmd2 = control_step(ctrl, 900.0, frame(300.0, 250.0), 0.01, 100.0)
    assert ctrl.i_egr < 100.0 and cmd2.u_hp_egr < cmd.u_hp_egr
    with pytest.raises(ValueError):
        control_step(ctrl, 500.0, frame(), 0.0, 150.0)


def test_variable_access():
    ecu = VirtualECU(flat_map(), clamp=DeltaClamp(50.0, 0.2))
    assert ecu.read_variable("delta_injection") == 0.0
    assert ecu.read_variable("env_correction") == 1.0
    with pytest.raises(CalibrationAccessError):
        ecu.read_variable("nope")
    with pytest.raises(CalibrationAccessError):
        ecu.write_variable("nope", 1.0)
    with pytest.raises(CalibrationWriteRejected) as ei:
        ecu.write_variable("delta_injection", 80.0)
    assert ei.value.bounds == (-50.0, 50.0)
    with pytest.raises(CalibrationWriteRejected):
        ecu.write_variable("air_setpoint", 1.0)
    with pytest.raises(CalibrationWriteRejected):
        ecu.write_variable("delta_injection", float("nan"))
    ecu.step(1500, 10, frame())
    assert ecu.read_variable("delta_injection") == 0.0
    manifest = json.loads(ecu.manifest())
    names = {row["name"] for row in manifest}
    assert {"delta_injection", "air_setpoint", "p_boost_dev"} <= names


def test_write_latency_one_step():
    ecu = VirtualECU(flat_map(), clamp=DeltaClamp(50.0, 0.2))
    ecu.step(1500, 10, frame())
    assert ecu.read_variable("air_setpoint") == 500.0
    ecu.write_variable("delta_injection", 10.0)
    # current value is unchanged until the next task latches the write
    assert ecu.read_variable("delta_injection") == 0.0
    assert ecu.read_variable("air_setpoint") == 500.0
    ecu.step(1500, 10, frame())
    assert ecu.read_variable("air_setpoint") == 510.0
    assert ecu.read_variable("air_setpoint_base") == 500.0


def _closed_loop(ecu, cfg, n, m, steps, writes=None):
    st = PlantState(n_eng=n)
    sens = plant.sensors_of(st, ActuatorCommand(m_inj_tot=m), cfg)
    trace = []
    for k in range(steps):
        if writes and k in writes:
            ecu.write_variable("delta_injection", writes[k])
        cmd = ecu.step(n, m, sens)
        st, sens = plant.step(st, cmd, cfg, hold_speed=True)
        trace.append((cmd, sens.values(), ecu.read_variable("air_setpoint")))
    return trace


def test_zero_delta_reproduces_baseline_bit_exactly():
    cfg = PlantConfig()
    base = _closed_loop(VirtualECU(flat_map()), cfg, 1700, 16, 400)
    zero = _closed_loop(VirtualECU(flat_map(), clamp=DeltaClamp(100, 0.2)), cfg, 1700, 16, 400,
                        writes={k: 0.0 for k in range(0, 400, 10)})
    assert base == zero


@pytest.mark.parametrize("n,m,delta", [(1400, 12, -40.0), (1700, 16, 40.0), (2000, 20, -60.0)])
def test_setpoint_step_tracking(n, m, delta):
    cfg = PlantConfig()
    base = LookupMap2D.from_arrays(X, Y, np.full((4, 4), 500.0))
    ecu = VirtualECU(base, clamp=DeltaClamp(100.0, 0.2))
    settle, horizon = 600, 300
    trace = _closed_loop(ecu, cfg, n, m, settle + horizon, writes={settle: delta})
    sp = trace[-1][2]
    assert sp == pytest.approx(500.0 + delta)
    m_air = trace[-1][1][0]
    assert abs(m_air - sp) / sp < 0.05
