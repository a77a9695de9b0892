"""Virtual ECU: air-mass setpoint stage, PI air-path loops, calibration variables.

The setpoint stage mirrors a production structure: base map times an
environmental factor, plus a dynamic (lead) correction, plus an externally
writable delta, then a validation clamp. The delta channel is what the
residual agent writes to.

Writes to calibration variables are latched at the start of the next
control step, so a write never changes the output of a step that already
ran.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .maps import DeltaClamp, LookupMap2D, interpolate
from .plant import ActuatorCommand, SensorFrame


class CalibrationAccessError(KeyError):
    pass


class CalibrationWriteRejected(ValueError):
    def __init__(self, name: str, value: float, bounds: tuple[float, float], reason: str = "out of bounds"):
        super().__init__(f"write to '{name}' rejected ({reason}): {value!r} not in [{bounds[0]}, {bounds[1]}]")
        self.name = name
        self.value = value
        self.bounds = bounds


@dataclass
class CalibrationVariable:
    name: str
    value: float
    writable: bool = False
    bounds: tuple[float, float] = (-math.inf, math.inf)
    description: str = ""

    def __post_init__(self):
        lo, hi = self.bounds
        if not lo <= self.value <= hi:
            raise ValueError(f"default of '{self.name}' outside its bounds")


@dataclass(frozen=True)
class EcuConfig:
    setpoint_min: float = 150.0
    setpoint_max: float = 1500.0
    dyn_gain: float = 3.0
    dyn_tau: float = 0.3

    # air loop: relative air error -> total EGR demand in %
    kp_air: float = 120.0
    ki_air: float = 500.0
    lp_ratio: float = 0.35
    # boost loop: kPa error -> VGT %
    kp_boost: float = 1.5
    ki_boost: float = 6.0
    vgt_min: float = 5.0
    vgt_max: float = 95.0
    vgt_init: float = 40.0
    # throttle governor, only active while the EGR demand is saturated
    ki_throttle: float = 200.0
    throttle_min: float = 20.0


def default_boost_map(x_axis, y_axis, p_amb: float = 101.3) -> LookupMap2D:
    """Synthetic boost-pressure setpoint in kPa over speed x injected fuel."""
    n = np.asarray(x_axis, dtype=float)[:, None]
    m = np.asarray(y_axis, dtype=float)[None, :]
    gain = 1.6 + 1.0 * np.clip((n - 800.0) / 1700.0, 0.0, 1.0)
    vals = p_amb + np.minimum(gain * m, 130.0)
    return LookupMap2D.from_arrays(x_axis, y_axis, vals, name="boost_setpoint", units="kPa")


class SetpointStage:
    """Air-mass setpoint determination (mg/stroke)."""

    def __init__(self, base_map: LookupMap2D, cfg: EcuConfig, clamp: DeltaClamp | None = None):
        self.base_map = base_map
        self.cfg = cfg
        self.clamp = clamp
        self.env_correction = 1.0
        self.delta_injection = 0.0
        self.dyn_correction = 0.0
        self._fuel_filt: float | None = None

    def reset(self):
        self.env_correction = 1.0
        self.delta_injection = 0.0
        self.dyn_correction = 0.0
        self._fuel_filt = None

    def update_dynamics(self, m_inj: float, dt: float) -> None:
        # lead term: gain * (fuel - low-passed fuel); zero at steady state
        if self._fuel_filt is None:
            self._fuel_filt = m_inj
        self._fuel_filt += (m_inj - self._fuel_filt) * (dt / (self.cfg.dyn_tau + dt))
        self.dyn_correction = self.cfg.dyn_gain * (m_inj - self._fuel_filt)

    def handwritten(self, n_eng: float, m_inj: float) -> float:
        """Setpoint without the delta channel (the handwritten controller)."""
        return interpolate(self.base_map, n_eng, m_inj) * self.env_correction + self.dyn_correction

    def compute(self, n_eng: float, m_inj: float) -> float:
        sp = interpolate(self.base_map, n_eng, m_inj) * self.env_correction + self.dyn_correction
        sp = sp + self.delta_injection
        lo, hi = self.cfg.setpoint_min, self.cfg.setpoint_max
        return lo if sp < lo else hi if sp > hi else sp


def compute_setpoint(stage: SetpointStage, n_eng: float, m_inj: float) -> float:
    return stage.compute(n_eng, m_inj)


@dataclass
class AirPathController:
    cfg: EcuConfig = field(default_factory=EcuConfig)
    i_egr: float = 0.0
    i_vgt: float = 40.0
    i_thr: float = 0.0
    last: ActuatorCommand | None = None

    def __post_init__(self):
        self.i_vgt = self.cfg.vgt_init

    def reset(self):
        self.i_egr = 0.0
        self.i_vgt = self.cfg.vgt_init
        self.i_thr = 0.0
        self.last = None


def control_step(ctrl: AirPathController, setpoint: float, sensors: SensorFrame, dt: float,
                 boost_setpoint: float, m_inj: float = 0.0) -> ActuatorCommand:
    """One PI update of the three air-path loops; outputs clamped to [0, 100] %."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    c = ctrl.cfg
    e_air = (sensors.m_air_act - setpoint) / setpoint
    e_boost = boost_setpoint - sensors.p_boost_act

    # EGR demand spans 0..100 %; integrator clamped to the same range
    i_egr = ctrl.i_egr + c.ki_air * e_air * dt
    i_egr = 0.0 if i_egr < 0.0 else 100.0 if i_egr > 100.0 else i_egr
    u_egr = i_egr + c.kp_air * e_air
    u_egr = 0.0 if u_egr < 0.0 else 100.0 if u_egr > 100.0 else u_egr
    ctrl.i_egr = i_egr

    # throttle closes only once EGR alone cannot pull the air mass down
    if i_egr >= 100.0 or ctrl.i_thr > 0.0:
        i_thr = ctrl.i_thr + c.ki_throttle * e_air * dt
        hi = 100.0 - c.throttle_min
        ctrl.i_thr = 0.0 if i_thr < 0.0 else hi if i_thr > hi else i_thr
    u_thr = 100.0 - ctrl.i_thr

    i_vgt = ctrl.i_vgt + c.ki_boost * e_boost * dt
    i_vgt = c.vgt_min if i_vgt < c.vgt_min else c.vgt_max if i_vgt > c.vgt_max else i_vgt
    u_vgt = i_vgt + c.kp_boost * e_boost
    u_vgt = c.vgt_min if u_vgt < c.vgt_min else c.vgt_max if u_vgt > c.vgt_max else u_vgt
    ctrl.i_vgt = i_vgt

    u_lp = c.lp_ratio * u_egr
    cmd = ActuatorCommand(u_hp_egr=u_egr, u_lp_egr=u_lp, u_throttle=u_thr, u_vgt=u_vgt, m_inj_tot=m_inj)
    ctrl.last = cmd
    return cmd


class VirtualECU:
    """Setpoint stage, air-path controller and a calibration-variable namespace."""

    def __init__(self, base_map: LookupMap2D, cfg: EcuConfig | None = None,
                 clamp: DeltaClamp | None = None, boost_map: LookupMap2D | None = None,
                 dt: float = 0.01):
        self.cfg = cfg or EcuConfig()
        self.stage = SetpointStage(base_map, self.cfg, clamp)
        self.boost_map = boost_map or default_boost_map(base_map.x_axis.breakpoints, base_map.y_axis.breakpoints)
        self.ctrl = AirPathController(self.cfg)
        self.dt = dt
        self.clamp = clamp
        max_delta = clamp.max_abs_delta if clamp is not None else 0.0
        self._vars: dict[str, CalibrationVariable] = {}
        self._pending: dict[str, float] = {}
        self._define(CalibrationVariable("delta_injection", 0.0, True, (-max_delta, max_delta),
                                         "additive air-mass setpoint correction, mg/stroke"))
        self._define(CalibrationVariable("env_correction", 1.0, True, (0.8, 1.2),
                                         "multiplicative ambient correction of the base map"))
        for name, desc in (
            ("n_eng", "engine speed, 1/min"),
            ("m_inj_tot", "total injected fuel, mg/stroke"),
            ("air_setpoint", "validated air-mass setpoint, mg/stroke"),
            ("air_setpoint_base", "setpoint without the delta channel, mg/stroke"),
            ("m_air_act", "actual cylinder air mass, mg/stroke"),
            ("p_boost_set", "boost-pressure setpoint, kPa"),
            ("p_boost_dev", "boost-pressure deviation, kPa"),
            ("mdot_nox", "engine-out NOx mass flow, mg/s"),
            ("mdot_soot", "engine-out soot mass flow, mg/s"),
        ):
            self._define(CalibrationVariable(name, 0.0, False, description=desc))
        self.steps = 0

    def _define(self, var: CalibrationVariable):
        self._vars[var.name] = var

    # calibration access ---------------------------------------------------
    def read_variable(self, name: str) -> float:
        try:
            return self._vars[name].value
        except KeyError:
            raise CalibrationAccessError(f"unknown calibration variable '{name}'") from None

    def write_variable(self, name: str, value: float) -> bool:
        try:
            var = self._vars[name]
        except KeyError:
            raise CalibrationAccessError(f"unknown calibration variable '{name}'") from None
        if not var.writable:
            raise CalibrationWriteRejected(name, value, var.bounds, "read-only")
        lo, hi = var.bounds
        if not (lo <= value <= hi) or not math.isfinite(value):
            raise CalibrationWriteRejected(name, value, var.bounds)
        self._pending[name] = float(value)
        return True

    def manifest(self) -> str:
        rows = [
            {"name": v.name, "default": v.value if not v.writable else v.value, "writable": v.writable,
             "bounds": [v.bounds[0], v.bounds[1]] if math.isfinite(v.bounds[0]) else None,
             "description": v.description}
            for v in self._vars.values()
        ]
        return json.dumps(rows, indent=2) + "\n"

    def _latch(self):
        for name, value in self._pending.items():
            self._vars[name].value = value
        self._pending.clear()
        self.stage.delta_injection = self._vars["delta_injection"].value
        self.stage.env_correction = self._vars["env_correction"].value

    def reset(self):
        self.stage.reset()
        self.ctrl.reset()
        self._pending.clear()
        self._vars["delta_injection"].value = 0.0
        self._vars["env_correction"].value = 1.0
        self.steps = 0

    # control ---------------------------------------------------------------
    def step(self, n_eng: float, m_inj: float, sensors: SensorFrame) -> ActuatorCommand:
        """One ECU task: latch writes, determine setpoints, run the PI loops."""
        if self._pending:
            self._latch()
        st = self.stage
        st.update_dynamics(m_inj, self.dt)
        sp = st.compute(n_eng, m_inj)
        p_set = interpolate(self.boost_map, n_eng, m_inj)
        sensors.p_boost_dev = sensors.p_boost_act - p_set
        cmd = control_step(self.ctrl, sp, sensors, self.dt, p_set, m_inj)
        v = self._vars
        v["n_eng"].value = n_eng
        v["m_inj_tot"].value = m_inj
        v["air_setpoint"].value = sp
        v["air_setpoint_base"].value = st.handwritten(n_eng, m_inj)
        v["m_air_act"].value = sensors.m_air_act
        v["p_boost_set"].value = p_set
        v["p_boost_dev"].value = sensors.p_boost_dev
        v["mdot_nox"].value = sensors.mdot_nox
        v["mdot_soot"].value = sensors.mdot_soot
        self.steps += 1
        return cmd
