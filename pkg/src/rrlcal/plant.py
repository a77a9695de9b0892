"""Surrogate mean-value diesel air path with a longitudinal vehicle model.

The structure follows a classic mean-value engine model:

* speed-density cylinder filling with a volumetric efficiency curve,
* HP-EGR through an orifice between exhaust and intake manifolds, LP-EGR as a
  valve-scheduled share of the compressor inflow,
* turbocharger speed from a compressor/turbine power balance, the VGT
  setting the turbine flow area,
* filling/emptying dynamics for both manifold pressures and the intake
  burned-gas fraction,
* smooth engine-out emission closures: NOx exponential in intake O2, soot
  logistic in the inverse air-fuel ratio.

All coefficients are synthetic. Units: pressures kPa, air and fuel masses
mg per cylinder stroke, emission flows mg/s, speeds 1/min and km/h.

The pressure pair is integrated with a linearly implicit Euler step so the
default 10 ms step stays stable even though the manifolds are small.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

R_AIR = 287.0
CP_AIR = 1005.0
CP_EXH = 1150.0
KAPPA_AIR = (1.4 - 1.0) / 1.4
KAPPA_EXH = (1.33 - 1.0) / 1.33
Y_O2_AIR = 0.232
G = 9.81

NO_COMBUSTION = math.inf
"""Lambda reported when no fuel is injected."""


class PlantFault(ArithmeticError):
    """A state component went non-finite."""

    def __init__(self, field_name: str, value: float):
        super().__init__(f"non-finite plant state in '{field_name}': {value!r}")
        self.field = field_name
        self.value = value


class ConvergenceError(RuntimeError):
    def __init__(self, steps: int, residuals: dict[str, float]):
        worst = ", ".join(f"{k}={v:.3g}" for k, v in residuals.items())
        super().__init__(f"steady state not reached after {steps} steps; relative residuals: {worst}")
        self.steps = steps
        self.residuals = residuals


@dataclass(frozen=True)
class PlantConfig:
    displacement_cm3: float = 1999.0
    n_cyl: int = 4
    curb_mass_kg: float = 1590.0
    afr_stoich: float = 14.5
    dt: float = 0.01

    p_amb: float = 101.3
    t_amb: float = 298.0
    t_intake: float = 313.0

    # volumetric efficiency: peak value, speed of the peak, quadratic droop
    eta_vol_peak: float = 0.92
    eta_vol_n_peak: float = 2200.0
    eta_vol_droop: float = 0.08

    v_intake_m3: float = 0.004
    v_exhaust_m3: float = 0.0015
    flow_reg_kpa: float = 1.0

    # orifice areas in m^2
    a_compressor: float = 5.0e-4
    a_throttle_min_frac: float = 0.05
    a_hp_egr: float = 6.0e-4
    lp_egr_max_share: float = 0.35
    a_turbine_max: float = 2.6e-4
    vgt_closed_area_frac: float = 0.2

    # turbocharger
    turbo_inertia: float = 5.0e-6
    compressor_radius: float = 0.02
    compressor_work_coeff: float = 0.7
    eta_compressor: float = 0.7
    eta_turbine: float = 0.65
    eta_turbo_mech: float = 0.95
    turbo_friction: float = 4.0e-7
    n_turbo_min: float = 5000.0
    n_turbo_max: float = 230000.0

    # combustion and exhaust temperature
    exhaust_heat_frac: float = 0.38
    lhv: float = 42.5e6
    t_exhaust_tau: float = 0.5
    torque_per_mg: float = 8.5
    friction_torque_0: float = 12.0
    friction_torque_n: float = 4.0e-3

    # emissions: NOx mg per g fuel at reference O2, sensitivity to O2 ratio
    nox_per_fuel: float = 30.0
    nox_o2_sens: float = 6.0
    nox_load_ref: float = 20.0
    nox_load_exp: float = 0.5
    soot_per_fuel: float = 2.5
    soot_phi_mid: float = 0.8
    soot_phi_slope: float = 14.0

    # engine and vehicle
    n_idle: float = 800.0
    n_redline: float = 4500.0
    wheel_radius: float = 0.33
    final_drive: float = 2.8
    gear_ratios: tuple[float, ...] = (4.7, 3.13, 2.1, 1.67, 1.29, 1.0, 0.84, 0.67)
    upshift_rpm: float = 1900.0
    downshift_rpm: float = 1150.0
    driveline_eff: float = 0.92
    roll_coeff: float = 0.010
    drag_area: float = 0.68
    air_density: float = 1.2

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                if not v or any(g <= 0 for g in v):
                    raise ValueError(f"{f.name} must be positive")
            elif v <= 0:
                raise ValueError(f"{f.name} must be strictly positive, got {v}")
        if not 0 < self.dt <= 0.1:
            raise ValueError(f"dt must lie in (0, 0.1], got {self.dt}")

    @property
    def cyl_volume_m3(self) -> float:
        return self.displacement_cm3 * 1e-6 / self.n_cyl

    def eta_vol(self, n_eng: float) -> float:
        z = (n_eng - self.eta_vol_n_peak) / 2000.0
        return self.eta_vol_peak - self.eta_vol_droop * z * z

    @classmethod
    def from_mapping(cls, data: dict) -> "PlantConfig":
        kw = {}
        names = {f.name for f in fields(cls)}
        for k, v in data.items():
            if k not in names:
                raise KeyError(f"unknown plant parameter '{k}'")
            kw[k] = tuple(v) if isinstance(v, list) else v
        return cls(**kw)


@dataclass(frozen=True)
class PlantState:
    p_intake: float = 101.3
    p_exhaust: float = 105.0
    n_turbo: float = 20000.0
    x_burned: float = 0.0
    n_eng: float = 800.0
    v_vehicle: float = 0.0
    t_exhaust: float = 450.0
    gear: int = 1


@dataclass(frozen=True)
class ActuatorCommand:
    u_hp_egr: float = 0.0
    u_lp_egr: float = 0.0
    u_throttle: float = 100.0
    u_vgt: float = 50.0
    m_inj_tot: float = 0.0
    brake_force: float = 0.0

    def clamped(self) -> "ActuatorCommand":
        return ActuatorCommand(
            _pct(self.u_hp_egr), _pct(self.u_lp_egr), _pct(self.u_throttle), _pct(self.u_vgt),
            max(0.0, self.m_inj_tot), max(0.0, self.brake_force),
        )


@dataclass
class SensorFrame:
    m_air_act: float
    p_boost_act: float
    mdot_nox: float
    mdot_soot: float
    lam: float
    torque: float
    m_cyl: float = 0.0
    mdot_compressor: float = 0.0
    mdot_fresh_air: float = 0.0
    mdot_hp_egr: float = 0.0
    p_boost_dev: float = 0.0

    def values(self) -> tuple[float, ...]:
        return tuple(getattr(self, f.name) for f in fields(self))


@dataclass(frozen=True)
class OpPoint:
    n_eng: float
    m_inj_tot: float


def _pct(u: float) -> float:
    return 0.0 if u < 0.0 else 100.0 if u > 100.0 else u


def lambda_of(m_air: float, m_fuel: float, cfg: PlantConfig | None = None) -> float:
    """Air-fuel equivalence ratio; ``NO_COMBUSTION`` when no fuel is injected."""
    if m_air < 0 or m_fuel < 0:
        raise ValueError(f"masses must be non-negative (m_air={m_air}, m_fuel={m_fuel})")
    if m_fuel == 0:
        return NO_COMBUSTION
    afr = 14.5 if cfg is None else cfg.afr_stoich
    return m_air / (m_fuel * afr)


def _orifice(area_rho2: float, dp: float, reg: float) -> tuple[float, float]:
    """Regularised turbulent orifice, returns (flow, d flow / d dp).

    ``area_rho2`` is A*sqrt(2*rho) in SI units, ``dp`` in Pa. Below ``reg``
    the square-root law blends into a linear one so the Jacobian stays finite.
    """
    a = dp if dp >= 0.0 else -dp
    s = a + reg
    root = math.sqrt(s)
    q = area_rho2 * dp / root
    dq = area_rho2 * (0.5 * a + reg) / (s * root)
    return q, dq


def _solve3(a11, a12, a13, a21, a22, a23, a31, a32, a33, b1, b2, b3):
    """Cramer's rule for a 3x3 system; the matrices here are diagonally dominant."""
    c11 = a22 * a33 - a23 * a32
    c12 = a23 * a31 - a21 * a33
    c13 = a21 * a32 - a22 * a31
    det = a11 * c11 + a12 * c12 + a13 * c13
    x1 = (b1 * c11 + a12 * (b3 * a23 - b2 * a33) + a13 * (b2 * a32 - b3 * a22)) / det
    x2 = (a11 * (b2 * a33 - a23 * b3) + b1 * c12 + a13 * (a21 * b3 - b2 * a31)) / det
    x3 = (a11 * (a22 * b3 - b2 * a32) + a12 * (b2 * a31 - a21 * b3) + b1 * c13) / det
    return x1, x2, x3


def gear_for_speed(v_kmh: float, gear: int, cfg: PlantConfig) -> int:
    """Speed-based shift schedule with hysteresis."""
    v = v_kmh / 3.6
    k = 60.0 / (2.0 * math.pi) * cfg.final_drive / cfg.wheel_radius
    ratios = cfg.gear_ratios
    g = min(max(gear, 1), len(ratios))
    while g < len(ratios) and v * k * ratios[g - 1] > cfg.upshift_rpm:
        g += 1
    while g > 1 and v * k * ratios[g - 1] < cfg.downshift_rpm:
        g -= 1
    return g


def engine_speed(v_kmh: float, gear: int, cfg: PlantConfig) -> float:
    v = v_kmh / 3.6
    n = v / cfg.wheel_radius * cfg.gear_ratios[gear - 1] * cfg.final_drive * 60.0 / (2.0 * math.pi)
    return min(max(n, cfg.n_idle), cfg.n_redline)


def step(state: PlantState, cmd: ActuatorCommand, cfg: PlantConfig, hold_speed: bool = False):
    """Advance one ``cfg.dt``; returns (next_state, sensors of the current state).

    ``hold_speed`` pins engine speed (dynamometer mode) and skips the
    vehicle model.
    """
    dt = cfg.dt
    p_amb = cfg.p_amb * 1e3
    t_im = cfg.t_intake
    reg = cfg.flow_reg_kpa * 1e3

    u_hp = _pct(cmd.u_hp_egr)
    u_lp = _pct(cmd.u_lp_egr)
    u_thr = _pct(cmd.u_throttle)
    u_vgt = _pct(cmd.u_vgt)
    m_inj = cmd.m_inj_tot if cmd.m_inj_tot > 0.0 else 0.0

    p_im = state.p_intake * 1e3
    p_em = state.p_exhaust * 1e3
    t_em = state.t_exhaust
    x_im = state.x_burned
    n_eng = state.n_eng
    omega = state.n_turbo * (math.pi / 30.0)

    # -- cylinder filling
    strokes = n_eng / 120.0 * cfg.n_cyl
    k_cyl = cfg.eta_vol(n_eng) * cfg.cyl_volume_m3 / (R_AIR * t_im)
    m_cyl = k_cyl * p_im  # kg per stroke
    mdot_cyl = m_cyl * strokes
    dmcyl_dp = k_cyl * strokes
    mdot_fuel = m_inj * 1e-6 * strokes

    # -- compressor acts as a pressure source behind the throttle restriction
    u_tip = omega * cfg.compressor_radius
    work = cfg.compressor_work_coeff * u_tip * u_tip
    pr_src = (1.0 + cfg.eta_compressor * work / (CP_AIR * cfg.t_amb)) ** (1.0 / KAPPA_AIR)
    p_src = p_amb * pr_src
    thr_frac = cfg.a_throttle_min_frac + (1.0 - cfg.a_throttle_min_frac) * u_thr / 100.0
    a_c = cfg.a_compressor * thr_frac * math.sqrt(2.0 * p_src / (R_AIR * t_im))
    mdot_c, dc = _orifice(a_c, p_src - p_im, reg)
    lp_share = cfg.lp_egr_max_share * u_lp / 100.0

    # -- HP EGR, one way (check valve)
    a_hp = cfg.a_hp_egr * u_hp / 100.0 * math.sqrt(2.0 * p_em / (R_AIR * t_em))
    if p_em > p_im and a_hp > 0.0:
        mdot_hp, dhp = _orifice(a_hp, p_em - p_im, reg)
    else:
        mdot_hp, dhp = 0.0, 0.0

    # -- turbine
    a_t_frac = 1.0 - (1.0 - cfg.vgt_closed_area_frac) * u_vgt / 100.0
    a_t = cfg.a_turbine_max * a_t_frac * math.sqrt(2.0 * p_em / (R_AIR * t_em))
    mdot_t, dt_flow = _orifice(a_t, p_em - p_amb, reg)

    # -- turbine and compressor power
    q_c = mdot_c if mdot_c > 0.0 else 0.0
    if p_em > p_amb and mdot_t > 0.0:
        r_k = (p_amb / p_em) ** KAPPA_EXH
        k_t = CP_EXH * t_em * cfg.eta_turbine * cfg.eta_turbo_mech
        p_turb = mdot_t * k_t * (1.0 - r_k)
        dpt_dpem = k_t * (dt_flow * (1.0 - r_k) + mdot_t * KAPPA_EXH * r_k / p_em)
    else:
        p_turb = 0.0
        dpt_dpem = 0.0
    p_comp = q_c * work
    j_omega = cfg.turbo_inertia * omega
    f_w = (p_turb - p_comp - cfg.turbo_friction * omega * omega) / j_omega

    # d p_src / d omega through the Euler work term
    base = 1.0 + cfg.eta_compressor * work / (CP_AIR * cfg.t_amb)
    dpsrc_dw = p_amb / KAPPA_AIR * base ** (1.0 / KAPPA_AIR - 1.0) * cfg.eta_compressor / (CP_AIR * cfg.t_amb) * 2.0 * work / omega
    dqc_dw = dc * dpsrc_dw if mdot_c > 0.0 else 0.0
    dqc_dpim = -dc if mdot_c > 0.0 else 0.0

    # -- (p_im, p_em, omega) advanced with one linearly implicit Euler step
    c_im = R_AIR * t_im / cfg.v_intake_m3
    c_em = R_AIR * t_em / cfg.v_exhaust_m3
    f1 = c_im * (mdot_c + mdot_hp - mdot_cyl)
    f2 = c_em * (mdot_cyl + mdot_fuel - mdot_hp - mdot_t)
    f3 = f_w
    j11 = c_im * (-dc - dhp - dmcyl_dp)
    j12 = c_im * dhp
    j13 = c_im * dc * dpsrc_dw
    j21 = c_em * (dmcyl_dp + dhp)
    j22 = c_em * (-dhp - dt_flow)
    j31 = -dqc_dpim * work / j_omega
    j32 = dpt_dpem / j_omega
    j33 = (-(dqc_dw * work + q_c * 2.0 * work / omega) - 2.0 * cfg.turbo_friction * omega) / j_omega - f_w / omega
    d1, d2, d3 = _solve3(
        1.0 - dt * j11, -dt * j12, -dt * j13,
        -dt * j21, 1.0 - dt * j22, 0.0,
        -dt * j31, -dt * j32, 1.0 - dt * j33,
        dt * f1, dt * f2, dt * f3,
    )
    p_im_n = max(p_im + d1, 0.2 * p_amb)
    p_em_n = max(p_em + d2, 0.5 * p_amb)
    w_min = cfg.n_turbo_min * math.pi / 30.0
    w_max = cfg.n_turbo_max * math.pi / 30.0
    omega_n = omega + d3
    omega_n = w_min if omega_n < w_min else w_max if omega_n > w_max else omega_n

    # -- burned-gas fraction: exhaust composition is instantaneous
    if m_cyl > 0.0:
        f_exh = (x_im * m_cyl + m_inj * 1e-6 * (1.0 + cfg.afr_stoich)) / (m_cyl + m_inj * 1e-6)
        f_exh = 1.0 if f_exh > 1.0 else f_exh
    else:
        f_exh = x_im
    x_comp = lp_share * f_exh
    k_mix = dt * R_AIR * t_im / (p_im * cfg.v_intake_m3)
    x_im_n = (x_im + k_mix * (q_c * x_comp + mdot_hp * f_exh)) / (1.0 + k_mix * (q_c + mdot_hp))

    # -- exhaust temperature, first order towards the combustion value
    m_cyl_mg = m_cyl * 1e6
    if m_inj > 0.0:
        t_target = t_im + cfg.exhaust_heat_frac * cfg.lhv * m_inj / ((m_cyl_mg + m_inj) * CP_EXH)
    else:
        t_target = t_im
    t_em_n = t_em + (t_target - t_em) * (dt / (cfg.t_exhaust_tau + dt))

    # -- combustion outputs and emissions
    m_air = (1.0 - x_im) * m_cyl_mg
    if m_inj > 0.0:
        lam = m_air / (m_inj * cfg.afr_stoich)
        eff = 1.0 / (1.0 + math.exp(-8.0 * (lam - 1.05)))
        fuel_g_s = mdot_fuel * 1e3
        o2_ratio = 1.0 - x_im
        load = (m_inj / cfg.nox_load_ref) ** cfg.nox_load_exp
        nox = cfg.nox_per_fuel * fuel_g_s * load * math.exp(cfg.nox_o2_sens * (o2_ratio - 1.0))
        z = cfg.soot_phi_slope * (1.0 / lam - cfg.soot_phi_mid)
        soot = cfg.soot_per_fuel * fuel_g_s / (1.0 + math.exp(-z)) if z > -700 else 0.0
    else:
        lam = NO_COMBUSTION
        eff = 0.0
        nox = 0.0
        soot = 0.0
    torque = cfg.torque_per_mg * m_inj * eff - cfg.friction_torque_0 - cfg.friction_torque_n * n_eng

    # -- vehicle
    gear = state.gear
    v = state.v_vehicle
    if hold_speed:
        n_eng_n = n_eng
        v_n = v
    else:
        ratio = cfg.gear_ratios[gear - 1] * cfg.final_drive
        v_ms = v / 3.6
        if v_ms <= 0.0 and torque <= 0.0:
            f_wheel = 0.0
        else:
            f_wheel = torque * ratio / cfg.wheel_radius * (cfg.driveline_eff if torque > 0 else 1.0)
        f_roll = cfg.curb_mass_kg * G * cfg.roll_coeff * min(1.0, v_ms / 0.5)
        f_aero = 0.5 * cfg.air_density * cfg.drag_area * v_ms * v_ms
        f_brake = cmd.brake_force if cmd.brake_force > 0.0 and v_ms > 0.0 else 0.0
        v_ms_n = v_ms + dt * (f_wheel - f_roll - f_aero - f_brake) / cfg.curb_mass_kg
        if v_ms_n < 0.0:
            v_ms_n = 0.0
        v_n = v_ms_n * 3.6
        gear = gear_for_speed(v_n, gear, cfg)
        n_eng_n = engine_speed(v_n, gear, cfg)

    nxt = PlantState(
        p_intake=p_im_n * 1e-3,
        p_exhaust=p_em_n * 1e-3,
        n_turbo=omega_n * (30.0 / math.pi),
        x_burned=0.0 if x_im_n < 0.0 else 1.0 if x_im_n > 1.0 else x_im_n,
        n_eng=n_eng_n,
        v_vehicle=v_n,
        t_exhaust=t_em_n,
        gear=gear,
    )
    for name in ("p_intake", "p_exhaust", "n_turbo", "x_burned", "t_exhaust", "v_vehicle"):
        val = getattr(nxt, name)
        if not math.isfinite(val):
            raise PlantFault(name, val)

    sensors = SensorFrame(
        m_air_act=m_air,
        p_boost_act=p_im * 1e-3,
        mdot_nox=nox,
        mdot_soot=soot,
        lam=lam,
        torque=torque,
        m_cyl=m_cyl_mg,
        mdot_compressor=mdot_c,
        mdot_fresh_air=(1.0 - lp_share) * q_c,
        mdot_hp_egr=mdot_hp,
    )
    return nxt, sensors


def sensors_of(state: PlantState, cmd: ActuatorCommand, cfg: PlantConfig) -> SensorFrame:
    """Sensors at ``state`` without advancing the vehicle."""
    return step(state, cmd, cfg, hold_speed=True)[1]


_CONV_FIELDS = ("p_intake", "p_exhaust", "n_turbo", "x_burned", "t_exhaust")


def _rel_change(a: PlantState, b: PlantState) -> dict[str, float]:
    out = {}
    for name in _CONV_FIELDS:
        va, vb = getattr(a, name), getattr(b, name)
        scale = max(abs(va), abs(vb), 1e-3 if name == "x_burned" else 1e-9)
        out[name] = abs(vb - va) / scale
    return out


def steady_state(
    cmd: ActuatorCommand,
    op_point: OpPoint,
    cfg: PlantConfig,
    tol: float = 1e-6,
    max_steps: int = 10_000,
    initial: PlantState | None = None,
    return_state: bool = False,
):
    """Hold engine speed and fuel, step until every state moves < ``tol`` relative per step."""
    cmd = replace(cmd, m_inj_tot=op_point.m_inj_tot)
    state = initial if initial is not None else PlantState(n_eng=op_point.n_eng)
    state = replace(state, n_eng=op_point.n_eng)
    residuals: dict[str, float] = {}
    for k in range(max_steps):
        nxt, _ = step(state, cmd, cfg, hold_speed=True)
        residuals = _rel_change(state, nxt)
        state = nxt
        if k > 10 and max(residuals.values()) < tol:
            frame = sensors_of(state, cmd, cfg)
            return (frame, state) if return_state else frame
    raise ConvergenceError(max_steps, residuals)


STATE_COLUMNS = tuple(f.name for f in fields(PlantState))
COMMAND_COLUMNS = tuple(f.name for f in fields(ActuatorCommand))
SENSOR_COLUMNS = tuple(f.name for f in fields(SensorFrame))


def trajectory_rows(times, states, commands, frames):
    for t, s, c, f in zip(times, states, commands, frames):
        yield (t,) + tuple(getattr(s, k) for k in STATE_COLUMNS) + tuple(
            getattr(c, k) for k in COMMAND_COLUMNS
        ) + f.values()


def trajectory_header() -> tuple[str, ...]:
    return ("time",) + STATE_COLUMNS + COMMAND_COLUMNS + SENSOR_COLUMNS


def load_config(path) -> PlantConfig:
    """Read a ``key = value`` text file into a PlantConfig."""
    data = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, val = line.partition("=")
            if not sep:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            val = val.strip()
            if "," in val:
                data[key.strip()] = tuple(float(v) for v in val.split(","))
            else:
                data[key.strip()] = int(val) if key.strip() == "n_cyl" else float(val)
    return PlantConfig.from_mapping(data)


def dump_config(cfg: PlantConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            lines.append(f"{f.name} = {', '.join(repr(float(g)) for g in v)}")
        else:
            lines.append(f"{f.name} = {v!r}")
    return "\n".join(lines) + "\n"
