"""Drive cycles, a longitudinal driver model, and the episode runner.

One episode binds cycle -> driver -> ECU setpoint stage (+ residual delta)
-> air-path PI -> plant at the plant step ``dt``. The agent acts every
``agent_period`` plant steps; its delta is written before the ECU task of
that step runs, so it is latched for exactly the ``agent_period`` steps
whose rewards it collects.
"""

from __future__ import annotations

import csv
import io as _io
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import plant as plant_mod
from .ecu import EcuConfig, VirtualECU
from .io import csv_text
from .maps import DeltaClamp, LookupMap2D, interpolate
from .plant import ActuatorCommand, PlantConfig, PlantFault, PlantState, SensorFrame
from .rl.core import Episode, RewardWeights
from .rl.networks import PolicyParameters, sample_action


class CycleFormatError(ValueError):
    pass


class CycleDomainError(ValueError):
    pass


@dataclass(frozen=True)
class DriveCycle:
    id: str
    dt: float
    speed_kmh: np.ndarray

    def __post_init__(self):
        if len(self.speed_kmh) < 2 or not self.dt > 0:
            raise CycleFormatError("a cycle needs at least two samples and a positive step")
        if np.any(self.speed_kmh < 0):
            raise CycleDomainError("cycle speeds must be >= 0")

    @property
    def duration(self) -> float:
        return (len(self.speed_kmh) - 1) * self.dt

    @property
    def times(self) -> np.ndarray:
        return np.arange(len(self.speed_kmh)) * self.dt

    @property
    def mean_speed(self) -> float:
        # trapezoidal time average
        v = self.speed_kmh
        return float(np.sum(v[1:] + v[:-1]) * 0.5 * self.dt / self.duration)

    def speed_at(self, t: float) -> float:
        k = t / self.dt
        i = int(k)
        if i >= len(self.speed_kmh) - 1:
            return float(self.speed_kmh[-1])
        if i < 0:
            return float(self.speed_kmh[0])
        f = k - i
        return float(self.speed_kmh[i] + (self.speed_kmh[i + 1] - self.speed_kmh[i]) * f)

    def to_csv(self) -> str:
        rows = [(f"{t:.6g}", repr(float(v))) for t, v in zip(self.times, self.speed_kmh)]
        return csv_text(("time_s", "speed_kmh"), rows)


def parse_cycle(text: str, cycle_id: str = "cycle", dt: float | None = 0.01) -> DriveCycle:
    """Parse ``time_s,speed_kmh`` CSV; resample to ``dt`` (None keeps the source grid)."""
    rows = [r for r in csv.reader(_io.StringIO(text)) if r and any(c.strip() for c in r)]
    if not rows:
        raise CycleFormatError("empty cycle file")
    header = [c.strip() for c in rows[0]]
    if header != ["time_s", "speed_kmh"]:
        raise CycleFormatError(f"expected header 'time_s,speed_kmh', got {','.join(header)!r}")
    if len(rows) < 3:
        raise CycleFormatError("a cycle needs at least two samples")
    try:
        data = np.array([[float(c) for c in r] for r in rows[1:]], dtype=float)
    except ValueError as exc:
        raise CycleFormatError(f"non-numeric cycle entry: {exc}") from None
    if data.shape[1] != 2 or not np.all(np.isfinite(data)):
        raise CycleFormatError("each row needs two finite numbers")
    t, v = data[:, 0], data[:, 1]
    steps = np.diff(t)
    if np.any(steps <= 0):
        raise CycleFormatError("time must be strictly increasing")
    if not np.allclose(steps, steps[0], rtol=1e-6, atol=1e-9):
        raise CycleFormatError("time grid must be uniform")
    if np.any(v < 0):
        raise CycleDomainError("negative speed in cycle")
    if t[0] != 0.0:
        t = t - t[0]
    if dt is None:
        return DriveCycle(cycle_id, float(steps[0]), v)
    n = int(round(t[-1] / dt))
    grid = np.arange(n + 1) * dt
    return DriveCycle(cycle_id, dt, np.interp(grid, t, v))


def load_cycle(source, dt: float | None = 0.01) -> DriveCycle:
    """Load a cycle from a path, or a shipped cycle by name (``wltc_like``, ``desk60``)."""
    p = Path(str(source))
    if p.suffix != ".csv" and not p.exists():
        name = str(source)
        try:
            text = resources.files("rrlcal.data").joinpath(f"{name}.csv").read_text()
        except FileNotFoundError:
            raise FileNotFoundError(f"no such cycle file or shipped cycle: {source}") from None
        return parse_cycle(text, name, dt)
    return parse_cycle(p.read_text(), p.stem, dt)


# -- synthetic cycles ------------------------------------------------------------

def _profile(segments, dt: float) -> np.ndarray:
    """Build a trace from (duration, end_speed, wobble_amplitude) segments with cosine ramps."""
    out = [0.0]
    v0 = 0.0
    for dur, v1, wobble in segments:
        n = int(round(dur / dt))
        s = np.arange(1, n + 1) / n
        base = v0 + (v1 - v0) * 0.5 * (1.0 - np.cos(np.pi * s))
        if wobble:
            base = base + wobble * np.sin(2.0 * np.pi * s * max(1, round(dur / 15.0)))
        out.extend(base.tolist())
        v0 = v1
    return np.maximum(np.array(out), 0.0)


WLTC_LIKE_DURATION = 430.9
WLTC_LIKE_MEAN = 37.6


def synthetic_wltc_like(dt: float = 0.1) -> DriveCycle:
    """Part-load segment with four trips, rescaled to the target mean speed."""
    segs = [
        (6.0, 0.0, 0), (14.0, 48.0, 0), (40.0, 48.0, 5.0), (12.0, 0.0, 0), (8.0, 0.0, 0),
        (20.0, 62.0, 0), (60.0, 62.0, 6.0), (8.0, 32.0, 0), (30.0, 32.0, 3.0), (10.0, 55.0, 0),
        (25.0, 55.0, 4.0), (15.0, 0.0, 0), (10.0, 0.0, 0),
        (28.0, 76.0, 0), (45.0, 76.0, 3.0), (24.0, 0.0, 0),
        (12.0, 40.0, 0), (30.0, 40.0, 4.0), (12.0, 0.0, 0), (21.9, 0.0, 0),
    ]
    v = _profile(segs, dt)
    cyc = DriveCycle("wltc_like", dt, v)
    return DriveCycle("wltc_like", dt, v * (WLTC_LIKE_MEAN / cyc.mean_speed))


def synthetic_desk60(dt: float = 0.1) -> DriveCycle:
    """Short part-load cycle for desk-scale calibration runs."""
    segs = [
        (3.0, 0.0, 0), (12.0, 50.0, 0), (15.0, 50.0, 4.0), (6.0, 25.0, 0), (8.0, 25.0, 0),
        (6.0, 45.0, 0), (8.0, 0.0, 0), (2.0, 0.0, 0),
    ]
    return DriveCycle("desk60", dt, _profile(segs, dt))


# -- driver -----------------------------------------------------------------------

@dataclass(frozen=True)
class DriverModel:
    """PI on speed error in the force domain plus a road-load feed-forward.

    The wheel-force demand is realized by fuel (through the current gear) or,
    below the engine drag, by fuel cut-off and the service brake.
    """

    kp: float = 300.0          # N per km/h
    ki: float = 80.0           # N per (km/h s)
    i_max: float = 3000.0      # N
    preview_s: float = 1.0
    m_max: float = 60.0        # mg/stroke
    cutoff_on: float = 0.3     # mg/stroke demand that enters cut-off
    cutoff_off: float = 1.0    # mg/stroke demand that leaves it
    cutoff_min_rpm: float = 1000.0
    hold_brake: float = 1500.0  # N at standstill

    def __post_init__(self):
        if not 0 <= self.cutoff_on < self.cutoff_off:
            raise ValueError("cut-off hysteresis needs 0 <= cutoff_on < cutoff_off")
        if self.m_max <= 0:
            raise ValueError("m_max must be positive")


@dataclass
class DriverState:
    integral: float = 0.0
    cutoff: bool = False


def driver_step(drv: DriverModel, ds: DriverState, v_target: float, v_preview: float, state: PlantState,
                cfg: PlantConfig, dt: float) -> tuple[float, float]:
    """Returns (m_inj_tot in mg/stroke, brake force in N)."""
    v = state.v_vehicle
    n = state.n_eng
    t_fric = cfg.friction_torque_0 + cfg.friction_torque_n * n
    idle_fuel = t_fric / cfg.torque_per_mg
    if v_target <= 0.0 and v_preview <= 0.0 and v < 0.5:
        ds.integral = 0.0
        ds.cutoff = False
        return idle_fuel, drv.hold_brake

    err = v_target - v
    ds.integral = min(max(ds.integral + drv.ki * err * dt, -drv.i_max), drv.i_max)
    vt = v_target / 3.6
    a_ff = (v_preview - v_target) / 3.6 / drv.preview_s
    f_res = (cfg.curb_mass_kg * plant_mod.G * cfg.roll_coeff * min(1.0, vt / 0.5)
             + 0.5 * cfg.air_density * cfg.drag_area * vt * vt)
    f_dem = cfg.curb_mass_kg * a_ff + f_res + drv.kp * err + ds.integral

    ratio = cfg.gear_ratios[state.gear - 1] * cfg.final_drive
    eta = cfg.driveline_eff if f_dem > 0 else 1.0
    t_need = f_dem * cfg.wheel_radius / (ratio * eta)
    m_req = (t_need + t_fric) / cfg.torque_per_mg

    if n < drv.cutoff_min_rpm:
        ds.cutoff = False
        if m_req < idle_fuel:
            brake = (idle_fuel - m_req) * cfg.torque_per_mg * ratio / cfg.wheel_radius
            return idle_fuel, brake
        return min(m_req, drv.m_max), 0.0

    if ds.cutoff:
        if m_req > drv.cutoff_off:
            ds.cutoff = False
    elif m_req < drv.cutoff_on:
        ds.cutoff = True
    if ds.cutoff:
        brake = max(0.0, -m_req) * cfg.torque_per_mg * ratio / cfg.wheel_radius
        return 0.0, brake
    return min(max(m_req, 0.0), drv.m_max), 0.0


# -- episodes -----------------------------------------------------------------------

@dataclass(frozen=True)
class EpisodeSetup:
    """Everything an episode runner needs besides the map and the policy."""

    plant: PlantConfig = field(default_factory=PlantConfig)
    ecu: EcuConfig = field(default_factory=EcuConfig)
    clamp: DeltaClamp = field(default_factory=lambda: DeltaClamp(100.0, 0.12))
    weights: RewardWeights = field(default_factory=RewardWeights)
    driver: DriverModel = field(default_factory=DriverModel)
    agent_period: int = 10

    def __post_init__(self):
        if self.agent_period < 1:
            raise ValueError("agent_period must be >= 1 plant steps")


LOG_COLUMNS = (
    "time_s", "v_target", "v_vehicle", "n_eng", "m_inj_tot", "obs_n", "obs_m", "mu", "sigma", "sample",
    "delta_applied", "setpoint_base", "setpoint", "m_air_act", "u_hp_egr", "u_lp_egr", "u_vgt",
    "mdot_nox", "mdot_soot", "p_boost_dev", "pen_nox", "pen_soot", "pen_boost", "reward",
    "cum_nox_g", "cum_soot_g",
)


@dataclass
class EpisodeResult:
    episode: Episode
    log: dict[str, np.ndarray]
    cum_nox_g: float
    cum_soot_g: float
    speed_rmse: float
    mean_hp_egr: float
    mean_lp_egr: float
    fault: str = ""

    @property
    def total_return(self) -> float:
        return self.episode.total_return

    def log_csv(self) -> str:
        cols = [self.log[c] for c in LOG_COLUMNS]
        rows = [[repr(float(c[i])) for c in cols] for i in range(len(cols[0]))]
        return csv_text(LOG_COLUMNS, rows)


def run_episode(cycle: DriveCycle, setup: EpisodeSetup, base_map: LookupMap2D,
                policy: PolicyParameters | None = None, explore: bool = False, seed: int = 0,
                episode_id: int = 0, boost_map: LookupMap2D | None = None,
                delta_offset: float = 0.0) -> EpisodeResult:
    """Run one episode. ``policy=None`` is the handwritten controller alone.

    ``delta_offset`` shifts every agent delta before the clamp (used to probe
    how sensitive the return is to a uniform setpoint error).
    """
    pcfg = setup.plant
    dt = pcfg.dt
    if abs(cycle.dt - dt) > 1e-12:
        raise ValueError(f"cycle sampled at {cycle.dt} s but plant step is {dt} s")
    ecu = VirtualECU(base_map, setup.ecu, setup.clamp, boost_map, dt)
    clamp = setup.clamp
    weights = setup.weights
    a1, a2, a3 = weights.alpha1, weights.alpha2, weights.alpha3
    drv, ds = setup.driver, DriverState()
    rng = np.random.default_rng(seed)
    period = setup.agent_period
    n_agent = int(math.floor(cycle.duration / (period * dt) + 1e-9))
    n_steps = n_agent * period
    preview = int(round(drv.preview_s / dt))
    speeds = cycle.speed_kmh
    last = len(speeds) - 1
    if policy is not None:
        lo, hi = np.asarray(policy.obs_low), np.asarray(policy.obs_high)
    else:
        lo = np.array([base_map.x_axis.lo, base_map.y_axis.lo])
        hi = np.array([base_map.x_axis.hi, base_map.y_axis.hi])
    span = hi - lo

    log = {c: np.zeros(n_agent) for c in LOG_COLUMNS}
    obs = np.zeros((n_agent + 1, 2))
    acts = np.zeros(n_agent)
    mus = np.zeros(n_agent)
    sigmas = np.zeros(n_agent)
    logps = np.zeros(n_agent)
    rewards = np.zeros(n_agent)

    state = PlantState(n_eng=pcfg.n_idle)
    sensors = plant_mod.sensors_of(state, ActuatorCommand(), pcfg)
    cum_nox = cum_soot = 0.0
    sq_err = 0.0
    sum_hp = sum_lp = 0.0
    fault = ""
    t_idx = 0
    k_done = 0
    pen = [0.0, 0.0, 0.0]
    win = [0.0, 0.0, 0.0]
    try:
        for k in range(n_steps):
            t_idx = k // period
            v_t = speeds[k] if k <= last else speeds[last]
            v_p = speeds[min(k + preview, last)]
            m_inj, brake = driver_step(drv, ds, v_t, v_p, state, pcfg, dt)
            n_eng = state.n_eng
            if k % period == 0:
                o = np.clip(2.0 * (np.array([n_eng, m_inj]) - lo) / span - 1.0, -1.0, 1.0)
                obs[t_idx] = o
                base_val = interpolate(base_map, n_eng, m_inj)
                if policy is not None:
                    act = sample_action(policy, o, rng, explore)
                    applied = clamp.clip(act.sample + delta_offset, base_val)
                    ecu.write_variable("delta_injection", applied)
                    acts[t_idx], mus[t_idx], sigmas[t_idx], logps[t_idx] = act.sample, act.mu, act.sigma, act.logp
                else:
                    applied = 0.0
                pen = [0.0, 0.0, 0.0]
                win = [0.0, 0.0, 0.0]
                lg_row = t_idx
                log["time_s"][lg_row] = k * dt
                log["v_target"][lg_row] = v_t
                log["v_vehicle"][lg_row] = state.v_vehicle
                log["n_eng"][lg_row] = n_eng
                log["m_inj_tot"][lg_row] = m_inj
                log["obs_n"][lg_row], log["obs_m"][lg_row] = o
                log["mu"][lg_row] = mus[t_idx]
                log["sigma"][lg_row] = sigmas[t_idx]
                log["sample"][lg_row] = acts[t_idx]
                log["delta_applied"][lg_row] = applied
            cmd = ecu.step(n_eng, m_inj, sensors)
            if brake:
                cmd = ActuatorCommand(cmd.u_hp_egr, cmd.u_lp_egr, cmd.u_throttle, cmd.u_vgt, cmd.m_inj_tot, brake)
            if k % period == 0:
                log["setpoint_base"][t_idx] = ecu.read_variable("air_setpoint_base")
                log["setpoint"][t_idx] = ecu.read_variable("air_setpoint")
                log["m_air_act"][t_idx] = sensors.m_air_act
                log["u_hp_egr"][t_idx] = cmd.u_hp_egr
                log["u_lp_egr"][t_idx] = cmd.u_lp_egr
                log["u_vgt"][t_idx] = cmd.u_vgt
            state, sensors = plant_mod.step(state, cmd, pcfg)
            # the boost deviation is against the setpoint the ECU just used
            p_dev = sensors.p_boost_act - ecu.read_variable("p_boost_set")
            sensors.p_boost_dev = p_dev
            nox, soot = sensors.mdot_nox, sensors.mdot_soot
            pen[0] += a1 * nox * dt
            pen[1] += a2 * soot * dt
            pen[2] += a3 * abs(p_dev) * dt
            win[0] += nox
            win[1] += soot
            win[2] += p_dev
            cum_nox += nox * dt * 1e-3
            cum_soot += soot * dt * 1e-3
            sq_err += (state.v_vehicle - (speeds[k + 1] if k + 1 <= last else speeds[last])) ** 2
            sum_hp += cmd.u_hp_egr
            sum_lp += cmd.u_lp_egr
            if k % period == period - 1:
                r = -(pen[0] + pen[1] + pen[2])
                rewards[t_idx] = r
                log["mdot_nox"][t_idx] = win[0] / period
                log["mdot_soot"][t_idx] = win[1] / period
                log["p_boost_dev"][t_idx] = win[2] / period
                log["pen_nox"][t_idx], log["pen_soot"][t_idx], log["pen_boost"][t_idx] = pen
                log["reward"][t_idx] = r
                log["cum_nox_g"][t_idx] = cum_nox
                log["cum_soot_g"][t_idx] = cum_soot
            k_done = k + 1
    except PlantFault as exc:
        fault = str(exc)

    steps_done = k_done // period
    aborted = bool(fault)
    # observation following the last decision
    if not aborted:
        m_next, _ = driver_step(drv, DriverState(ds.integral, ds.cutoff), speeds[min(n_steps, last)],
                                speeds[min(n_steps + preview, last)], state, pcfg, dt)
        obs[n_agent] = np.clip(2.0 * (np.array([state.n_eng, m_next]) - lo) / span - 1.0, -1.0, 1.0)
    else:
        for c in log:
            log[c] = log[c][:steps_done]
    t = steps_done if aborted else n_agent
    dones = np.zeros(t, dtype=bool)
    if t:
        dones[-1] = True
    diagnostics = {
        "mdot_nox": log["mdot_nox"][:t].copy(),
        "mdot_soot": log["mdot_soot"][:t].copy(),
        "p_boost_dev": log["p_boost_dev"][:t].copy(),
        "n_eng": log["n_eng"][:t].copy(),
        "m_inj_tot": log["m_inj_tot"][:t].copy(),
    }
    ep = Episode(obs[:t], obs[1:t + 1], acts[:t], mus[:t], sigmas[:t], logps[:t], rewards[:t], dones,
                 applied=log["delta_applied"][:t].copy(), diagnostics=diagnostics, cycle_id=cycle.id, seed=seed,
                 policy_version=policy.version if policy is not None else -1, episode_id=episode_id,
                 aborted=aborted, note=fault)
    n_eff = max(k_done, 1)
    return EpisodeResult(ep, log, cum_nox, cum_soot, math.sqrt(sq_err / n_eff), sum_hp / n_eff, sum_lp / n_eff, fault)


def residual_audit(result: EpisodeResult, setpoint_min: float, setpoint_max: float) -> float:
    """Max |applied setpoint - clip(handwritten + applied delta)| over the logged agent steps."""
    lg = result.log
    expect = np.clip(lg["setpoint_base"] + lg["delta_applied"], setpoint_min, setpoint_max)
    return float(np.max(np.abs(lg["setpoint"] - expect), initial=0.0))
