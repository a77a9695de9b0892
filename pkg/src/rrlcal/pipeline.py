"""Calibration rounds: generate -> train -> validate -> pick best -> distill into the map.

Also hosts the steady-state grid-search oracle used to judge calibrations,
the stopping rule, Pareto analysis and a PSO fitter for classical
controllers.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import maps
from .config import dump_toml, to_dict
from .cycles import DriveCycle, EpisodeResult, EpisodeSetup, load_cycle, run_episode
from .distrib import (
    MinionEndpoint,
    WorkItem,
    episode_seed,
    json_dumps,
    make_plan,
    master_dispatch,
)
from .ecu import VirtualECU
from .io import atomic_write_bytes, atomic_write_text, csv_text
from .maps import DeltaClamp, LookupMap2D
from .plant import ActuatorCommand, PlantState, step as plant_step
from .rl.core import Episode, reward
from .rl.networks import PolicyParameters, entropy, init_params, policy_forward, to_bytes
from .rl.ppo import Optimizers, TrainConfig, TrainStats, ppo_update

log = logging.getLogger(__name__)


class RoundAborted(RuntimeError):
    def __init__(self, message: str, partial=None):
        super().__init__(message)
        self.partial = partial


class ContractError(ValueError):
    pass


# -- configuration --------------------------------------------------------------------

@dataclass(frozen=True)
class StopRule:
    """Stop when entropy rises AND validation returns are unstable within the window."""

    window: int = 4
    entropy_slope_tol: float = 0.01     # per iteration
    return_std_abs: float = 0.0
    return_std_rel: float = 0.05        # relative to |mean return| in the window
    enabled: bool = True

    def __post_init__(self):
        if self.window < 2:
            raise ValueError("stop-rule window must be >= 2")


@dataclass(frozen=True)
class PipelineConfig:
    rounds: int = 3
    iterations: int = 40
    cadence: int = 10
    episodes_per_iteration: int = 4
    seed: int = 0
    cycle: str = "desk60"
    validation_cycle: str = ""
    setup: EpisodeSetup = field(default_factory=EpisodeSetup)
    train: TrainConfig = field(default_factory=TrainConfig)
    stop: StopRule = field(default_factory=StopRule)
    action_scale: float = 60.0
    visit_threshold: int = 10
    probe_per_cell: int = 8
    quantization_bound: float = 15.0    # mg/stroke
    sensitivity_margin: float = 2.0
    warm_start: bool = False
    dispatch_timeout: float = 120.0

    def __post_init__(self):
        if self.cadence < 1:
            raise ValueError("cadence must be >= 1")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if self.iterations < 1 or self.episodes_per_iteration < 1:
            raise ValueError("iterations and episodes_per_iteration must be >= 1")
        if self.action_scale <= 0:
            raise ValueError("action_scale must be positive")

    @property
    def val_cycle(self) -> str:
        return self.validation_cycle or self.cycle


def _f(v) -> str:
    """Shortest round-trip text of a number, regardless of its numpy/python type."""
    return repr(float(v))


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1, np.uint64)[0] >> 1)


# -- episode runners and dispatch -------------------------------------------------------

class EpisodeRunner:
    """Runs episodes for one (setup, map, cycle set); usable locally or inside a minion."""

    def __init__(self, setup: EpisodeSetup, base_map: LookupMap2D, cycles: dict[str, DriveCycle]):
        self.setup = setup
        self.base_map = base_map
        self.cycles = cycles

    def __call__(self, policy, cycle_id: str, explore: bool, seed: int, episode_id: int) -> Episode:
        return self.run(policy, cycle_id, explore, seed, episode_id).episode

    def run(self, policy, cycle_id: str, explore: bool, seed: int, episode_id: int = 0,
            delta_offset: float = 0.0) -> EpisodeResult:
        try:
            cyc = self.cycles[cycle_id]
        except KeyError:
            raise KeyError(f"unknown cycle id '{cycle_id}'") from None
        return run_episode(cyc, self.setup, self.base_map, policy, explore, seed, episode_id,
                           delta_offset=delta_offset)

    def spec_json(self) -> str:
        return json_dumps({
            "setup": to_dict(self.setup),
            "map": maps.serialize(self.base_map).decode(),
            # raw samples, not CSV: re-resampling would perturb the last bits
            "cycles": {cid: {"dt": c.dt, "speed_kmh": [float(v) for v in c.speed_kmh]}
                       for cid, c in sorted(self.cycles.items())},
        })

    @classmethod
    def from_spec(cls, spec_json: str) -> "EpisodeRunner":
        from .config import from_dict

        spec = json.loads(spec_json)
        setup = from_dict(EpisodeSetup, spec["setup"])
        m = maps.deserialize(spec["map"])
        cycles = {cid: DriveCycle(cid, float(c["dt"]), np.asarray(c["speed_kmh"], dtype=float))
                  for cid, c in spec["cycles"].items()}
        return cls(setup, m, cycles)


class LocalDispatcher:
    """Runs work items sequentially in-process (the single-worker reference)."""

    def __init__(self):
        self.runner: EpisodeRunner | None = None

    def configure(self, runner: EpisodeRunner):
        self.runner = runner

    def collect(self, policy, plan: Sequence[WorkItem], explore: bool) -> list[Episode]:
        out = []
        for item in sorted(plan, key=lambda it: it.item_id):
            for i in range(item.count):
                out.append(self.runner(policy, item.cycle_id, explore, episode_seed(item.seed, i),
                                       item.first_episode_id + i))
        return out

    def close(self):
        pass


class MinionDispatcher:
    """Farms work items out to connected minions via ``master_dispatch``."""

    def __init__(self, endpoints: Sequence[MinionEndpoint], timeout: float = 120.0):
        self.endpoints = list(endpoints)
        self.timeout = timeout
        self.runner: EpisodeRunner | None = None
        self._spec: str | None = None
        self._sent_to: set[int] = set()
        self.reports = []

    def configure(self, runner: EpisodeRunner):
        self.runner = runner
        self._spec = runner.spec_json()
        self._sent_to = set()

    def collect(self, policy, plan: Sequence[WorkItem], explore: bool) -> list[Episode]:
        fresh = any(id(ep) not in self._sent_to for ep in self.endpoints)
        rep = master_dispatch(self.endpoints, policy, plan, explore, self.timeout,
                              configure=self._spec if fresh else None)
        self._sent_to = {id(ep) for ep in self.endpoints}
        self.reports.append(rep)
        return rep.episodes()

    def close(self):
        from .distrib import shutdown

        shutdown(self.endpoints)


# -- records ---------------------------------------------------------------------------

@dataclass
class ValidationRecord:
    iteration: int
    ret: float
    entropy: float
    nox_g: float
    soot_g: float
    mean_hp_egr: float
    mean_lp_egr: float
    speed_rmse: float
    params: PolicyParameters | None = None
    label: str = "agent"

    @classmethod
    def from_result(cls, iteration: int, res: EpisodeResult, params, label="agent") -> "ValidationRecord":
        ent = entropy(params) if params is not None else float("nan")
        return cls(iteration, res.total_return, ent, res.cum_nox_g, res.cum_soot_g, res.mean_hp_egr,
                   res.mean_lp_egr, res.speed_rmse, params, label)


VALIDATION_HEADER = ("label", "iteration", "return", "entropy", "nox_g", "soot_g", "mean_hp_egr",
                     "mean_lp_egr", "speed_rmse")


def _vrow(r: ValidationRecord):
    return (r.label, r.iteration, _f(r.ret), _f(r.entropy), _f(r.nox_g), _f(r.soot_g),
            _f(r.mean_hp_egr), _f(r.mean_lp_egr), _f(r.speed_rmse))


@dataclass
class DistillResult:
    delta: np.ndarray
    report: maps.MapDiffReport
    quantization_loss: float
    raw: np.ndarray
    unvisited: frozenset
    map_after: LookupMap2D


@dataclass
class CalibrationIteration:
    round_index: int
    map_before: LookupMap2D
    map_after: LookupMap2D
    best_index: int
    records: list[ValidationRecord]
    distilled: ValidationRecord
    distill: DistillResult
    train_stats: list[TrainStats]
    visits: np.ndarray
    stop_reason: str = ""
    sensitivity_bound: float = float("nan")
    baseline: ValidationRecord | None = None
    quantization_bound: float = float("inf")

    @property
    def best(self) -> ValidationRecord:
        return self.records[self.best_index]

    @property
    def diff(self) -> maps.MapDiffReport:
        return self.distill.report


# -- step helpers -----------------------------------------------------------------------

def select_best_agent(records: Sequence[ValidationRecord]) -> int:
    """Highest return; ties -> lower entropy, then the earlier iteration."""
    if not records:
        raise ValueError("select_best_agent needs at least one validation record")
    return min(range(len(records)), key=lambda k: (-records[k].ret, records[k].entropy, records[k].iteration))


@dataclass(frozen=True)
class StopDecision:
    stop: bool
    reason: str = ""


def _slope(x, y) -> float:
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    xc = x - x.mean()
    den = float(np.sum(xc * xc))
    return float(np.sum(xc * (y - y.mean())) / den) if den > 0 else 0.0


def stopping_rule(history: Sequence[ValidationRecord], rule: StopRule = StopRule()) -> StopDecision:
    """Both indicators are required: rising entropy and unstable validation returns."""
    if not rule.enabled or len(history) < rule.window:
        return StopDecision(False)
    win = list(history)[-rule.window:]
    slope = _slope([r.iteration for r in win], [r.entropy for r in win])
    rets = np.array([r.ret for r in win])
    spread = float(rets.std())
    threshold = rule.return_std_abs + rule.return_std_rel * abs(float(rets.mean()))
    rising = slope > rule.entropy_slope_tol
    unstable = spread > threshold
    if rising and unstable:
        return StopDecision(True, f"entropy-rise (slope {slope:.4g}/iter) + instability (std {spread:.4g})")
    return StopDecision(False)


def visitation(m: LookupMap2D, episodes: Sequence[Episode]) -> np.ndarray:
    """Count of agent steps whose bilinear footprint touches each support point."""
    counts = np.zeros(m.shape, dtype=np.int64)
    for ep in episodes:
        n = ep.diagnostics.get("n_eng")
        q = ep.diagnostics.get("m_inj_tot")
        if n is None or q is None:
            continue
        for x, y in zip(n, q):
            for i, j in maps.bilinear_footprint(m, float(x), float(y)):
                counts[i, j] += 1
    return counts


def _check_normalization(policy: PolicyParameters, m: LookupMap2D):
    want = ((m.x_axis.lo, m.y_axis.lo), (m.x_axis.hi, m.y_axis.hi))
    if (tuple(policy.obs_low), tuple(policy.obs_high)) != want:
        raise ContractError(f"policy normalizes over {policy.obs_low}..{policy.obs_high}, "
                            f"map axes span {want[0]}..{want[1]}")


def _policy_mean_grid(policy: PolicyParameters, xs, ys) -> np.ndarray:
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    raw = np.column_stack([X.ravel(), Y.ravel()])
    mu, _ = policy_forward(policy, policy.normalize(raw))
    return mu.reshape(X.shape)


def _probe_axis(bp, per_cell: int) -> np.ndarray:
    pts = [np.linspace(bp[i], bp[i + 1], per_cell + 1)[:-1] for i in range(len(bp) - 1)]
    return np.concatenate(pts + [np.array([bp[-1]])])


def quantization_loss(policy: PolicyParameters, raw_delta: np.ndarray, m: LookupMap2D, per_cell: int = 8) -> float:
    """max |policy mean - bilinear(delta grid)| over a dense probe grid."""
    xs = _probe_axis(m.x_axis.breakpoints, per_cell)
    ys = _probe_axis(m.y_axis.breakpoints, per_cell)
    dense = _policy_mean_grid(policy, xs, ys)
    interp = maps.interpolate_grid(m.with_values(raw_delta), xs, ys)
    return float(np.max(np.abs(dense - interp)))


def distill_to_map(policy: PolicyParameters, m: LookupMap2D, visits: np.ndarray, clamp: DeltaClamp,
                   threshold: int = 10, probe_per_cell: int = 8) -> DistillResult:
    """Evaluate the mean delta at the support points; zero rarely visited cells; clamp."""
    _check_normalization(policy, m)
    visits = np.asarray(visits)
    if visits.shape != m.shape:
        raise ContractError(f"visit histogram shape {visits.shape} does not match map {m.shape}")
    raw = _policy_mean_grid(policy, m.x_axis.breakpoints, m.y_axis.breakpoints)
    low = visits < threshold
    masked = np.where(low, 0.0, raw)
    bound = np.minimum(clamp.max_abs_delta, clamp.max_rel_delta * np.abs(m.values))
    delta = np.clip(masked, -bound, bound)
    unvisited = frozenset((int(i), int(j)) for i, j in zip(*np.nonzero(low)))
    new_map, report = maps.apply_deltas(m, delta, clamp, unvisited)
    qloss = quantization_loss(policy, raw, m, probe_per_cell)
    return DistillResult(delta, report, qloss, raw, unvisited, new_map)


# -- Pareto --------------------------------------------------------------------------------

@dataclass(frozen=True)
class ParetoRecord:
    nox_g: float
    soot_g: float
    ret: float
    label: str = ""

    def __post_init__(self):
        if self.nox_g < 0 or self.soot_g < 0 or self.ret > 0:
            raise ValueError("Pareto records need nox, soot >= 0 and return <= 0")


def pareto_report(records: Sequence[ParetoRecord]) -> tuple[list[ParetoRecord], list[tuple[float, float]]]:
    """All points and the non-dominated (NOx, soot) set, sorted by NOx, duplicates once."""
    pts = sorted({(r.nox_g, r.soot_g) for r in records})
    front = []
    for p in pts:
        dominated = any(q[0] <= p[0] and q[1] <= p[1] and q != p for q in pts)
        if not dominated:
            front.append(p)
    return list(records), front


def pareto_csv(records: Sequence[ParetoRecord]) -> str:
    _, front = pareto_report(records)
    fr = set(front)
    rows = [(r.label, _f(r.nox_g), _f(r.soot_g), _f(r.ret), int((r.nox_g, r.soot_g) in fr)) for r in records]
    return csv_text(("label", "nox_g", "soot_g", "return", "on_frontier"), rows)


# -- PSO -------------------------------------------------------------------------------------

@dataclass(frozen=True)
class PSOConfig:
    particles: int = 30
    iterations: int = 200
    inertia: float = 0.7298
    cognitive: float = 1.49618
    social: float = 1.49618
    v_max_frac: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.particles < 2 or self.iterations < 1:
            raise ValueError("PSO needs >= 2 particles and >= 1 iteration")


@dataclass
class PSOResult:
    x: np.ndarray
    f: float
    history: list[float]


def pso_minimize(f: Callable[[np.ndarray], float], bounds, cfg: PSOConfig = PSOConfig()) -> PSOResult:
    """Global-best PSO with inertia, cognitive and social terms; positions kept in bounds."""
    b = np.asarray(bounds, dtype=float)
    if b.ndim != 2 or b.shape[1] != 2 or not np.all(np.isfinite(b)) or np.any(b[:, 1] <= b[:, 0]):
        raise ValueError("bounds must be finite (lo, hi) pairs with lo < hi")
    lo, hi = b[:, 0], b[:, 1]
    d = len(b)
    rng = np.random.default_rng(cfg.seed)
    vmax = cfg.v_max_frac * (hi - lo)
    x = lo + rng.random((cfg.particles, d)) * (hi - lo)
    v = (rng.random((cfg.particles, d)) * 2.0 - 1.0) * vmax
    fx = np.array([f(p) for p in x])
    pbest, pval = x.copy(), fx.copy()
    g = int(np.argmin(pval))
    gbest, gval = pbest[g].copy(), float(pval[g])
    history = [gval]
    for _ in range(cfg.iterations):
        r1 = rng.random((cfg.particles, d))
        r2 = rng.random((cfg.particles, d))
        v = cfg.inertia * v + cfg.cognitive * r1 * (pbest - x) + cfg.social * r2 * (gbest - x)
        v = np.clip(v, -vmax, vmax)
        x = np.clip(x + v, lo, hi)
        fx = np.array([f(p) for p in x])
        better = fx < pval
        pbest[better] = x[better]
        pval[better] = fx[better]
        g = int(np.argmin(pval))
        if pval[g] < gval:
            gbest, gval = pbest[g].copy(), float(pval[g])
        history.append(gval)
    return PSOResult(gbest, gval, history)


class PITemplate:
    """u = kp * e + ki * integral(e); observations are rows (e, integral e)."""

    n_params = 2

    def __call__(self, params, obs) -> np.ndarray:
        obs = np.atleast_2d(np.asarray(obs, dtype=float))
        return params[0] * obs[:, 0] + params[1] * obs[:, 1]


def pi_observations(errors, dt: float) -> np.ndarray:
    e = np.asarray(errors, dtype=float)
    integral = np.concatenate([[0.0], np.cumsum(e[:-1] * dt)]) + e * dt
    return np.column_stack([e, integral])


def pso_fit(template, dataset, bounds, cfg: PSOConfig = PSOConfig()) -> PSOResult:
    """Fit template parameters to (observation, desired output) pairs by PSO on the MSE."""
    if dataset is None or len(dataset) == 0:
        raise ValueError("pso_fit needs a non-empty dataset")
    obs = np.array([np.atleast_1d(o) for o, _ in dataset], dtype=float)
    target = np.array([t for _, t in dataset], dtype=float)

    def mse(p):
        err = template(p, obs) - target
        return float(np.mean(err * err))

    return pso_minimize(mse, bounds, cfg)


# -- steady-state oracle -------------------------------------------------------------------

def closed_loop_steady(setup: EpisodeSetup, n_eng: float, m_inj: float, setpoint: float,
                       state: PlantState | None = None, steps: int = 600, base_map: LookupMap2D | None = None):
    """Hold (n, m) with the ECU tracking a constant setpoint; returns (frame, state)."""
    x = base_map.x_axis.breakpoints if base_map is not None else (0.0, 1.0)
    y = base_map.y_axis.breakpoints if base_map is not None else (0.0, 1.0)
    flat = LookupMap2D.from_arrays(x, y, np.full((len(x), len(y)), float(setpoint)))
    ecu = VirtualECU(flat, setup.ecu, None, None, setup.plant.dt)
    st = state if state is not None else PlantState(n_eng=n_eng)
    cmd = ActuatorCommand(m_inj_tot=m_inj)
    frame = None
    for _ in range(steps):
        st_next, frame = plant_step(st, cmd, setup.plant, hold_speed=True)
        cmd = ecu.step(n_eng, m_inj, frame)
        st = st_next
    return frame, st


@dataclass(frozen=True)
class OracleConfig:
    coarse: tuple[float, ...] = tuple(float(v) for v in range(200, 1201, 50))
    refine_step: float = 10.0
    refine_span: float = 40.0
    steps: int = 600


def grid_search_oracle(m: LookupMap2D, setup: EpisodeSetup, cfg: OracleConfig = OracleConfig(),
                       cells: Sequence[tuple[int, int]] | None = None) -> LookupMap2D:
    """Per support point, the constant setpoint maximizing the steady-state reward.

    Cells whose reward is flat (ties) keep their current value.
    """
    vals = np.array(m.values, dtype=float)
    todo = cells if cells is not None else [(i, j) for i in range(m.shape[0]) for j in range(m.shape[1])]
    for i, j in todo:
        n = m.x_axis.breakpoints[i]
        q = m.y_axis.breakpoints[j]
        cur = float(vals[i, j])
        scores: dict[float, float] = {}
        state = None

        def score(sp):
            nonlocal state
            sp = round(float(sp), 9)
            if sp not in scores:
                frame, state = closed_loop_steady(setup, n, q, sp, state, cfg.steps, m)
                scores[sp] = reward(frame, setup.weights)
            return scores[sp]

        for sp in cfg.coarse:
            score(sp)
        best = max(scores, key=lambda s: (scores[s], -abs(s - cur)))
        k = cfg.refine_step
        while k <= cfg.refine_span:
            for sp in (best - k, best + k):
                if setup.ecu.setpoint_min <= sp <= setup.ecu.setpoint_max:
                    score(sp)
            k += cfg.refine_step
        score(cur)
        top = max(scores.values())
        if scores[round(cur, 9)] >= top - 1e-12:
            continue
        vals[i, j] = max(scores, key=lambda s: (scores[s], -abs(s - cur)))
    return m.with_values(vals, name=m.name)


# -- rounds ------------------------------------------------------------------------------------

def _validate(runner: EpisodeRunner, cycle_id: str, policy, seed: int, iteration: int, label: str,
              delta_offset: float = 0.0) -> tuple[ValidationRecord, EpisodeResult]:
    res = runner.run(policy, cycle_id, False, seed, 0, delta_offset=delta_offset)
    if res.fault:
        raise RoundAborted(f"validation episode faulted: {res.fault}")
    return ValidationRecord.from_result(iteration, res, policy, label), res


def run_round(cfg: PipelineConfig, map_in: LookupMap2D, cycles: dict[str, DriveCycle], dispatcher=None,
              round_index: int = 1, init: PolicyParameters | None = None,
              policy_hook: Callable[[PolicyParameters], PolicyParameters] | None = None,
              on_iteration: Callable[[int, TrainStats], None] | None = None) -> CalibrationIteration:
    """One calibration round on ``map_in``.

    ``policy_hook`` (if given) is applied to every policy before it acts;
    forcing a zero mean through it gives the residual-identity check.
    """
    dispatcher = dispatcher or LocalDispatcher()
    runner = EpisodeRunner(cfg.setup, map_in, cycles)
    dispatcher.configure(runner)
    hook = policy_hook or (lambda p: p)
    obs_low = (map_in.x_axis.lo, map_in.y_axis.lo)
    obs_high = (map_in.x_axis.hi, map_in.y_axis.hi)
    tcfg = replace(cfg.train, seed=derive_seed(cfg.seed, round_index, 1))
    if init is not None:
        params = replace(init, version=0)
    else:
        params = init_params(derive_seed(cfg.seed, round_index, 0), obs_low, obs_high, hidden=tcfg.hidden,
                             action_scale=cfg.action_scale, init_log_std=tcfg.init_log_std)
    optim = Optimizers(params, tcfg)
    val_seed = derive_seed(cfg.seed, round_index, 2)

    baseline, _ = _validate(runner, cfg.val_cycle, None, val_seed, 0, "map")
    records: list[ValidationRecord] = []
    stats_hist: list[TrainStats] = []
    visits_hist: list[np.ndarray] = []
    stop_reason = ""
    for it in range(1, cfg.iterations + 1):
        plan = make_plan([cfg.cycle], cfg.episodes_per_iteration, derive_seed(cfg.seed, round_index, 3, it))
        acting = hook(params)
        episodes = dispatcher.collect(acting, plan, True)
        good = [ep for ep in episodes if not ep.aborted]
        for ep in episodes:
            if ep.aborted:
                log.warning("episode %d aborted (%s); excluded from training", ep.episode_id, ep.note)
        if not good:
            stop_reason = "all episodes aborted"
            break
        visits_hist.append(visitation(map_in, good))
        new, st = ppo_update(acting, good, tcfg, optim)
        stats_hist.append(st)
        if on_iteration is not None:
            on_iteration(it, st)
        if st.aborted:
            stop_reason = f"training diverged: {st.message}"
            log.error("round %d: %s; keeping last good agent", round_index, stop_reason)
            break
        params = new
        if it % cfg.cadence == 0:
            rec, _ = _validate(runner, cfg.val_cycle, hook(params), val_seed, it, "agent")
            records.append(rec)
            dec = stopping_rule(records, cfg.stop)
            if dec.stop:
                stop_reason = dec.reason
                break
    if not records:
        raise RoundAborted(f"round {round_index} produced no validation record ({stop_reason or 'no iterations'})",
                           partial=stats_hist)

    best_idx = select_best_agent(records)
    best = records[best_idx]
    visits = np.sum(visits_hist[:best.iteration], axis=0)
    dist = distill_to_map(best.params, map_in, visits, cfg.setup.clamp, cfg.visit_threshold, cfg.probe_per_cell)

    # empirical return sensitivity to a uniform shift of the agent's delta by the quantization loss
    q = dist.quantization_loss
    sens = 0.0
    if q > 0:
        for off in (q, -q):
            shifted, _ = _validate(runner, cfg.val_cycle, best.params, val_seed, best.iteration, "shift", off)
            sens = max(sens, abs(shifted.ret - best.ret))
    bound = cfg.sensitivity_margin * sens

    final_runner = EpisodeRunner(cfg.setup, dist.map_after, cycles)
    distilled, _ = _validate(final_runner, cfg.val_cycle, None, val_seed, records[-1].iteration, "distilled")
    return CalibrationIteration(round_index, map_in, dist.map_after, best_idx, records, distilled, dist,
                                stats_hist, visits, stop_reason, bound, baseline, cfg.quantization_bound)


# -- persistence ---------------------------------------------------------------------------------

TRAINING_HEADER = ("iteration", "train_return", "entropy", "clip_fraction", "value_loss", "approx_kl")


def training_csv(ci: CalibrationIteration) -> str:
    rows = [(k + 1, _f(s.mean_return), _f(s.entropy), _f(s.clip_fraction), _f(s.value_loss),
             _f(s.approx_kl)) for k, s in enumerate(ci.train_stats)]
    return csv_text(TRAINING_HEADER, rows)


def validation_csv(ci: CalibrationIteration) -> str:
    rows = [_vrow(ci.baseline)] if ci.baseline is not None else []
    rows += [_vrow(r) for r in ci.records] + [_vrow(ci.distilled)]
    return csv_text(VALIDATION_HEADER, rows)


def distill_summary(ci: CalibrationIteration) -> str:
    gap = abs(ci.distilled.ret - ci.best.ret)
    lines = [
        f"round: {ci.round_index}",
        f"best_iteration: {ci.best.iteration}",
        f"best_return: {ci.best.ret!r}",
        f"distilled_return: {ci.distilled.ret!r}",
        f"map_return_before: {ci.baseline.ret!r}" if ci.baseline else "map_return_before: nan",
        f"quantization_loss: {ci.distill.quantization_loss!r}",
        f"quantization_bound: {ci.quantization_bound!r}",
        f"sensitivity_bound: {ci.sensitivity_bound!r}",
        f"distilled_gap: {gap!r}",
        f"within_bound: {gap <= ci.sensitivity_bound + 1e-9}",
        f"unvisited_cells: {len(ci.distill.unvisited)}",
        f"stop_reason: {ci.stop_reason or 'iterations exhausted'}",
    ]
    return "\n".join(lines) + "\n"


def write_round(out_dir, ci: CalibrationIteration) -> Path:
    d = Path(out_dir) / f"round_{ci.round_index}"
    d.mkdir(parents=True, exist_ok=True)
    maps.save(ci.map_before, d / "map_before.txt")
    maps.save(ci.map_after, d / "map_after.txt")
    atomic_write_bytes(d / "policy_best.bin", to_bytes(ci.best.params))
    atomic_write_text(d / "validation.csv", validation_csv(ci))
    atomic_write_text(d / "training.csv", training_csv(ci))
    atomic_write_text(d / "map_diff.txt", ci.diff.to_text())
    atomic_write_text(d / "distill.txt", distill_summary(ci))
    pr = [ParetoRecord(r.nox_g, r.soot_g, min(r.ret, 0.0), f"{r.label}@{r.iteration}")
          for r in ([ci.baseline] if ci.baseline else []) + ci.records + [ci.distilled]]
    atomic_write_text(d / "pareto.csv", pareto_csv(pr))
    np_vis = csv_text(("x\\y", *[_f(v) for v in ci.map_before.y_axis.breakpoints]),
                      [(_f(x), *[int(c) for c in row]) for x, row in zip(ci.map_before.x_axis.breakpoints, ci.visits)])
    atomic_write_text(d / "visits.csv", np_vis)
    return d


def run_config_toml(cfg: PipelineConfig, extra: dict | None = None) -> str:
    data = {"pipeline": to_dict(cfg)}
    if extra:
        data.update(extra)
    return dump_toml(data)


def calibrate(cfg: PipelineConfig, base_map: LookupMap2D, out_dir=None, cycles: dict[str, DriveCycle] | None = None,
              dispatcher=None, on_round: Callable[[CalibrationIteration], None] | None = None,
              policy_hook=None) -> list[CalibrationIteration]:
    """Run ``cfg.rounds`` rounds, each starting from the previous round's distilled map."""
    if cycles is None:
        cycles = {}
        for cid in {cfg.cycle, cfg.val_cycle}:
            cycles[cid] = load_cycle(cid, cfg.setup.plant.dt)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        atomic_write_text(Path(out_dir) / "run.toml", run_config_toml(cfg))
        maps.save(base_map, Path(out_dir) / "map_initial.txt")
    out = []
    m = base_map
    init = None
    for k in range(1, cfg.rounds + 1):
        ci = run_round(cfg, m, cycles, dispatcher, k, init, policy_hook)
        out.append(ci)
        if out_dir is not None:
            write_round(out_dir, ci)
        if on_round is not None:
            on_round(ci)
        m = ci.map_after
        init = ci.best.params if cfg.warm_start else None
    return out
