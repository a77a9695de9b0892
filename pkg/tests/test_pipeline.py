from dataclasses import replace

import numpy as np
import pytest

from rrlcal import maps
from rrlcal.cli import reference_map
from rrlcal.cycles import EpisodeSetup, parse_cycle
from rrlcal.maps import DeltaClamp, LookupMap2D
from rrlcal.pipeline import (
    ContractError,
    ParetoRecord,
    PipelineConfig,
    PITemplate,
    PSOConfig,
    StopRule,
    ValidationRecord,
    calibrate,
    distill_to_map,
    pareto_csv,
    pareto_report,
    pi_observations,
    pso_fit,
    pso_minimize,
    quantization_loss,
    run_round,
    select_best_agent,
    stopping_rule,
    training_csv,
    validation_csv,
    visitation,
)
from rrlcal.rl import Episode, TrainConfig, init_params, to_bytes


def rec(it, ret, ent=1.0):
    return ValidationRecord(it, ret, ent, 0.1, 0.01, 20.0, 7.0, 0.5)


# -- best agent ------------------------------------------------------------------------

def test_select_best_examples():
    assert select_best_agent([rec(10, -840), rec(20, -620), rec(30, -700)]) == 1
    assert select_best_agent([rec(10, -5, 1.2), rec(20, -5, 0.8)]) == 1
    assert select_best_agent([rec(10, -5, 0.8), rec(20, -5, 0.8)]) == 0
    assert select_best_agent([rec(10, -3)]) == 0
    with pytest.raises(ValueError):
        select_best_agent([])


# -- stopping rule -----------------------------------------------------------------------

def hist(entropies, returns):
    return [rec(10 * (k + 1), r, e) for k, (e, r) in enumerate(zip(entropies, returns))]


def test_stop_flat_entropy_improving_returns_continues():
    d = stopping_rule(hist([1.0] * 4, [-400, -300, -200, -100]))
    assert not d.stop


def test_stop_needs_both_indicators():
    rule = StopRule(window=4, entropy_slope_tol=0.01, return_std_rel=0.05)
    rising = [1.0, 1.5, 2.0, 2.5]           # slope 0.05 per iteration
    unstable = [-200, -300, -150, -320]
    stable = [-200, -201, -199, -200]
    d = stopping_rule(hist(rising, unstable), rule)
    assert d.stop and "entropy-rise" in d.reason and "instability" in d.reason
    assert not stopping_rule(hist(rising, stable), rule).stop
    assert not stopping_rule(hist([2.5, 2.0, 1.5, 1.0], unstable), rule).stop
    assert not stopping_rule(hist(rising[:3], unstable[:3]), rule).stop
    assert not stopping_rule(hist(rising, unstable), replace(rule, enabled=False)).stop


def test_stop_uses_only_the_window():
    rule = StopRule(window=3)
    h = hist([5.0, 1.0, 1.0, 1.0], [-1000, -100, -100, -100])
    assert not stopping_rule(h, rule).stop
    with pytest.raises(ValueError):
        StopRule(window=1)


# -- Pareto ----------------------------------------------------------------------------------

def test_pareto_examples():
    pts = [ParetoRecord(1, 2, -1), ParetoRecord(2, 1, -1), ParetoRecord(2, 2, -1)]
    allp, front = pareto_report(pts)
    assert allp == pts and front == [(1, 2), (2, 1)]
    assert pareto_report([ParetoRecord(3, 3, -2)])[1] == [(3, 3)]
    assert pareto_report([ParetoRecord(1, 1, -1), ParetoRecord(1, 1, -2)])[1] == [(1, 1)]
    txt = pareto_csv(pts)
    assert txt.splitlines()[0] == "label,nox_g,soot_g,return,on_frontier"
    assert [line.split(",")[-1] for line in txt.splitlines()[1:]] == ["1", "1", "0"]
    with pytest.raises(ValueError):
        ParetoRecord(-1, 0, -1)
    with pytest.raises(ValueError):
        ParetoRecord(1, 1, 0.5)


# -- distillation ------------------------------------------------------------------------------

X = [800.0, 1400.0, 2000.0, 3000.0]
Y = [0.0, 10.0, 20.0, 40.0]
M = LookupMap2D.from_arrays(X, Y, np.full((4, 4), 500.0))
CLAMP = DeltaClamp(100.0, 0.12)
ALL = np.full((4, 4), 100)


def shaped_policy(hidden, policy_layers, scale=1.0):
    p = init_params(0, (800.0, 0.0), (3000.0, 40.0), hidden=hidden, action_scale=scale)
    return replace(p, policy=tuple((np.array(w, float), np.array(b, float)) for w, b in policy_layers))


def linear_policy(a, b, c):
    # mean = a*z1 + b*z2 + c in normalized inputs
    return shaped_policy((), [([[a], [b]], [c])])


def test_zero_policy_zero_delta():
    p = init_params(1, (800.0, 0.0), (3000.0, 40.0), action_scale=60.0)
    d = distill_to_map(p, M, ALL, CLAMP)
    assert np.all(d.delta == 0.0) and d.map_after == M and d.quantization_loss == 0.0


def test_linear_policy_is_representable():
    d = distill_to_map(linear_policy(12.0, -7.0, 3.0), M, ALL, CLAMP)
    assert d.quantization_loss < 1e-9
    z1 = 2 * (np.array(X) - 800) / 2200 - 1
    z2 = 2 * (np.array(Y) - 0) / 40 - 1
    np.testing.assert_allclose(d.raw, 12 * z1[:, None] - 7 * z2[None, :] + 3, atol=1e-12)


def test_ridge_quantization_matches_brute_force():
    w, b, c = (3.0, -2.0), 0.4, 40.0
    p = shaped_policy((1,), [([[w[0]], [w[1]]], [b]), ([[c]], [0.0])])

    def f(x, y):
        z1 = 2 * (x - 800) / 2200 - 1
        z2 = 2 * y / 40 - 1
        return c * np.tanh(w[0] * z1 + w[1] * z2 + b)

    support = np.array([[f(x, y) for y in Y] for x in X])
    grid_map = M.with_values(support)
    def probe(bp):
        pts = [bp[i] + (bp[i + 1] - bp[i]) * k / 8 for i in range(len(bp) - 1) for k in range(8)]
        return pts + [bp[-1]]

    worst = max(abs(f(xs, ys) - maps.interpolate(grid_map, xs, ys)) for xs in probe(X) for ys in probe(Y))
    d = distill_to_map(p, M, ALL, CLAMP, probe_per_cell=8)
    np.testing.assert_allclose(d.raw, support, atol=1e-12)
    assert d.quantization_loss == pytest.approx(worst, abs=1e-9)
    assert worst > 1.0


def test_unvisited_cells_unchanged_and_clamp_binds():
    p = linear_policy(500.0, 500.0, 200.0)  # far outside the clamp
    visits = ALL.copy()
    visits[0, :] = 0
    visits[3, 3] = 9
    d = distill_to_map(p, M, visits, CLAMP, threshold=10)
    assert np.all(d.map_after.values[0, :] == M.values[0, :])
    assert d.map_after.values[3, 3] == 500.0
    assert (3, 3) in d.unvisited and (0, 2) in d.unvisited
    bound = np.minimum(CLAMP.max_abs_delta, CLAMP.max_rel_delta * M.values)
    assert np.all(np.abs(d.map_after.values - M.values) <= bound + 1e-12)
    assert np.max(d.delta) == pytest.approx(60.0)


def test_normalization_mismatch_is_contract_error():
    p = init_params(0, (0.0, 0.0), (1.0, 1.0))
    with pytest.raises(ContractError):
        distill_to_map(p, M, ALL, CLAMP)
    with pytest.raises(ContractError):
        distill_to_map(linear_policy(1, 1, 1), M, np.zeros((3, 3)), CLAMP)


def test_visitation_counts_footprints():
    z = np.zeros(2)
    ep = Episode(np.zeros((2, 2)), np.zeros((2, 2)), z, z, z + 1, z, z, np.array([False, True]),
                 diagnostics={"n_eng": np.array([1400.0, 1700.0]), "m_inj_tot": np.array([10.0, 15.0])})
    v = visitation(M, [ep])
    # (1400, 10) sits on a support point; (1700, 15) is mid-cell
    assert v[1, 1] == 2
    assert v[2, 2] == 1 and v[1, 2] == 1 and v[2, 1] == 1
    assert v.sum() == 5
    assert len(maps.bilinear_footprint(M, 5000.0, -3.0)) == 1


def test_quantization_loss_zero_for_matching_grid():
    p = linear_policy(0.0, 0.0, 5.0)
    assert quantization_loss(p, np.full((4, 4), 5.0), M) < 1e-12


# -- PSO ------------------------------------------------------------------------------------------

def test_pso_convex_bowl():
    r = pso_minimize(lambda p: (p[0] - 1.3) ** 2 + 2.0 * (p[1] + 0.7) ** 2, [(-5, 5), (-5, 5)],
                     PSOConfig(iterations=200, seed=0))
    assert np.max(np.abs(r.x - [1.3, -0.7])) < 1e-6
    assert len(r.history) == 201 and all(np.diff(r.history) <= 0)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_pso_rosenbrock(seed):
    rb = lambda p: (1 - p[0]) ** 2 + 100 * (p[1] - p[0] ** 2) ** 2  # noqa: E731
    r = pso_minimize(rb, [(-5, 5), (-5, 5)], PSOConfig(seed=seed))
    assert r.f < 1e-3


def test_pso_is_deterministic_and_bounded():
    f = lambda p: float(np.sum(p ** 2))  # noqa: E731
    a = pso_minimize(f, [(1, 2), (-3, -2)], PSOConfig(iterations=30, seed=4))
    b = pso_minimize(f, [(1, 2), (-3, -2)], PSOConfig(iterations=30, seed=4))
    assert a.history == b.history and np.array_equal(a.x, b.x)
    assert 1 <= a.x[0] <= 2 and -3 <= a.x[1] <= -2
    with pytest.raises(ValueError):
        pso_minimize(f, [(1, 1)])


def test_pso_recovers_pi_gains():
    rng = np.random.default_rng(0)
    dt = 0.01
    errors = np.cumsum(rng.normal(0, 0.1, 2000))
    obs = pi_observations(errors, dt)
    # the data generator: an independent discrete PI with kp 0.5, ki 0.1
    integ, target = 0.0, []
    for e in errors:
        integ += e * dt
        target.append(0.5 * e + 0.1 * integ)
    r = pso_fit(PITemplate(), list(zip(obs, target)), [(0.0, 2.0), (0.0, 2.0)], PSOConfig(seed=0))
    assert abs(r.x[0] - 0.5) <= 0.005 and abs(r.x[1] - 0.1) <= 0.001
    with pytest.raises(ValueError):
        pso_fit(PITemplate(), [], [(0, 1), (0, 1)])


# -- rounds -----------------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def mini_cycles():
    c = parse_cycle("time_s,speed_kmh\n0,0\n2,15\n4,30\n6,30\n8,15\n10,0\n", "mini", dt=0.01)
    return {"mini": c}


def small_cfg(**kw):
    base = dict(rounds=1, iterations=40, cadence=10, episodes_per_iteration=2, cycle="mini", seed=3,
                train=TrainConfig(epochs=2, minibatch_size=64, hidden=(8,)), stop=StopRule(enabled=False))
    base.update(kw)
    return PipelineConfig(**base)


def detuned():
    return reference_map().with_values(reference_map().values * 1.4, version="detuned")


def test_cadence_gives_four_records_plus_final(mini_cycles):
    ci = run_round(small_cfg(), detuned(), mini_cycles)
    assert [r.iteration for r in ci.records] == [10, 20, 30, 40]
    assert ci.distilled.label == "distilled"
    assert len(validation_csv(ci).splitlines()) == 1 + 1 + 4 + 1
    assert len(ci.train_stats) == 40
    assert ci.best is ci.records[ci.best_index]
    # invariant: map after = apply_deltas(map before, distilled deltas)
    again, _ = maps.apply_deltas(ci.map_before, ci.distill.delta, EpisodeSetup().clamp)
    assert again == ci.map_after
    bound = np.minimum(100.0, 0.12 * np.abs(ci.map_before.values))
    assert np.all(np.abs(ci.map_after.values - ci.map_before.values) <= bound + 1e-9)
    for i, j in ci.distill.unvisited:
        assert ci.map_after.values[i, j] == ci.map_before.values[i, j]


def test_zero_policy_round_is_identity(mini_cycles):
    cfg = small_cfg(iterations=4, cadence=2)
    ci = run_round(cfg, detuned(), mini_cycles, policy_hook=lambda p: p.zeroed_mean())
    assert ci.map_after == ci.map_before
    for r in ci.records + [ci.distilled]:
        assert (r.ret, r.nox_g, r.soot_g, r.mean_hp_egr) == (
            ci.baseline.ret, ci.baseline.nox_g, ci.baseline.soot_g, ci.baseline.mean_hp_egr)
    assert ci.distill.quantization_loss == 0.0


def test_round_replayable(mini_cycles):
    cfg = small_cfg(iterations=6, cadence=3)
    a = run_round(cfg, detuned(), mini_cycles)
    b = run_round(cfg, detuned(), mini_cycles)
    assert validation_csv(a) == validation_csv(b)
    assert training_csv(a) == training_csv(b)
    assert maps.serialize(a.map_after) == maps.serialize(b.map_after)
    assert to_bytes(a.best.params) == to_bytes(b.best.params)
    c = run_round(replace(cfg, seed=4), detuned(), mini_cycles)
    assert training_csv(c) != training_csv(a)


def test_calibrate_writes_round_dirs(tmp_path, mini_cycles):
    cfg = small_cfg(rounds=2, iterations=2, cadence=1)
    out = calibrate(cfg, detuned(), tmp_path, mini_cycles)
    assert len(out) == 2 and out[1].map_before == out[0].map_after
    for k in (1, 2):
        d = tmp_path / f"round_{k}"
        for name in ("map_before.txt", "map_after.txt", "policy_best.bin", "validation.csv", "training.csv",
                     "map_diff.txt", "distill.txt", "pareto.csv", "visits.csv"):
            assert (d / name).exists(), name
    assert (tmp_path / "run.toml").exists()
    assert maps.load(tmp_path / "round_2" / "map_after.txt") == out[1].map_after


def test_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(cadence=0)
    with pytest.raises(ValueError):
        PipelineConfig(rounds=0)
