import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rrlcal import maps
from rrlcal.maps import AxisGrid, DeltaClamp, LookupMap2D, MapError, MapParseError


def unit_cell(v00=0.0, v01=0.0, v10=0.0, v11=10.0):
    return LookupMap2D.from_arrays([0.0, 1.0], [0.0, 1.0], [[v00, v01], [v10, v11]])


@st.composite
def random_maps(draw, max_n=7):
    nx = draw(st.integers(2, max_n))
    ny = draw(st.integers(2, max_n))
    fin = dict(allow_nan=False, allow_infinity=False)
    x0 = draw(st.floats(-1e4, 1e4, **fin))
    y0 = draw(st.floats(-1e4, 1e4, **fin))
    dx = draw(st.lists(st.floats(1e-3, 1e3, **fin), min_size=nx - 1, max_size=nx - 1))
    dy = draw(st.lists(st.floats(1e-3, 1e3, **fin), min_size=ny - 1, max_size=ny - 1))
    x = np.concatenate([[x0], x0 + np.cumsum(dx)])
    y = np.concatenate([[y0], y0 + np.cumsum(dy)])
    vals = draw(st.lists(st.floats(-1e6, 1e6, **fin), min_size=nx * ny, max_size=nx * ny))
    return LookupMap2D.from_arrays(x, y, np.reshape(vals, (nx, ny)), name="m", units="mg", version="1")


def test_axis_validation():
    with pytest.raises(MapError):
        AxisGrid((1.0,))
    with pytest.raises(MapError):
        AxisGrid((0.0, 0.0))
    with pytest.raises(MapError):
        AxisGrid((0.0, float("nan")))
    with pytest.raises(MapError):
        LookupMap2D.from_arrays([0, 1], [0, 1], [[0, 1, 2], [3, 4, 5]])
    with pytest.raises(MapError):
        LookupMap2D.from_arrays([0, 1], [0, 1], [[0, 1], [2, float("inf")]])


def test_unit_cell_centre():
    assert maps.interpolate(unit_cell(), 0.5, 0.5) == 2.5


def test_clamp_beyond_last_breakpoint():
    m = LookupMap2D.from_arrays([0, 1, 2], [0, 5, 10], np.arange(9.0).reshape(3, 3))
    for y in (0.0, 5.0, 10.0):
        edge = maps.interpolate(m, 2.0, y)
        assert maps.interpolate(m, 7.5, y) == edge
    assert maps.interpolate(m, -3.0, 2.5) == maps.interpolate(m, 0.0, 2.5)


def test_values_are_read_only():
    m = unit_cell()
    with pytest.raises(ValueError):
        m.values[0, 0] = 1.0


@settings(max_examples=200, deadline=None)
@given(random_maps())
def test_exact_at_support_points(m):
    for i, x in enumerate(m.x_axis.breakpoints):
        for j, y in enumerate(m.y_axis.breakpoints):
            assert maps.interpolate(m, x, y) == m.values[i, j]


@settings(max_examples=100, deadline=None)
@given(random_maps(), st.floats(0, 1), st.floats(0, 1))
def test_continuity_lipschitz(m, fx, fy):
    x = m.x_axis.lo + fx * (m.x_axis.hi - m.x_axis.lo)
    y = m.y_axis.lo + fy * (m.y_axis.hi - m.y_axis.lo)
    v = m.values
    gx = np.max(np.abs(np.diff(v, axis=0)) / np.diff(m.x_axis.breakpoints)[:, None])
    gy = np.max(np.abs(np.diff(v, axis=1)) / np.diff(m.y_axis.breakpoints)[None, :])
    for eps in (1e-3, 1e-6):
        d = abs(maps.interpolate(m, x + eps, y + eps) - maps.interpolate(m, x, y))
        assert d <= (gx + gy) * eps * (1 + 1e-6) + 1e-9 * (1 + np.max(np.abs(v)))


def test_interpolate_grid_matches_scalar():
    rng = np.random.default_rng(0)
    m = LookupMap2D.from_arrays([0, 1, 3, 7], [0, 2, 4], rng.normal(size=(4, 3)))
    xs = np.linspace(-1, 8, 17)
    ys = np.linspace(-1, 5, 11)
    g = maps.interpolate_grid(m, xs, ys)
    ref = np.array([[maps.interpolate(m, x, y) for y in ys] for x in xs])
    np.testing.assert_allclose(g, ref, rtol=0, atol=1e-12)


def test_apply_deltas_examples():
    m = LookupMap2D.from_arrays([0, 1], [0, 1], [[200.0, 200.0], [200.0, 200.0]])
    clamp = DeltaClamp(max_abs_delta=50.0, max_rel_delta=0.1)
    new, rep = maps.apply_deltas(m, [[100.0, -5.0], [0.0, 0.0]], clamp)
    assert new.values[0, 0] == 220.0
    assert new.values[0, 1] == 195.0
    assert rep.clipped[0, 0] == 80.0 and rep.clipped[0, 1] == 0.0
    same, rep0 = maps.apply_deltas(m, np.zeros((2, 2)), clamp)
    assert same == m and rep0.changed_cells == 0 and rep0.max_abs_change == 0.0
    with pytest.raises(MapError):
        maps.apply_deltas(m, np.zeros((3, 2)), clamp)


@settings(max_examples=100, deadline=None)
@given(random_maps(), st.floats(0, 100), st.floats(0, 1), st.integers(0, 2**31))
def test_apply_deltas_never_exceeds_bound(m, amax, rmax, seed):
    d = np.random.default_rng(seed).normal(0, 200, size=m.shape)
    clamp = DeltaClamp(amax, rmax)
    new, rep = maps.apply_deltas(m, d, clamp)
    bound = np.minimum(amax, rmax * np.abs(m.values))
    assert np.all(np.abs(rep.delta) <= bound * (1 + 1e-12) + 1e-9)
    zero, _ = maps.apply_deltas(m, d, DeltaClamp(0.0, 0.0))
    assert zero == m


def test_clamp_scalar():
    c = DeltaClamp(50.0, 0.1)
    assert c.bound(200.0) == 20.0
    assert c.bound(-1000.0) == 50.0
    assert c.clip(100.0, 200.0) == 20.0
    assert c.clip(-100.0, 200.0) == -20.0
    assert c.clip(5.0, 200.0) == 5.0
    with pytest.raises(MapError):
        DeltaClamp(-1.0, 0.1)


def test_diff_examples():
    rng = np.random.default_rng(1)
    m = LookupMap2D.from_arrays([0, 1, 2], [0, 1, 2], rng.uniform(100, 900, (3, 3)))
    assert maps.diff(m, m).changed_cells == 0
    v = m.values.copy()
    v[1, 2] += 3.0
    rep = maps.diff(m, m.with_values(v))
    assert rep.max_abs_change == pytest.approx(3.0)
    assert rep.changed_cells == 1
    rel = maps.relative_change(m, m.with_values(m.values * 1.4))
    np.testing.assert_allclose(rel, 0.4, rtol=1e-12)
    other = LookupMap2D.from_arrays([0, 1, 3], [0, 1, 2], m.values)
    with pytest.raises(MapError):
        maps.diff(m, other)


def test_report_text_lists_stats():
    m = unit_cell(v00=100.0)
    _, rep = maps.apply_deltas(m, [[1.0, 0.0], [0.0, 0.0]], DeltaClamp(10, 1), unvisited={(1, 1)})
    txt = rep.to_text()
    assert "changed_cells: 1" in txt and "unvisited: 1,1" in txt


@settings(max_examples=1000, deadline=None)
@given(random_maps())
def test_serialize_round_trip(m):
    back = maps.deserialize(maps.serialize(m))
    assert back == m
    assert maps.serialize(back) == maps.serialize(m)


def test_round_trip_file(tmp_path):
    m = maps.LookupMap2D.from_arrays([800, 1600], [0, 10], [[1 / 3, 2 / 3], [math.pi, 1e-300]], name="a")
    p = tmp_path / "m.txt"
    maps.save(m, p)
    assert maps.load(p) == m


def _text(x="0,1", y="0,1", rows=("1,2", "3,4")):
    return "\n".join(["name: t", "units: u", "version: 1", f"x_axis: {x}", f"y_axis: {y}", *rows]) + "\n"


def test_parse_errors_carry_context():
    with pytest.raises(MapParseError, match="axis order") as ei:
        maps.deserialize(_text(x="1,0"))
    assert ei.value.field == "x_axis" and ei.value.line == 4
    with pytest.raises(MapParseError, match="expected 2 values"):
        maps.deserialize(_text(rows=("1,2,3", "3,4,5")))
    with pytest.raises(MapParseError, match="value rows"):
        maps.deserialize(_text(rows=("1,2",)))
    with pytest.raises(MapParseError, match="not a number") as ei:
        maps.deserialize(_text(rows=("1,x", "3,4")))
    assert ei.value.line == 6
    with pytest.raises(MapParseError, match="missing header"):
        maps.deserialize("x_axis: 0,1\n1,2\n3,4\n")
    with pytest.raises(MapParseError):
        maps.deserialize(_text(rows=("1,nan", "3,4")))
