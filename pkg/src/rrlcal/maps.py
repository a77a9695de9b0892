"""Two-dimensional calibration maps.

A map is a dense grid of values over two strictly increasing axes of
support points. Lookups interpolate bilinearly and clamp queries that fall
outside the axis range, which is how production ECU tables behave.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

# shortest repr that round-trips exactly; deterministic across platforms
_VALUE_FMT = repr


class MapError(ValueError):
    """Structural problem with a map: bad axes, shape mismatch, bad file."""


class MapParseError(MapError):
    def __init__(self, message: str, line: int | None = None, field: str | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        prefix = f"{', '.join(where)}: " if where else ""
        super().__init__(prefix + message)
        self.line = line
        self.field = field


@dataclass(frozen=True)
class AxisGrid:
    breakpoints: tuple[float, ...]

    def __post_init__(self):
        bp = tuple(float(v) for v in self.breakpoints)
        if len(bp) < 2:
            raise MapError("axis needs at least 2 breakpoints")
        if not all(np.isfinite(bp)):
            raise MapError("axis breakpoints must be finite")
        if any(b <= a for a, b in zip(bp, bp[1:])):
            raise MapError(f"axis breakpoints not strictly increasing: {bp}")
        object.__setattr__(self, "breakpoints", bp)

    def __len__(self) -> int:
        return len(self.breakpoints)

    @property
    def lo(self) -> float:
        return self.breakpoints[0]

    @property
    def hi(self) -> float:
        return self.breakpoints[-1]

    def locate(self, q: float) -> tuple[int, float]:
        """Cell index and fractional position of ``q``, clamped to the axis."""
        bp = self.breakpoints
        if q <= bp[0]:
            return 0, 0.0
        if q >= bp[-1]:
            return len(bp) - 2, 1.0
        # linear scan is faster than bisect for the short axes used here
        i = 0
        while bp[i + 1] < q:
            i += 1
        return i, (q - bp[i]) / (bp[i + 1] - bp[i])


@dataclass(frozen=True)
class LookupMap2D:
    """Value grid over ``x_axis`` x ``y_axis``; ``values[i, j]`` sits at (x_i, y_j)."""

    x_axis: AxisGrid
    y_axis: AxisGrid
    values: np.ndarray
    name: str = "map"
    units: str = ""
    version: str = "0"
    _rows: tuple = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        vals = np.array(self.values, dtype=float)
        if vals.shape != (len(self.x_axis), len(self.y_axis)):
            raise MapError(
                f"value grid shape {vals.shape} does not match axes "
                f"({len(self.x_axis)}, {len(self.y_axis)})"
            )
        if not np.all(np.isfinite(vals)):
            raise MapError("map values must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)
        # plain-float rows make scalar lookups cheap inside the control loop
        object.__setattr__(self, "_rows", tuple(tuple(float(v) for v in r) for r in vals))

    @classmethod
    def from_arrays(cls, x: Sequence[float], y: Sequence[float], values, **meta) -> "LookupMap2D":
        return cls(AxisGrid(tuple(x)), AxisGrid(tuple(y)), np.asarray(values, dtype=float), **meta)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def with_values(self, values, **meta) -> "LookupMap2D":
        kw = dict(name=self.name, units=self.units, version=self.version)
        kw.update(meta)
        return LookupMap2D(self.x_axis, self.y_axis, np.asarray(values, dtype=float), **kw)

    def __eq__(self, other):
        if not isinstance(other, LookupMap2D):
            return NotImplemented
        return (
            self.x_axis == other.x_axis
            and self.y_axis == other.y_axis
            and np.array_equal(self.values, other.values)
            and (self.name, self.units, self.version) == (other.name, other.units, other.version)
        )

    __hash__ = None


def interpolate(m: LookupMap2D, x: float, y: float) -> float:
    """Bilinear lookup with edge clamping."""
    i, fx = m.x_axis.locate(x)
    j, fy = m.y_axis.locate(y)
    r0 = m._rows[i]
    r1 = m._rows[i + 1]
    v00, v01 = r0[j], r0[j + 1]
    v10, v11 = r1[j], r1[j + 1]
    # exact at support points: weights collapse to a single 1.0 term
    if fx == 0.0:
        if fy == 0.0:
            return v00
        if fy == 1.0:
            return v01
        return v00 + (v01 - v00) * fy
    if fx == 1.0:
        if fy == 0.0:
            return v10
        if fy == 1.0:
            return v11
        return v10 + (v11 - v10) * fy
    a = v00 + (v01 - v00) * fy
    b = v10 + (v11 - v10) * fy
    return a + (b - a) * fx


def interpolate_grid(m: LookupMap2D, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    """Vectorised bilinear lookup over the outer product of ``xs`` and ``ys``."""
    xs = np.clip(np.asarray(xs, dtype=float), m.x_axis.lo, m.x_axis.hi)
    ys = np.clip(np.asarray(ys, dtype=float), m.y_axis.lo, m.y_axis.hi)
    bx = np.asarray(m.x_axis.breakpoints)
    by = np.asarray(m.y_axis.breakpoints)
    i = np.clip(np.searchsorted(bx, xs, side="right") - 1, 0, len(bx) - 2)
    j = np.clip(np.searchsorted(by, ys, side="right") - 1, 0, len(by) - 2)
    fx = ((xs - bx[i]) / (bx[i + 1] - bx[i]))[:, None]
    fy = ((ys - by[j]) / (by[j + 1] - by[j]))[None, :]
    v = m.values
    I, J = np.meshgrid(i, j, indexing="ij")
    v00, v01 = v[I, J], v[I, J + 1]
    v10, v11 = v[I + 1, J], v[I + 1, J + 1]
    return (1 - fx) * (1 - fy) * v00 + (1 - fx) * fy * v01 + fx * (1 - fy) * v10 + fx * fy * v11


def bilinear_footprint(m: LookupMap2D, x: float, y: float) -> tuple[tuple[int, int], ...]:
    """Support points with a non-zero bilinear weight at (x, y) after clamping."""
    i, fx = m.x_axis.locate(x)
    j, fy = m.y_axis.locate(y)
    out = []
    for di, wx in ((0, 1.0 - fx), (1, fx)):
        for dj, wy in ((0, 1.0 - fy), (1, fy)):
            if wx > 0.0 and wy > 0.0:
                out.append((i + di, j + dj))
    return tuple(out)


# --------------------------------------------------------------------------
# deltas and diffs


@dataclass(frozen=True)
class DeltaClamp:
    max_abs_delta: float
    max_rel_delta: float

    def __post_init__(self):
        if not (self.max_abs_delta >= 0 and 0 <= self.max_rel_delta <= 1):
            raise MapError("clamp bounds must satisfy max_abs >= 0 and 0 <= max_rel <= 1")

    def bound(self, value: float) -> float:
        return min(self.max_abs_delta, self.max_rel_delta * abs(value))

    def clip(self, delta: float, value: float) -> float:
        b = min(self.max_abs_delta, self.max_rel_delta * abs(value))
        if delta > b:
            return b
        if delta < -b:
            return -b
        return delta


@dataclass
class MapDiffReport:
    delta: np.ndarray
    max_grad_x: float
    max_grad_y: float
    unvisited: frozenset = frozenset()
    clipped: np.ndarray | None = None

    @property
    def rms_change(self) -> float:
        return float(np.sqrt(np.mean(self.delta ** 2)))

    @property
    def max_abs_change(self) -> float:
        return float(np.max(np.abs(self.delta)))

    @property
    def changed_cells(self) -> int:
        return int(np.count_nonzero(self.delta))

    def to_text(self) -> str:
        lines = [
            f"rms_change: {self.rms_change:.6f}",
            f"max_abs_change: {self.max_abs_change:.6f}",
            f"changed_cells: {self.changed_cells}",
            f"max_grad_x: {self.max_grad_x:.6f}",
            f"max_grad_y: {self.max_grad_y:.6f}",
            f"unvisited: {' '.join(f'{i},{j}' for i, j in sorted(self.unvisited))}",
            "delta:",
        ]
        lines += [",".join(f"{v:.6f}" for v in row) for row in self.delta]
        if self.clipped is not None:
            lines.append("clipped:")
            lines += [",".join(f"{v:.6f}" for v in row) for row in self.clipped]
        return "\n".join(lines) + "\n"


def _max_gradients(m: LookupMap2D, delta: np.ndarray) -> tuple[float, float]:
    bx = np.diff(np.asarray(m.x_axis.breakpoints))[:, None]
    by = np.diff(np.asarray(m.y_axis.breakpoints))[None, :]
    gx = np.abs(np.diff(delta, axis=0)) / bx
    gy = np.abs(np.diff(delta, axis=1)) / by
    return float(gx.max(initial=0.0)), float(gy.max(initial=0.0))


def _report(m: LookupMap2D, delta: np.ndarray, unvisited=frozenset(), clipped=None) -> MapDiffReport:
    gx, gy = _max_gradients(m, delta)
    return MapDiffReport(delta, gx, gy, frozenset(unvisited), clipped)


def apply_deltas(m: LookupMap2D, deltas, clamp: DeltaClamp, unvisited=frozenset()):
    """Add clamped per-cell deltas; returns the new map and a report of what changed."""
    d = np.asarray(deltas, dtype=float)
    if d.shape != m.shape:
        raise MapError(f"delta grid shape {d.shape} does not match map shape {m.shape}")
    if not np.all(np.isfinite(d)):
        raise MapError("delta grid must be finite")
    bound = np.minimum(clamp.max_abs_delta, clamp.max_rel_delta * np.abs(m.values))
    applied = np.clip(d, -bound, bound)
    new_values = m.values + applied
    report = _report(m, new_values - m.values, unvisited, clipped=d - applied)
    return m.with_values(new_values), report


def diff(a: LookupMap2D, b: LookupMap2D) -> MapDiffReport:
    if a.x_axis != b.x_axis or a.y_axis != b.y_axis:
        raise MapError("cannot diff maps with different axes")
    return _report(a, b.values - a.values)


def relative_change(a: LookupMap2D, b: LookupMap2D) -> np.ndarray:
    d = diff(a, b).delta
    with np.errstate(divide="ignore", invalid="ignore"):
        return np.where(a.values != 0, d / np.abs(a.values), 0.0)


# --------------------------------------------------------------------------
# text format


def serialize(m: LookupMap2D) -> bytes:
    fmt = _VALUE_FMT
    lines = [
        f"name: {m.name}",
        f"units: {m.units}",
        f"version: {m.version}",
        "x_axis: " + ",".join(fmt(v) for v in m.x_axis.breakpoints),
        "y_axis: " + ",".join(fmt(v) for v in m.y_axis.breakpoints),
    ]
    lines += [",".join(fmt(float(v)) for v in row) for row in m.values]
    return ("\n".join(lines) + "\n").encode("utf-8")


def _floats(text: str, line: int, fieldname: str) -> list[float]:
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        try:
            v = float(tok)
        except ValueError:
            raise MapParseError(f"not a number: {tok!r}", line, fieldname) from None
        if not np.isfinite(v):
            raise MapParseError(f"non-finite value {tok!r}", line, fieldname)
        out.append(v)
    return out


def deserialize(data: bytes | str) -> LookupMap2D:
    text = data.decode("utf-8") if isinstance(data, (bytes, bytearray)) else data
    header: dict[str, tuple[int, str]] = {}
    rows: list[tuple[int, str]] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        key, sep, rest = line.partition(":")
        if sep and key.strip() in ("name", "units", "version", "x_axis", "y_axis"):
            if rows:
                raise MapParseError("header line after value rows", lineno, key.strip())
            header[key.strip()] = (lineno, rest.strip())
        else:
            rows.append((lineno, line))
    for required in ("x_axis", "y_axis"):
        if required not in header:
            raise MapParseError("missing header", field=required)
    axes = {}
    for name in ("x_axis", "y_axis"):
        lineno, txt = header[name]
        bp = _floats(txt, lineno, name)
        try:
            axes[name] = AxisGrid(tuple(bp))
        except MapError as exc:
            raise MapParseError(f"axis order error: {exc}", lineno, name) from None
    nx, ny = len(axes["x_axis"]), len(axes["y_axis"])
    if len(rows) != nx:
        raise MapParseError(f"expected {nx} value rows (one per x breakpoint), found {len(rows)}", field="values")
    values = []
    for lineno, line in rows:
        row = _floats(line, lineno, "values")
        if len(row) != ny:
            raise MapParseError(f"expected {ny} values, found {len(row)}", lineno, "values")
        values.append(row)
    return LookupMap2D(
        axes["x_axis"],
        axes["y_axis"],
        np.array(values),
        name=header.get("name", (0, "map"))[1],
        units=header.get("units", (0, ""))[1],
        version=header.get("version", (0, "0"))[1],
    )


def save(m: LookupMap2D, path) -> None:
    from .io import atomic_write_bytes

    atomic_write_bytes(path, serialize(m))


def load(path) -> LookupMap2D:
    with open(path, "rb") as fh:
        return deserialize(fh.read())
