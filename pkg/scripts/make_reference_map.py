"""Regenerate the shipped reference air-mass map.

The reference is the steady-state grid-search optimum on the nominal plant,
clipped to a plausible band, smoothed with a 3x3 mean and rounded to 5 mg.
It stands in for an expert calibration; demo runs detune it.
"""

import sys
from pathlib import Path

import numpy as np

from rrlcal import maps
from rrlcal.cycles import EpisodeSetup
from rrlcal.pipeline import grid_search_oracle

X = [800.0, 1100.0, 1400.0, 1700.0, 2000.0, 2500.0, 3000.0, 4000.0]
Y = [0.0, 4.0, 8.0, 12.0, 16.0, 20.0, 30.0, 45.0]


def main(out: str) -> None:
    flat = maps.LookupMap2D.from_arrays(X, Y, np.full((len(X), len(Y)), 500.0),
                                        name="air_setpoint", units="mg/stroke")
    opt = np.clip(grid_search_oracle(flat, EpisodeSetup()).values, 300.0, 950.0)
    padded = np.pad(opt, 1, mode="edge")
    smooth = sum(padded[1 + di:1 + di + len(X), 1 + dj:1 + dj + len(Y)]
                 for di in (-1, 0, 1) for dj in (-1, 0, 1)) / 9.0
    ref = np.round(smooth / 5.0) * 5.0
    maps.save(maps.LookupMap2D.from_arrays(X, Y, ref, name="air_setpoint", units="mg/stroke", version="reference"),
              out)


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else str(Path(__file__).parents[1] / "src/rrlcal/data/air_setpoint_reference.txt"))
