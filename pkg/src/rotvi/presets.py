"""Named two-dimensional benchmark mixtures.

``PUBLISHED`` holds the parameters exactly as printed for each benchmark.
``get_preset`` builds the :class:`MixtureTarget`; the only difference from
the printed table is ``fig3f``, whose first covariance is printed with
off-diagonal entries ``-0.6`` and ``0.6``. A covariance must be symmetric,
so the preset uses ``-0.6`` in both places.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

from .errors import InputError
from .target import MixtureTarget

I2 = [[1.0, 0.0], [0.0, 1.0]]


def _symmetric(m: float) -> dict:
    return {"weights": [0.5, 0.5], "means": [[-m, -m], [m, m]], "covariances": [I2, I2]}


PUBLISHED = {
    "fig1-m1": _symmetric(1.0),
    "fig1-m2": _symmetric(2.0),
    "fig1-m3": _symmetric(3.0),
    "fig3a": {"weights": [1.0], "means": [[0.0, 0.0]], "covariances": [[[1.8, 1.2], [1.2, 1.0]]]},
    "fig3b": {"weights": [0.4, 0.6], "means": [[-2.5, 0.0], [2.5, 0.0]], "covariances": [I2, I2]},
    "fig3c": {"weights": [0.5, 0.5], "means": [[-2.5, -1.5], [2.0, 1.0]], "covariances": [I2, I2]},
    "fig3d": {"weights": [0.5, 0.5], "means": [[-8.0, -8.0], [8.0, 8.0]], "covariances": [I2, I2]},
    "fig3e": {
        "weights": [0.5, 0.5],
        "means": [[-2.0, -2.0], [2.5, 2.0]],
        "covariances": [[[1.8, -0.6], [-0.6, 1.2]], [[0.7, 0.0], [0.0, 1.1]]],
    },
    "fig3f": {
        "weights": [0.5, 0.5],
        "means": [[-5.0, -5.0], [2.5, 2.0]],
        "covariances": [[[2.0, -0.6], [0.6, 2.0]], [[0.7, 0.0], [0.0, 1.1]]],
    },
    "fig4": _symmetric(3.0),
}

NOTES = {
    "fig1-m1": "symmetric mixture, m = 1: modes overlap, no collapse expected",
    "fig1-m2": "symmetric mixture, m = 2",
    "fig1-m3": "symmetric mixture, m = 3: MFVI collapses to one mode",
    "fig3a": "single correlated Gaussian: MFVI underdispersed, RoVI exact",
    "fig3b": "modes aligned with the first axis: every method recovers both",
    "fig3c": "misaligned modes: MFVI collapses, RoVI recovers both",
    "fig3d": "far-apart diagonal modes: MFVI collapses, RoVI and LMC recover both",
    "fig3e": "unequal covariances",
    "fig3f": "far-apart modes with unequal covariances: all methods collapse",
    "fig4": "symmetric mixture, m = 3 (marginal comparison)",
}


@dataclass(frozen=True)
class ExperimentPreset:
    name: str
    target: MixtureTarget
    notes: str


def preset_names() -> list:
    return list(PUBLISHED)


def preset_spec(name: str) -> dict:
    """Parameters used to build the preset (a copy; safe to modify)."""
    if name not in PUBLISHED:
        raise InputError(f"unknown preset {name!r}; choose from {', '.join(PUBLISHED)}")
    spec = copy.deepcopy(PUBLISHED[name])
    if name == "fig3f":
        spec["covariances"][0] = [[2.0, -0.6], [-0.6, 2.0]]
    return spec


def get_preset(name: str) -> ExperimentPreset:
    return ExperimentPreset(name, MixtureTarget.from_dict(preset_spec(name)), NOTES[name])
