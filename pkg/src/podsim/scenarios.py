"""Ready-made experiment configs (as un-normalised dicts).

``boundary_vortex`` is the load-imbalance stress case: a fast vortex whose
axis sits just off the x = 0.5 face, in the lower-z, lower-y octant pair,
inside a slow rotation of the whole domain.  With the (2, 2, 2) layout its
particles circle between blocks 0 and 4 until they run out of steps.
"""

from __future__ import annotations

import copy

from podsim.config import normalize

VORTEX_CENTER = [0.52, 0.25, 0.25]
VORTEX_BLOCKS = [0, 4]


def _base(name: str, field: dict, seeds: list, **extra) -> dict:
    cfg = {
        "version": 1,
        "name": name,
        "domain": {"lower": [0.0, 0.0, 0.0], "upper": [1.0, 1.0, 1.0]},
        "ranks": 8,
        "block_dims": 32,
        "field": field,
        "seeds": seeds,
        "rng_seed": 1,
        "max_steps": 1000,
        "scheduler": {"mode": "deterministic"},
        "mitigation": {"kind": "none"},
        "output": {"dir": f"runs/{name}"},
    }
    cfg.update(extra)
    return cfg


def boundary_vortex(omega: float = 40.0, box_count: int = 100, random_count: int = 100) -> dict:
    field = {"kind": "composite", "components": [
        {"kind": "cylindrical", "axis": "z", "center": [0.5, 0.5, 0.5], "omega": 1.0},
        {"kind": "boundary_vortex", "center": list(VORTEX_CENTER), "omega": omega, "axis": "z",
         "core_radius": 0.2, "taper": 0.05, "half_length": 0.15, "plane_axis": "x",
         "plane_position": 0.5, "delta": 0.05},
    ]}
    seeds = [
        {"kind": "per_block_random", "count": random_count},
        {"kind": "box_fraction", "count": box_count, "fraction": 0.2,
         "center": list(VORTEX_CENTER), "per_block": True},
    ]
    return _base("boundary_vortex", field, seeds, max_steps=2000)


def sink(k: float = 10.0, count: int = 50) -> dict:
    field = {"kind": "sink", "center": [0.5, 0.5, 0.5], "k": k}
    return _base("sink", field, [{"kind": "per_block_random", "count": count}], max_steps=1000)


def cylindrical(count: int = 50) -> dict:
    field = {"kind": "cylindrical", "axis": "z", "center": [0.5, 0.5, 0.5], "omega": 1.0}
    return _base("cylindrical", field, [{"kind": "per_block_random", "count": count}],
                 max_steps=500)


def outflow(count: int = 50) -> dict:
    field = {"kind": "outflow", "drift": [1.0, 0.3, 0.1]}
    return _base("outflow", field, [{"kind": "per_block_random", "count": count}], max_steps=1000)


PRESETS = {"boundary_vortex": boundary_vortex, "sink": sink, "cylindrical": cylindrical,
           "outflow": outflow}


def preset(name: str, **changes) -> dict:
    """Normalised preset config with top-level keys replaced by ``changes``."""
    if name not in PRESETS:
        raise KeyError(f"unknown scenario {name!r} (have {', '.join(PRESETS)})")
    raw = PRESETS[name]()
    raw.update(copy.deepcopy(changes))
    return normalize(raw, f"<preset {name}>")
