"""Experiment configuration files.

A config is one YAML document::

    version: 1
    name: boundary_vortex
    domain: {lower: [0, 0, 0], upper: [1, 1, 1]}
    ranks: 8                  # or a list, e.g. [1, 2, 4, 8]
    block_dims: 32            # or [nx, ny, nz]
    field: {kind: cylindrical, axis: z, center: [0.5, 0.5, 0.5], omega: 1.0}
    seeds:
      - {kind: per_block_random, count: 200}
    rng_seed: 1
    max_steps: 1000           # or a list
    step_size: null           # default: a quarter of the grid spacing
    tolerances: {v_zero: 1.0e-10, eps_push_rel: 1.0e-6, eps_bisect_rel: 1.0e-8, bisection: true}
    scheduler:
      mode: deterministic     # or concurrent
      attribution: equal      # or group
      costs: {cost_per_step: 1.0e-6, ...}
    mitigation: {kind: none}  # duplicate | merge | early_terminate
    trace: {level: full, track: null}
    output: {dir: runs/example}

A list under ``ranks`` or ``max_steps`` expands into a matrix of runs.
Mitigations: ``{kind: duplicate, blocks: [0, 1], ranks: all}``,
``{kind: merge, groups: [[0, 4]], host: null}``,
``{kind: early_terminate, window: 2}``.
"""

from __future__ import annotations

import copy
import hashlib
import itertools
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from podsim.decomp import SeedKind, SeedSpec
from podsim.field import AnalyticField
from podsim.runtime import Attribution, CostModel, SchedulerMode

VERSION = 1
DEFAULT_MAX_STEPS = (50, 100, 500, 1000, 2000)
MITIGATIONS = ("none", "duplicate", "merge", "early_terminate")

_TOP_KEYS = {"version", "name", "domain", "ranks", "block_dims", "field", "seeds", "rng_seed",
             "max_steps", "step_size", "tolerances", "scheduler", "mitigation", "trace", "output"}
_TOL_KEYS = {"v_zero", "eps_push_rel", "eps_bisect_rel", "bisection", "max_bisect"}
_SEED_KEYS = {"kind", "count", "rng_seed", "fraction", "center", "start", "end", "origin", "u",
              "v", "per_block"}


class ConfigError(ValueError):
    """Invalid configuration; the message carries ``file:line: field:``."""


def _mark_index(node, path=()):
    """Map key paths to 1-based source lines from a composed YAML node."""
    out = {path: node.start_mark.line + 1}
    if isinstance(node, yaml.MappingNode):
        for k, v in node.value:
            key = k.value
            out[path + (key,)] = k.start_mark.line + 1
            for sub, line in _mark_index(v, path + (key,)).items():
                out.setdefault(sub, line)
    elif isinstance(node, yaml.SequenceNode):
        for i, v in enumerate(node.value):
            for sub, line in _mark_index(v, path + (i,)).items():
                out.setdefault(sub, line)
    return out


class _Checker:
    def __init__(self, source: str, lines: dict):
        self.source = source
        self.lines = lines

    def fail(self, path, msg):
        line = None
        p = tuple(path)
        while line is None and p is not None:
            line = self.lines.get(p)
            p = p[:-1] if p else None
        where = f"{self.source}:{line}" if line else self.source
        field = ".".join(str(x) for x in path) or "<root>"
        raise ConfigError(f"{where}: {field}: {msg}")

    def get(self, d, key, path, kind, default=None, required=False):
        if key not in d or d[key] is None:
            if required:
                self.fail(path, f"missing required key '{key}'")
            return default
        val = d[key]
        p = list(path) + [key]
        if kind == "int":
            if isinstance(val, bool) or not isinstance(val, int):
                self.fail(p, f"expected an integer, got {val!r}")
        elif kind == "number":
            if isinstance(val, bool) or not isinstance(val, (int, float)):
                self.fail(p, f"expected a number, got {val!r}")
            val = float(val)
        elif kind == "bool":
            if not isinstance(val, bool):
                self.fail(p, f"expected true/false, got {val!r}")
        elif kind == "str":
            if not isinstance(val, str):
                self.fail(p, f"expected a string, got {val!r}")
        elif kind == "vec3":
            if (not isinstance(val, list) or len(val) != 3
                    or any(isinstance(x, bool) or not isinstance(x, (int, float)) for x in val)):
                self.fail(p, f"expected a list of three numbers, got {val!r}")
            val = [float(x) for x in val]
        elif kind == "dict":
            if not isinstance(val, dict):
                self.fail(p, f"expected a mapping, got {val!r}")
        return val

    def unknown(self, d, allowed, path):
        extra = sorted(set(d) - set(allowed))
        if extra:
            self.fail(list(path) + [extra[0]], f"unknown key (allowed: {', '.join(sorted(allowed))})")


def _int_list(ck, raw, key, path, minimum=1):
    vals = raw if isinstance(raw, list) else [raw]
    if not vals:
        ck.fail(path + [key], "empty list")
    for i, v in enumerate(vals):
        if isinstance(v, bool) or not isinstance(v, int) or v < minimum:
            ck.fail(path + [key] + ([i] if isinstance(raw, list) else []),
                    f"expected integer(s) >= {minimum}, got {v!r}")
    return vals


def normalize(raw, source: str = "<config>", lines: dict = None) -> dict:
    """Validate a parsed document and fill defaults; returns a plain dict."""
    ck = _Checker(source, lines or {})
    if not isinstance(raw, dict):
        ck.fail([], "top level must be a mapping")
    ck.unknown(raw, _TOP_KEYS, [])
    version = ck.get(raw, "version", [], "int", required=True)
    if version != VERSION:
        ck.fail(["version"], f"unsupported version {version} (expected {VERSION})")
    out = {"version": VERSION, "name": ck.get(raw, "name", [], "str", default="run")}

    dom = ck.get(raw, "domain", [], "dict", default={})
    ck.unknown(dom, {"lower", "upper"}, ["domain"])
    lower = ck.get(dom, "lower", ["domain"], "vec3", default=[0.0, 0.0, 0.0])
    upper = ck.get(dom, "upper", ["domain"], "vec3", default=[1.0, 1.0, 1.0])
    if any(u <= l for l, u in zip(lower, upper)):
        ck.fail(["domain"], "upper must exceed lower on every axis")
    out["domain"] = {"lower": lower, "upper": upper}

    ranks = _int_list(ck, raw.get("ranks", 8), "ranks", [])
    for i, r in enumerate(ranks):
        if r & (r - 1):
            ck.fail(["ranks"], f"rank count {r} is not a power of two")
    out["ranks"] = ranks

    dims = raw.get("block_dims", 32)
    dims = [dims] * 3 if isinstance(dims, int) and not isinstance(dims, bool) else dims
    if (not isinstance(dims, list) or len(dims) != 3
            or any(isinstance(d, bool) or not isinstance(d, int) or d < 2 for d in dims)):
        ck.fail(["block_dims"], f"expected an integer >= 2 or three of them, got {raw.get('block_dims')!r}")
    out["block_dims"] = dims

    fspec = ck.get(raw, "field", [], "dict", required=True)
    try:
        out["field"] = AnalyticField.from_dict(copy.deepcopy(fspec)).to_dict()
    except (KeyError, TypeError, ValueError) as exc:
        ck.fail(["field"], f"invalid field: {exc}")

    seeds = raw.get("seeds")
    if not isinstance(seeds, list) or not seeds:
        ck.fail(["seeds"], "expected a non-empty list of seed specs")
    out["seeds"] = []
    for i, s in enumerate(seeds):
        p = ["seeds", i]
        if not isinstance(s, dict):
            ck.fail(p, "seed spec must be a mapping")
        ck.unknown(s, _SEED_KEYS, p)
        kind = ck.get(s, "kind", p, "str", required=True)
        try:
            SeedKind(kind)
        except ValueError:
            ck.fail(p + ["kind"], f"unknown seed kind {kind!r} "
                                  f"(one of {', '.join(k.value for k in SeedKind)})")
        spec = {"kind": kind, "count": ck.get(s, "count", p, "int", required=True)}
        if spec["count"] < 1:
            ck.fail(p + ["count"], "count must be >= 1")
        if "rng_seed" in s:
            spec["rng_seed"] = ck.get(s, "rng_seed", p, "int")
        if "fraction" in s:
            fr = s["fraction"]
            fr = ck.get(s, "fraction", p, "vec3") if isinstance(fr, list) else ck.get(s, "fraction", p, "number")
            spec["fraction"] = fr
        for key in ("center", "start", "end", "origin", "u", "v"):
            if key in s:
                spec[key] = ck.get(s, key, p, "vec3")
        if "per_block" in s:
            spec["per_block"] = ck.get(s, "per_block", p, "bool")
        try:
            SeedSpec(**spec)
        except (TypeError, ValueError) as exc:
            ck.fail(p, str(exc))
        out["seeds"].append(spec)

    out["rng_seed"] = ck.get(raw, "rng_seed", [], "int", default=0)
    out["max_steps"] = _int_list(ck, raw.get("max_steps", list(DEFAULT_MAX_STEPS)), "max_steps", [])
    step = ck.get(raw, "step_size", [], "number")
    if step is not None and not step > 0:
        ck.fail(["step_size"], "must be positive")
    out["step_size"] = step

    tol = ck.get(raw, "tolerances", [], "dict", default={})
    ck.unknown(tol, _TOL_KEYS, ["tolerances"])
    out["tolerances"] = {
        "v_zero": ck.get(tol, "v_zero", ["tolerances"], "number", default=1e-10),
        "eps_push_rel": ck.get(tol, "eps_push_rel", ["tolerances"], "number", default=1e-6),
        "eps_bisect_rel": ck.get(tol, "eps_bisect_rel", ["tolerances"], "number", default=1e-8),
        "bisection": ck.get(tol, "bisection", ["tolerances"], "bool", default=True),
        "max_bisect": ck.get(tol, "max_bisect", ["tolerances"], "int", default=64),
    }

    sch = ck.get(raw, "scheduler", [], "dict", default={})
    ck.unknown(sch, {"mode", "attribution", "costs"}, ["scheduler"])
    mode = ck.get(sch, "mode", ["scheduler"], "str", default="deterministic")
    if mode not in [m.value for m in SchedulerMode]:
        ck.fail(["scheduler", "mode"], f"unknown mode {mode!r}")
    attribution = ck.get(sch, "attribution", ["scheduler"], "str", default="equal")
    if attribution not in [a.value for a in Attribution]:
        ck.fail(["scheduler", "attribution"], f"unknown attribution {attribution!r}")
    costs_raw = ck.get(sch, "costs", ["scheduler"], "dict", default={})
    defaults = CostModel().to_dict()
    ck.unknown(costs_raw, defaults, ["scheduler", "costs"])
    costs = {}
    for k, d in defaults.items():
        v = ck.get(costs_raw, k, ["scheduler", "costs"], "number", default=d)
        if v < 0 or (k == "tick" and v == 0):
            ck.fail(["scheduler", "costs", k], "must be non-negative" if k != "tick" else "must be positive")
        costs[k] = v
    out["scheduler"] = {"mode": mode, "attribution": attribution, "costs": costs}

    mit = ck.get(raw, "mitigation", [], "dict", default={"kind": "none"})
    kind = ck.get(mit, "kind", ["mitigation"], "str", default="none")
    p = ["mitigation"]
    if kind == "none":
        ck.unknown(mit, {"kind"}, p)
        out["mitigation"] = {"kind": "none"}
    elif kind == "duplicate":
        ck.unknown(mit, {"kind", "blocks", "ranks"}, p)
        if "blocks" not in mit:
            ck.fail(p, "duplicate needs 'blocks'")
        blocks = _int_list(ck, mit["blocks"], "blocks", p, minimum=0)
        rk = mit.get("ranks", "all")
        if rk != "all":
            rk = _int_list(ck, rk, "ranks", p, minimum=0)
        out["mitigation"] = {"kind": kind, "blocks": blocks, "ranks": rk}
    elif kind == "merge":
        ck.unknown(mit, {"kind", "groups", "host"}, p)
        groups = mit.get("groups")
        if not isinstance(groups, list) or not groups or not all(isinstance(g, list) for g in groups):
            ck.fail(p + ["groups"], "expected a list of block-id lists")
        groups = [_int_list(ck, g, i, p + ["groups"], minimum=0) for i, g in enumerate(groups)]
        host = mit.get("host")
        if host is not None and (isinstance(host, bool) or not isinstance(host, int)):
            ck.fail(p + ["host"], "expected a rank id or null")
        out["mitigation"] = {"kind": kind, "groups": groups, "host": host}
    elif kind == "early_terminate":
        ck.unknown(mit, {"kind", "window"}, p)
        window = ck.get(mit, "window", p, "int", default=2)
        if window < 2:
            ck.fail(p + ["window"], "window must be >= 2")
        out["mitigation"] = {"kind": kind, "window": window}
    else:
        ck.fail(p + ["kind"], f"unknown mitigation {kind!r} (one of {', '.join(MITIGATIONS)})")

    nb = min(out["ranks"])
    for i, g in enumerate(out["mitigation"].get("groups", [])):
        if max(g) >= nb:
            ck.fail(p + ["groups", i], f"block {max(g)} does not exist with {nb} ranks")
    if out["mitigation"].get("blocks") and max(out["mitigation"]["blocks"]) >= nb:
        ck.fail(p + ["blocks"], f"block {max(out['mitigation']['blocks'])} does not exist "
                f"with {nb} ranks")

    tr = ck.get(raw, "trace", [], "dict", default={})
    ck.unknown(tr, {"level", "track"}, ["trace"])
    level = ck.get(tr, "level", ["trace"], "str", default="full")
    if level not in ("full", "off"):
        ck.fail(["trace", "level"], "must be 'full' or 'off'")
    out["trace"] = {"level": level, "track": ck.get(tr, "track", ["trace"], "int")}

    outp = ck.get(raw, "output", [], "dict", default={})
    ck.unknown(outp, {"dir"}, ["output"])
    out["output"] = {"dir": ck.get(outp, "dir", ["output"], "str", default=f"runs/{out['name']}")}
    return out


def load_text(text: str, source: str = "<config>") -> dict:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        line = f":{mark.line + 1}" if mark is not None else ""
        raise ConfigError(f"{source}{line}: <yaml>: {getattr(exc, 'problem', exc)}") from None
    lines = _mark_index(node) if node is not None else {}
    return normalize(raw, source, lines)


def load_config(path) -> dict:
    path = Path(path)
    return load_text(path.read_text(), str(path))


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def config_hash(cfg: dict) -> str:
    """Identity of a run: everything except instrumentation and output location."""
    core = {k: v for k, v in cfg.items() if k not in ("trace", "output", "name")}
    return hashlib.sha256(_canonical(core).encode()).hexdigest()[:16]


def base_hash(cfg: dict) -> str:
    """Like :func:`config_hash` but ignoring the mitigation, for comparisons."""
    core = {k: v for k, v in cfg.items() if k not in ("trace", "output", "name", "mitigation")}
    return hashlib.sha256(_canonical(core).encode()).hexdigest()[:16]


def seed_rng(rng_seed: int, index: int) -> int:
    """Per-spec generator seed derived from the run's ``rng_seed``."""
    return int(np.random.SeedSequence([rng_seed, index]).generate_state(1, np.uint64)[0] >> 1)


@dataclass(frozen=True)
class Cell:
    """One run of a (possibly matrix) config."""

    config: dict
    subdir: str

    @property
    def ranks(self) -> int:
        return self.config["ranks"]

    @property
    def max_steps(self) -> int:
        return self.config["max_steps"]


def expand_matrix(cfg: dict) -> list:
    """One :class:`Cell` per (ranks, max_steps) combination."""
    combos = list(itertools.product(cfg["ranks"], cfg["max_steps"]))
    cells = []
    for ranks, steps in combos:
        c = copy.deepcopy(cfg)
        c["ranks"] = ranks
        c["max_steps"] = steps
        sub = "" if len(combos) == 1 else f"ranks{ranks}_steps{steps}"
        cells.append(Cell(c, sub))
    return cells


def override(cfg: dict, mode: str = None, seed: int = None, track: int = None) -> dict:
    cfg = copy.deepcopy(cfg)
    if mode is not None:
        if mode not in [m.value for m in SchedulerMode]:
            raise ConfigError(f"<override>: scheduler.mode: unknown mode {mode!r}")
        cfg["scheduler"]["mode"] = mode
    if seed is not None:
        cfg["rng_seed"] = int(seed)
    if track is not None:
        cfg["trace"]["track"] = int(track)
    return cfg


def dump(cfg: dict) -> str:
    return yaml.safe_dump(cfg, sort_keys=False)
