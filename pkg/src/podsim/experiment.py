"""Turn a normalised config into runs, and runs into files on disk.

A run directory holds ``events.jsonl`` and ``particles.csv`` (the trace),
``summary.json``, ``participation.csv`` and ``gantt.svg``.  Matrix configs
get one sub-directory per cell plus a ``matrix.json`` index.
"""

from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import asdict, dataclass
from pathlib import Path

from podsim import metrics
from podsim.advect import Tolerances
from podsim.config import base_hash, config_hash, expand_matrix, override, seed_rng
from podsim.decomp import (BlockAssignment, SeedSpec, apply_duplication, apply_merge,
                           generate_seed_set, make_blocks, make_layout)
from podsim.field import AnalyticField, GlobalDomain
from podsim.gantt import emit_gantt
from podsim.runtime import CostModel, EngineConfig, PingPongPolicy, run
from podsim.trace import RunTrace, load, serialize

OUTPUT_FILES = ("events.jsonl", "particles.csv", "summary.json", "participation.csv", "gantt.svg")


class IncompatibleRuns(ValueError):
    pass


@dataclass
class Setup:
    engine: EngineConfig
    blocks: list
    layout: object
    assignment: BlockAssignment
    seeds: list
    domain: GlobalDomain


def build(cfg: dict) -> Setup:
    """Everything :func:`podsim.runtime.run` needs for a single-cell config."""
    cfg = single_cell(cfg)
    ranks = cfg["ranks"]
    domain = GlobalDomain(cfg["domain"]["lower"], cfg["domain"]["upper"])
    layout = make_layout(ranks)
    blocks = make_blocks(AnalyticField.from_dict(cfg["field"]), layout, domain, cfg["block_dims"])
    specs = []
    for i, s in enumerate(cfg["seeds"]):
        s = dict(s)
        s["rng_seed"] = seed_rng(cfg["rng_seed"], i * 1_000_003 + int(s.get("rng_seed", 0)))
        specs.append(SeedSpec(**s))
    seeds = generate_seed_set(specs, layout, domain, cfg["max_steps"])

    asg = BlockAssignment.baseline(layout)
    mit = cfg["mitigation"]
    ping_pong = None
    if mit["kind"] == "duplicate":
        targets = range(asg.num_ranks) if mit["ranks"] == "all" else mit["ranks"]
        asg = apply_duplication(asg, mit["blocks"], targets)
    elif mit["kind"] == "merge":
        for group in mit["groups"]:
            asg = apply_merge(asg, group, layout, mit.get("host"))
    elif mit["kind"] == "early_terminate":
        ping_pong = PingPongPolicy(mit["window"])

    t = cfg["tolerances"]
    tol = Tolerances.defaults(blocks, domain, step_size=cfg["step_size"], v_zero=t["v_zero"],
                              eps_push_rel=t["eps_push_rel"], eps_bisect_rel=t["eps_bisect_rel"],
                              bisection=t["bisection"], max_bisect=t["max_bisect"])
    sch = cfg["scheduler"]
    engine = EngineConfig(tol, mode=sch["mode"], costs=CostModel(**sch["costs"]),
                          ping_pong=ping_pong, trace_level=cfg["trace"]["level"],
                          track=cfg["trace"]["track"], attribution=sch["attribution"])
    return Setup(engine, blocks, layout, asg, seeds, domain)


def single_cell(cfg: dict) -> dict:
    """``cfg`` with one-element matrix axes unwrapped; rejects real matrices."""
    cells = expand_matrix(cfg) if isinstance(cfg["ranks"], list) or isinstance(cfg["max_steps"], list) else None
    if cells is None:
        return cfg
    if len(cells) != 1:
        raise ValueError(f"config expands to {len(cells)} runs; pick one cell")
    return cells[0].config


def header_for(cfg: dict) -> dict:
    cfg = single_cell(cfg)
    return {"name": cfg["name"], "config_hash": config_hash(cfg), "base_hash": base_hash(cfg),
            "rng_seed": cfg["rng_seed"], "config": cfg}


def run_cell(cfg: dict) -> RunTrace:
    cfg = single_cell(cfg)
    s = build(cfg)
    return run(s.engine, s.blocks, s.layout, s.assignment, s.seeds, s.domain, header_for(cfg))


def _json(obj) -> str:
    return json.dumps(obj, indent=2, allow_nan=False) + "\n"


def write_outputs(trace: RunTrace, out_dir, colors: dict = None) -> list:
    out = Path(out_dir)
    written = serialize(trace, out)
    summary = metrics.summarize(trace).to_dict()
    summary["name"] = trace.header.get("name", "")
    summary["base_hash"] = trace.header.get("base_hash", "")
    summary["rng_seed"] = trace.header.get("rng_seed")
    summary["mitigation"] = trace.header.get("config", {}).get("mitigation", {"kind": "none"})
    (out / "summary.json").write_text(_json(summary))
    series = metrics.participation_series(trace)
    (out / "participation.csv").write_text(
        f"# config_hash={trace.header.get('config_hash', '')}\n" + series.to_csv())
    emit_gantt(trace, out / "gantt.svg", colors=colors)
    return written + [out / "summary.json", out / "participation.csv", out / "gantt.svg"]


def run_experiment(cfg: dict, out=None, mode: str = None, seed: int = None,
                   track: int = None) -> Path:
    """Run every cell of ``cfg`` and write its outputs; returns the output root."""
    cfg = override(cfg, mode, seed, track)
    root = Path(out if out is not None else cfg["output"]["dir"])
    cells = expand_matrix(cfg)
    index = []
    for cell in cells:
        trace = run_cell(cell.config)
        d = root / cell.subdir if cell.subdir else root
        write_outputs(trace, d)
        index.append({"dir": cell.subdir or ".", "ranks": cell.ranks,
                      "max_steps": cell.max_steps, "total_time": trace.total_time,
                      "total_seconds": trace.seconds(trace.total_time),
                      "config_hash": trace.header["config_hash"]})
    if len(cells) > 1:
        (root / "matrix.json").write_text(_json({"name": cfg["name"], "cells": index,
                                                 "efficiency": matrix_efficiency(index)}))
    return root


def matrix_efficiency(index: list) -> dict:
    """Weak-scaling efficiency per ``max_steps`` value, keyed by rank count."""
    by_steps = defaultdict(dict)
    for c in index:
        by_steps[c["max_steps"]][c["ranks"]] = c["total_seconds"]
    return {str(s): {str(n): e for n, e in metrics.weak_scaling_efficiency(t).items()}
            for s, t in sorted(by_steps.items()) if len(t) > 0}


@dataclass
class ComparisonReport:
    baseline_run: str
    variant_run: str
    baseline_time: float
    variant_time: float
    speedup: float
    participation_delta: float
    ping_pong_before: int
    ping_pong_after: int
    max_busy_before: float
    max_busy_after: float

    def to_dict(self) -> dict:
        return asdict(self)


def _summary(run_dir) -> dict:
    path = Path(run_dir) / "summary.json"
    if not path.exists():
        raise FileNotFoundError(f"{run_dir}: no summary.json (not a run directory)")
    return json.loads(path.read_text())


def compare(baseline_dir, variant_dir) -> ComparisonReport:
    a, b = _summary(baseline_dir), _summary(variant_dir)
    if a.get("rng_seed") != b.get("rng_seed"):
        raise IncompatibleRuns(f"rng_seed differs: {a.get('rng_seed')} vs {b.get('rng_seed')}")
    if a.get("base_hash") != b.get("base_hash"):
        raise IncompatibleRuns("runs differ in more than the mitigation "
                               f"({a.get('base_hash')} vs {b.get('base_hash')})")
    ta, tb = a["total_seconds"], b["total_seconds"]
    if not (ta > 0 and tb > 0):
        raise ValueError("run times must be positive")
    return ComparisonReport(a["config_hash"], b["config_hash"], ta, tb, ta / tb,
                            b["aggregated_participation"] - a["aggregated_participation"],
                            a["ping_pong_particles"], b["ping_pong_particles"],
                            a["max_rank_busy"] * a["tick_seconds"],
                            b["max_rank_busy"] * b["tick_seconds"])


def report(run_dir) -> str:
    """Human-readable summary of a run or a matrix directory."""
    run_dir = Path(run_dir)
    matrix = run_dir / "matrix.json"
    if matrix.exists():
        m = json.loads(matrix.read_text())
        lines = [f"{m['name']}: {len(m['cells'])} runs",
                 f"{'ranks':>6} {'max_steps':>10} {'time [s]':>14}"]
        for c in m["cells"]:
            lines.append(f"{c['ranks']:>6} {c['max_steps']:>10} {c['total_seconds']:>14.6g}")
        lines.append("weak-scaling efficiency:")
        for steps, eff in m["efficiency"].items():
            row = "  ".join(f"N={n}: {e:.3f}" for n, e in eff.items())
            lines.append(f"  max_steps={steps}: {row}")
        return "\n".join(lines) + "\n"
    s = _summary(run_dir)
    trace = load(run_dir)
    br = metrics.termination_breakdown(trace.particles)
    sl = s["slowest"]
    lines = [
        f"{s['name']} [{s['config_hash']}] mode={s['mode']} ranks={s['num_ranks']} "
        f"particles={s['num_particles']}",
        f"total time: {s['total_seconds']:.6g} s",
        f"aggregated participation: {s['aggregated_participation']:.4f}",
        "termination:",
        *("  " + line for line in metrics.breakdown_table(br).splitlines()),
        f"ping-pong particles (window {s['ping_pong_window']}): {s['ping_pong_particles']}",
        "slowest particle:",
        f"  id={sl['particle_id']} N_p={sl['n_p']} group={sl['accumulated_group_size']} "
        f"T_p={sl['t_p'] * s['tick_seconds']:.6g} s",
    ]
    shares = [("BO", sl["bo"]), ("EO", sl["eo"]), ("A", sl["a"])]
    if sl["c"] is not None:
        shares += [("C", sl["c"]), ("W", sl["w"])]
    else:
        shares += [("CW", sl["cw"])]
    lines.append("  " + "  ".join(f"{k}={v:.1f}%" for k, v in shares))
    return "\n".join(lines) + "\n"

