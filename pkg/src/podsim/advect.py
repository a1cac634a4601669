"""RK4 particle advection inside one block (or one merged group of blocks)."""

from __future__ import annotations

import enum
import time
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from podsim import _kernels
from podsim.field import GlobalDomain, GridBlock

CATEGORIES = ("BO", "A", "EO", "C", "W")


class Status(str, enum.Enum):
    ACTIVE = "active"
    OUT_OF_BOUNDS = "out_of_bounds"
    ZERO_VELOCITY = "zero_velocity"
    MAX_STEPS = "max_steps"
    EARLY_TERMINATED = "early_terminated"


_CODE_STATUS = {
    _kernels.OUT_OF_BOUNDS: Status.OUT_OF_BOUNDS,
    _kernels.ZERO_VELOCITY: Status.ZERO_VELOCITY,
    _kernels.MAX_STEPS: Status.MAX_STEPS,
}


class BoundaryFailure(Exception):
    """An RK4 stage point fell outside the block; ``stage`` is 1-4, or 5 for the update."""

    def __init__(self, stage: int):
        super().__init__(f"RK4 stage {stage} left the block")
        self.stage = stage


class ZeroVelocity(Exception):
    """Flow speed dropped below the zero-velocity tolerance."""

    def __init__(self, position):
        super().__init__("velocity below zero-velocity tolerance")
        self.position = np.asarray(position)


class BisectionLimitError(RuntimeError):
    pass


class ContractViolation(ValueError):
    pass


@dataclass
class Particle:
    id: int
    position: np.ndarray
    max_steps: int
    steps_taken: int = 0
    boundary_evals: int = 0
    status: Status = Status.ACTIVE
    block: int = -1
    visit_history: list = field(default_factory=list)
    accumulators: dict = field(default_factory=lambda: dict.fromkeys(CATEGORIES, 0))
    seed_time: float = 0
    termination_time: float = None

    def __post_init__(self):
        self.position = np.array(self.position, dtype=np.float64)

    @property
    def num_visits(self) -> int:
        return len(self.visit_history)

    @property
    def accumulated_group_size(self) -> int:
        return sum(g for _, g in self.visit_history)

    @property
    def active(self) -> bool:
        return self.status is Status.ACTIVE


@dataclass(frozen=True)
class Tolerances:
    """Integration knobs; lengths are world units, ``v_zero`` world units/time."""

    step_size: float
    v_zero: float = 1e-10
    eps_push: float = 1e-6
    eps_bisect: float = 1e-8
    bisection: bool = True
    max_bisect: int = 64

    def __post_init__(self):
        if not self.step_size > 0:
            raise ValueError("step_size must be positive")
        if self.v_zero < 0 or self.eps_push <= 0 or self.eps_bisect <= 0:
            raise ValueError("tolerances must be positive")

    @classmethod
    def defaults(cls, blocks: Sequence[GridBlock], domain: GlobalDomain, step_size=None,
                 v_zero=1e-10, eps_push_rel=1e-6, eps_bisect_rel=1e-8, bisection=True,
                 max_bisect=64) -> "Tolerances":
        """h = 0.25 x finest spacing, push = 1e-6 x domain diagonal, bisection eps
        = 1e-8 x block diagonal, unless overridden."""
        if step_size is None:
            step_size = 0.25 * min(float(b.spacing.min()) for b in blocks)
        block_diag = max(b.diagonal for b in blocks)
        return cls(step_size=float(step_size), v_zero=float(v_zero),
                   eps_push=eps_push_rel * domain.diagonal,
                   eps_bisect=eps_bisect_rel * block_diag,
                   bisection=bool(bisection), max_bisect=int(max_bisect))


class Region:
    """One block, or a merged group of face-adjacent blocks, as the kernel sees it."""

    def __init__(self, blocks: Iterable[GridBlock]):
        blocks = sorted(blocks, key=lambda b: b.block_id)
        if not blocks:
            raise ValueError("region needs at least one block")
        dims = {b.dims for b in blocks}
        if len(dims) != 1:
            raise ValueError("merged blocks must share grid dimensions")
        self.blocks = tuple(blocks)
        self.block_ids = tuple(b.block_id for b in blocks)
        self.origins = np.stack([b.origin for b in blocks])
        self.uppers = np.stack([b.upper for b in blocks])
        self.spacings = np.stack([b.spacing for b in blocks])
        self.samples = np.ascontiguousarray(np.stack([b.samples for b in blocks]))

    def member_of(self, p, tol=0.0) -> int:
        """Block id of the member holding ``p`` (lowest id on shared faces), or -1."""
        m = _kernels.find_member(self.origins, self.uppers, np.asarray(p, dtype=np.float64), tol)
        return -1 if m < 0 else self.block_ids[m]

    def contains(self, p, tol=0.0) -> bool:
        return self.member_of(p, tol) >= 0

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.uppers.max(axis=0) - self.origins.min(axis=0)))

    def _args(self):
        return self.origins, self.uppers, self.spacings, self.samples


def as_region(block_or_region) -> Region:
    if isinstance(block_or_region, Region):
        return block_or_region
    return Region([block_or_region])


@dataclass
class KernelResult:
    exited: list
    terminated: Counter
    steps_executed: int
    boundary_evals: int = 0
    elapsed: float = 0.0

    @property
    def terminated_count(self) -> int:
        return sum(self.terminated.values())


def rk4_step(block, p, h: float) -> np.ndarray:
    """One RK4 step of size ``h`` from ``p``; raises :class:`BoundaryFailure`."""
    if not h > 0:
        raise ValueError("step size must be positive")
    region = as_region(block)
    out = np.empty(3)
    stage = _kernels.rk4(*region._args(), np.asarray(p, dtype=np.float64), float(h), out)
    if stage:
        raise BoundaryFailure(stage)
    return out


def push_across_boundary(block, p, h: float, eps: float, eps_push: float,
                         v_zero: float = 1e-10, max_iter: int = 64):
    """Bisect ``h`` until the RK4 landing point is within ``eps`` of the
    boundary, then Euler-push ``eps_push`` along the local flow.

    Returns ``(exit_position, trial_steps)``.  Raises :class:`ZeroVelocity`
    when the flow stalls on the way.
    """
    region = as_region(block)
    out = np.empty(3)
    code, evals = _kernels.push_across(*region._args(), np.asarray(p, dtype=np.float64),
                                       float(h), float(eps), float(eps_push), float(v_zero),
                                       int(max_iter), out)
    if code == _kernels.ZERO_VELOCITY:
        raise ZeroVelocity(out if evals else p)
    if code == _kernels.BISECTION_CAP:
        raise BisectionLimitError(f"bisection did not converge in {max_iter} iterations at {p}")
    return out, evals


def advect_batch(particles: Sequence[Particle], block, domain: GlobalDomain,
                 tol: Tolerances, account_time: bool = True,
                 group_size: int = None) -> KernelResult:
    """Advance every particle until it terminates or leaves ``block``.

    Each particle's visit history gains ``(entry block, group size)``; the
    group size defaults to the batch length.  With
    ``account_time`` the kernel's wall time is added to each particle's A
    accumulator; the engine turns this off and charges virtual time itself.
    """
    region = as_region(block)
    n = len(particles)
    if n == 0:
        return KernelResult([], Counter(), 0)
    group = n if group_size is None else int(group_size)
    positions = np.empty((n, 3))
    steps = np.empty(n, np.int64)
    max_steps = particles[0].max_steps
    for i, part in enumerate(particles):
        if not part.active:
            raise ContractViolation(f"particle {part.id} is not active")
        if part.max_steps != max_steps:
            raise ContractViolation("a batch must share one step budget")
        entry = region.member_of(part.position, tol.eps_bisect)
        if entry < 0:
            raise ContractViolation(
                f"particle {part.id} at {part.position} is outside region {region.block_ids}")
        part.block = entry
        part.visit_history.append((entry, group))
        positions[i] = part.position
        steps[i] = part.steps_taken

    t0 = time.perf_counter()
    codes, executed, evals = _kernels.advect_many(
        *region._args(), domain.lower, domain.upper, positions, steps, int(max_steps),
        tol.step_size, tol.v_zero, tol.eps_bisect, tol.eps_push, tol.bisection, tol.max_bisect)
    elapsed = time.perf_counter() - t0

    exited = []
    terminated = Counter()
    for i, part in enumerate(particles):
        code = int(codes[i])
        if code == _kernels.BISECTION_CAP:
            raise BisectionLimitError(f"particle {part.id}: bisection hit the iteration cap")
        part.position = positions[i].copy()
        part.steps_taken = int(steps[i])
        part.boundary_evals += int(evals[i])
        if account_time:
            part.accumulators["A"] += elapsed
        if code == _kernels.EXITED:
            exited.append((part, part.position))
        else:
            part.status = _CODE_STATUS[code]
            terminated[part.status] += 1
    return KernelResult(exited, terminated, int(executed.sum()), int(evals.sum()), elapsed)
