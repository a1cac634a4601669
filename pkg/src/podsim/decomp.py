"""Block layouts, block-to-rank assignment overlays, seeding and point routing."""

from __future__ import annotations

import enum
from bisect import bisect_left
from dataclasses import dataclass, field, replace
from types import MappingProxyType
from typing import Callable, Iterable, Sequence

import numpy as np

from podsim.advect import Particle
from podsim.field import GlobalDomain, GridBlock, sample_field

PRNG_NAME = "numpy.PCG64"

# Block layouts for the rank counts used in the weak-scaling study.
LAYOUT_TABLE = {
    8: (2, 2, 2),
    16: (2, 2, 4),
    32: (2, 4, 4),
    64: (4, 4, 4),
    128: (4, 4, 8),
}


class OutsideDomainError(ValueError):
    """Point is outside the global domain (the particle leaves the dataset)."""


@dataclass(frozen=True)
class BlockLayout:
    splits: tuple

    def __post_init__(self):
        splits = tuple(int(s) for s in self.splits)
        if len(splits) != 3 or min(splits) < 1:
            raise ValueError(f"splits must be three positive integers, got {self.splits}")
        object.__setattr__(self, "splits", splits)

    @property
    def num_blocks(self) -> int:
        sx, sy, sz = self.splits
        return sx * sy * sz

    def block_id(self, i: int, j: int, k: int) -> int:
        # row-major: z varies fastest
        _, sy, sz = self.splits
        return k + sz * (j + sy * i)

    def block_index(self, block_id: int) -> tuple:
        _, sy, sz = self.splits
        if not 0 <= block_id < self.num_blocks:
            raise KeyError(f"no block {block_id} in layout {self.splits}")
        return block_id // (sy * sz), (block_id // sz) % sy, block_id % sz

    def edges(self, domain: GlobalDomain) -> list:
        out = []
        for a in range(3):
            e = domain.lower[a] + (domain.upper[a] - domain.lower[a]) * np.arange(self.splits[a] + 1) / self.splits[a]
            e[0], e[-1] = domain.lower[a], domain.upper[a]
            out.append(e)
        return out

    def bounds(self, domain: GlobalDomain, block_id: int) -> tuple:
        idx = self.block_index(block_id)
        edges = self.edges(domain)
        lo = np.array([edges[a][idx[a]] for a in range(3)])
        hi = np.array([edges[a][idx[a] + 1] for a in range(3)])
        return lo, hi

    def adjacent(self, a: int, b: int) -> bool:
        ia, ib = self.block_index(a), self.block_index(b)
        return sum(abs(x - y) for x, y in zip(ia, ib)) == 1

    def locate(self, p, domain: GlobalDomain) -> int:
        """Block containing ``p``; points on shared faces go to the lowest id."""
        p = np.asarray(p, dtype=np.float64)
        if not domain.contains(p):
            raise OutsideDomainError(f"point {p} outside domain")
        idx = []
        for a, e in enumerate(self.edges(domain)):
            i = int(np.searchsorted(e, p[a], side="left")) - 1
            idx.append(min(max(i, 0), self.splits[a] - 1))
        return self.block_id(*idx)


    def locator(self, domain: GlobalDomain) -> Callable:
        """Fast :meth:`locate` for repeated lookups in one domain."""
        edges = [e.tolist() for e in self.edges(domain)]
        lo, hi = domain.lower.tolist(), domain.upper.tolist()
        top = [s - 1 for s in self.splits]
        _, sy, sz = self.splits

        def find(p) -> int:
            x, y, z = float(p[0]), float(p[1]), float(p[2])
            if not (lo[0] <= x <= hi[0] and lo[1] <= y <= hi[1] and lo[2] <= z <= hi[2]):
                raise OutsideDomainError(f"point {p} outside domain")
            i = min(max(bisect_left(edges[0], x) - 1, 0), top[0])
            j = min(max(bisect_left(edges[1], y) - 1, 0), top[1])
            k = min(max(bisect_left(edges[2], z) - 1, 0), top[2])
            return k + sz * (j + sy * i)

        return find


def make_layout(num_ranks: int) -> BlockLayout:
    """Blocks-per-axis for a power-of-two rank count (z doubles first, then y, then x)."""
    n = int(num_ranks)
    if n < 1 or n & (n - 1):
        raise ValueError(f"rank count must be a power of two, got {num_ranks}")
    if n in LAYOUT_TABLE:
        return BlockLayout(LAYOUT_TABLE[n])
    splits = [1, 1, 1]
    for d in range(n.bit_length() - 1):
        splits[2 - d % 3] *= 2
    return BlockLayout(tuple(splits))


def make_blocks(f, layout: BlockLayout, domain: GlobalDomain, dims) -> list:
    """Sample ``f`` onto every block of the layout; shared faces coincide exactly."""
    dims = tuple(int(d) for d in dims)
    blocks = []
    for b in range(layout.num_blocks):
        lo, hi = layout.bounds(domain, b)
        spacing = (hi - lo) / (np.asarray(dims) - 1)
        blocks.append(sample_field(f, lo, spacing, dims, block_id=b, upper=hi))
    return blocks


# -- assignment ----------------------------------------------------------

def modulo_policy(particle_id: int, replicas: Sequence[int]) -> int:
    """Replica choice for duplicated blocks: spread particles by id."""
    return replicas[particle_id % len(replicas)]


@dataclass(frozen=True)
class RoutingDecision:
    target_rank: int
    target_block: int


@dataclass(frozen=True)
class BlockAssignment:
    """Who hosts which block.

    ``owner`` is the baseline one-block-per-rank map.  ``replicas`` lists the
    ranks holding a copy of a duplicated block (always including its owner);
    ``merged_groups`` maps a frozenset of block ids to its host rank.
    """

    owner: MappingProxyType
    replicas: MappingProxyType = field(default_factory=lambda: MappingProxyType({}))
    merged_groups: MappingProxyType = field(default_factory=lambda: MappingProxyType({}))
    num_ranks: int = 0

    @classmethod
    def baseline(cls, layout: BlockLayout) -> "BlockAssignment":
        n = layout.num_blocks
        return cls(MappingProxyType({b: b for b in range(n)}), num_ranks=n)

    def group_of(self, block_id: int):
        for group in self.merged_groups:
            if block_id in group:
                return group
        return None

    def host_of(self, block_id: int) -> int:
        group = self.group_of(block_id)
        if group is not None:
            return self.merged_groups[group]
        return self.owner[block_id]

    def blocks_on(self, rank: int) -> list:
        """Block ids loaded by ``rank``, including replicas and merged members."""
        out = set()
        for b in self.owner:
            if self.host_of(b) == rank:
                out.add(b)
        for b, ranks in self.replicas.items():
            if rank in ranks:
                out.add(b)
        return sorted(out)

    def route(self, block_id: int, particle_id: int = 0,
              policy: Callable = modulo_policy) -> int:
        group = self.group_of(block_id)
        if group is not None:
            return self.merged_groups[group]
        if block_id in self.replicas:
            return policy(particle_id, self.replicas[block_id])
        return self.owner[block_id]

    def to_dict(self) -> dict:
        return {
            "replicas": {str(b): list(r) for b, r in sorted(self.replicas.items())},
            "merged_groups": [{"blocks": sorted(g), "host": h}
                              for g, h in sorted(self.merged_groups.items(), key=lambda kv: min(kv[0]))],
        }


def owner_of(p, layout: BlockLayout, assignment: BlockAssignment, domain: GlobalDomain,
             particle_id: int = 0, policy: Callable = modulo_policy) -> RoutingDecision:
    block = layout.locate(p, domain)
    return RoutingDecision(assignment.route(block, particle_id, policy), block)


def apply_duplication(assignment: BlockAssignment, blocks: Iterable[int],
                      ranks: Iterable[int]) -> BlockAssignment:
    """Copy ``blocks`` onto ``ranks``.

    With several blocks, the i-th target rank that does not own one of them
    receives ``blocks[i % len(blocks)]``, so each rank loads at most one extra
    block and no rank holds two of the duplicated blocks.
    """
    blocks = sorted(set(blocks))
    ranks = sorted(set(ranks))
    if not ranks:
        raise ValueError("duplication needs at least one target rank")
    if not blocks:
        return assignment
    for b in blocks:
        if b not in assignment.owner:
            raise KeyError(f"no block {b}")
        if assignment.group_of(b) is not None:
            raise ValueError(f"block {b} is merged; cannot also duplicate it")
    bad = [r for r in ranks if not 0 <= r < assignment.num_ranks]
    if bad:
        raise ValueError(f"ranks {bad} do not exist")
    replicas = {b: set(r) for b, r in assignment.replicas.items()}
    for b in blocks:
        replicas.setdefault(b, set()).add(assignment.owner[b])
    owners = {assignment.owner[b] for b in blocks}
    for i, r in enumerate(r for r in ranks if r not in owners):
        replicas[blocks[i % len(blocks)]].add(r)
    frozen = {b: tuple(sorted(r)) for b, r in sorted(replicas.items())}
    return replace(assignment, replicas=MappingProxyType(frozen))


def remove_duplication(assignment: BlockAssignment, blocks: Iterable[int]) -> BlockAssignment:
    replicas = {b: r for b, r in assignment.replicas.items() if b not in set(blocks)}
    return replace(assignment, replicas=MappingProxyType(replicas))


def _connected(group: set, layout: BlockLayout) -> bool:
    group = set(group)
    start = min(group)
    seen, todo = {start}, [start]
    while todo:
        b = todo.pop()
        for other in group - seen:
            if layout.adjacent(b, other):
                seen.add(other)
                todo.append(other)
    return seen == group


def apply_merge(assignment: BlockAssignment, group: Iterable[int], layout: BlockLayout,
                host: int = None) -> BlockAssignment:
    """Treat ``group`` as one large block hosted on one rank.

    The host defaults to the owner of the lowest block id in the group.
    """
    group = frozenset(group)
    if not group:
        raise ValueError("empty merge group")
    for b in group:
        if b not in assignment.owner:
            raise KeyError(f"no block {b}")
        if b in assignment.replicas:
            raise ValueError(f"block {b} is duplicated; cannot also merge it")
        if assignment.group_of(b) is not None:
            raise ValueError(f"block {b} already belongs to a merged group")
    if not _connected(group, layout):
        raise ValueError(f"merge group {sorted(group)} is not face-connected")
    if host is None:
        host = assignment.owner[min(group)]
    if not 0 <= host < assignment.num_ranks:
        raise ValueError(f"host rank {host} does not exist")
    if len(group) == 1 and host == assignment.owner[min(group)]:
        return assignment
    groups = dict(assignment.merged_groups)
    groups[group] = int(host)
    return replace(assignment, merged_groups=MappingProxyType(groups))


def remove_merge(assignment: BlockAssignment, group: Iterable[int]) -> BlockAssignment:
    group = frozenset(group)
    groups = {g: h for g, h in assignment.merged_groups.items() if g != group}
    return replace(assignment, merged_groups=MappingProxyType(groups))


# -- seeding -------------------------------------------------------------

class SeedKind(str, enum.Enum):
    PER_BLOCK_RANDOM = "per_block_random"
    BOX_FRACTION = "box_fraction"
    LINE = "line"
    PLANE = "plane"


@dataclass(frozen=True)
class SeedSpec:
    """How to place seeds.

    ``count`` is per block for ``per_block_random``; for the other kinds it is
    the total, or per block when ``per_block`` is set (weak-scaling runs).
    ``fraction`` is the box side as a fraction of each domain extent (scalar
    or per axis), centred on ``center`` (default: domain centre).  Lines run
    ``start``->``end``; planes span ``origin + s*u + t*v`` for s, t in [0, 1].
    """

    kind: SeedKind
    count: int
    rng_seed: int = 0
    fraction: object = 0.5
    center: object = None
    start: object = None
    end: object = None
    origin: object = None
    u: object = None
    v: object = None
    per_block: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", SeedKind(self.kind))
        if int(self.count) <= 0:
            raise ValueError("seed count must be positive")
        object.__setattr__(self, "count", int(self.count))
        if self.kind is SeedKind.BOX_FRACTION:
            f = np.broadcast_to(np.asarray(self.fraction, dtype=float), (3,))
            if np.any(f <= 0) or np.any(f > 1):
                raise ValueError("box fraction must lie in (0, 1]")
        if self.kind is SeedKind.LINE and (self.start is None or self.end is None):
            raise ValueError("line seeds need start and end")
        if self.kind is SeedKind.PLANE and (self.origin is None or self.u is None or self.v is None):
            raise ValueError("plane seeds need origin, u and v")

    def total(self, layout: BlockLayout) -> int:
        if self.kind is SeedKind.PER_BLOCK_RANDOM or self.per_block:
            return self.count * layout.num_blocks
        return self.count

    def to_dict(self) -> dict:
        out = {"kind": self.kind.value, "count": self.count, "rng_seed": self.rng_seed}
        for key in ("fraction", "center", "start", "end", "origin", "u", "v"):
            val = getattr(self, key)
            if val is None or (key == "fraction" and self.kind is not SeedKind.BOX_FRACTION):
                continue
            out[key] = np.asarray(val, dtype=float).tolist()
        if self.per_block:
            out["per_block"] = True
        return out


def _positions(spec: SeedSpec, layout: BlockLayout, domain: GlobalDomain) -> np.ndarray:
    rng = np.random.Generator(np.random.PCG64(spec.rng_seed))
    n = spec.total(layout)
    if spec.kind is SeedKind.PER_BLOCK_RANDOM:
        chunks = []
        for b in range(layout.num_blocks):
            lo, hi = layout.bounds(domain, b)
            chunks.append(lo + (hi - lo) * rng.random((spec.count, 3)))
        return np.concatenate(chunks)
    if spec.kind is SeedKind.BOX_FRACTION:
        frac = np.broadcast_to(np.asarray(spec.fraction, dtype=float), (3,))
        center = 0.5 * (domain.lower + domain.upper) if spec.center is None else np.asarray(spec.center, float)
        half = 0.5 * frac * (domain.upper - domain.lower)
        return center - half + 2.0 * half * rng.random((n, 3))
    if spec.kind is SeedKind.LINE:
        a, b = np.asarray(spec.start, float), np.asarray(spec.end, float)
        t = np.linspace(0.0, 1.0, n)[:, None] if n > 1 else np.zeros((1, 1))
        return a + t * (b - a)
    origin = np.asarray(spec.origin, float)
    u, v = np.asarray(spec.u, float), np.asarray(spec.v, float)
    st = rng.random((n, 2))
    return origin + st[:, :1] * u + st[:, 1:] * v


def generate_seeds(spec: SeedSpec, layout: BlockLayout, domain: GlobalDomain,
                   max_steps: int = 1000, first_id: int = 0) -> list:
    """Materialise particles for one spec; ids are dense from ``first_id``."""
    pos = _positions(spec, layout, domain)
    outside = ~np.all((pos >= domain.lower) & (pos <= domain.upper), axis=1)
    if outside.any():
        raise ValueError(f"{int(outside.sum())} seeds of {spec.kind.value} fall outside the domain")
    return [Particle(first_id + i, pos[i], max_steps) for i in range(len(pos))]


def generate_seed_set(specs: Sequence[SeedSpec], layout: BlockLayout, domain: GlobalDomain,
                      max_steps: int = 1000) -> list:
    out = []
    for spec in specs:
        out.extend(generate_seeds(spec, layout, domain, max_steps, first_id=len(out)))
    return out
