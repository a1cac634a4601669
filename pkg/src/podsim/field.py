"""Analytic velocity fields and their sampling onto uniform per-block grids."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from podsim import _kernels

AXES = {"x": 0, "y": 1, "z": 2}


class FieldKind(str, enum.Enum):
    CYLINDRICAL = "cylindrical"
    BOUNDARY_VORTEX = "boundary_vortex"
    SINK = "sink"
    OUTFLOW = "outflow"
    COMPOSITE = "composite"


class OutsideBlockError(ValueError):
    """Query point lies outside a block's extent; the caller owns the handoff."""


def _axis_index(axis) -> int:
    if isinstance(axis, str):
        try:
            return AXES[axis.lower()]
        except KeyError:
            raise ValueError(f"unknown axis {axis!r}") from None
    axis = int(axis)
    if axis not in (0, 1, 2):
        raise ValueError(f"axis index must be 0, 1 or 2, got {axis}")
    return axis


def _vec3(v, name: str) -> np.ndarray:
    arr = np.asarray(v, dtype=np.float64)
    if arr.shape != (3,) or not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} must be a finite 3-vector, got {v!r}")
    return arr


def _smooth_cutoff(dist: np.ndarray, inner: float, width: float) -> np.ndarray:
    # 1 up to `inner`, C1 smoothstep down to 0 at inner + width
    if width <= 0.0:
        return (dist <= inner).astype(np.float64)
    t = np.clip((dist - inner) / width, 0.0, 1.0)
    return 1.0 - t * t * (3.0 - 2.0 * t)


def _rotation(axis: int, center: np.ndarray, omega: float, pts: np.ndarray):
    """omega * e_axis x (p - center), plus the in-plane offset it acts on."""
    d = pts - center
    d[:, axis] = 0.0
    v = np.zeros_like(pts)
    a1, a2 = (axis + 1) % 3, (axis + 2) % 3
    v[:, a1] = -omega * d[:, a2]
    v[:, a2] = omega * d[:, a1]
    return v, d


@dataclass(frozen=True)
class AnalyticField:
    """A closed-form steady velocity field.

    ``params`` holds the per-kind parameters (see the ``cylindrical``,
    ``sink``, ``outflow``, ``boundary_vortex`` and ``composite`` constructors).
    Evaluation is vectorised: ``field(points)`` accepts ``(N, 3)`` arrays.
    """

    kind: FieldKind
    params: dict = field(default_factory=dict)
    components: tuple = ()

    # -- constructors ---------------------------------------------------
    @classmethod
    def cylindrical(cls, axis="z", center=(0.0, 0.0, 0.0), omega=1.0) -> "AnalyticField":
        return cls(FieldKind.CYLINDRICAL, {
            "axis": _axis_index(axis), "center": _vec3(center, "center"), "omega": float(omega)})

    @classmethod
    def sink(cls, center=(0.0, 0.0, 0.0), k=1.0) -> "AnalyticField":
        if not k > 0:
            raise ValueError("sink rate k must be positive")
        return cls(FieldKind.SINK, {"center": _vec3(center, "center"), "k": float(k)})

    @classmethod
    def outflow(cls, drift=(1.0, 0.0, 0.0)) -> "AnalyticField":
        return cls(FieldKind.OUTFLOW, {"drift": _vec3(drift, "drift")})

    @classmethod
    def boundary_vortex(cls, center, omega=1.0, axis="z", core_radius=0.2,
                        taper=0.05, half_length=np.inf, plane_axis="x",
                        plane_position=None, delta=0.05) -> "AnalyticField":
        """Solid-body vortex confined to a tube, centred near a block face.

        Inside ``core_radius`` of the axis line the flow rotates rigidly at
        ``omega``; the strength falls smoothly to zero over ``taper``, both
        radially and beyond ``half_length`` along the axis.  The face is the
        plane ``x[plane_axis] == plane_position``; the centre must lie within
        ``delta`` of it.
        """
        center = _vec3(center, "center")
        plane_axis = _axis_index(plane_axis)
        axis = _axis_index(axis)
        if plane_position is None:
            plane_position = float(center[plane_axis])
        if plane_axis == axis:
            raise ValueError("vortex axis must be parallel to the boundary plane")
        if delta < 0 or abs(center[plane_axis] - plane_position) > delta:
            raise ValueError(
                f"vortex centre is {abs(center[plane_axis] - plane_position):g} from the "
                f"plane, more than delta={delta:g}")
        if core_radius <= 0 or taper < 0 or half_length <= 0:
            raise ValueError("core_radius and half_length must be positive, taper non-negative")
        return cls(FieldKind.BOUNDARY_VORTEX, {
            "center": center, "omega": float(omega), "axis": axis,
            "core_radius": float(core_radius), "taper": float(taper),
            "half_length": float(half_length), "plane_axis": plane_axis,
            "plane_position": float(plane_position), "delta": float(delta)})

    @classmethod
    def composite(cls, components: Sequence["AnalyticField"]) -> "AnalyticField":
        if not components:
            raise ValueError("composite field needs at least one component")
        return cls(FieldKind.COMPOSITE, {}, tuple(components))

    # -- evaluation -----------------------------------------------------
    def __call__(self, points) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        kind, p = self.kind, self.params
        if kind is FieldKind.CYLINDRICAL:
            v, _ = _rotation(p["axis"], p["center"], p["omega"], pts)
        elif kind is FieldKind.SINK:
            v = -p["k"] * (pts - p["center"])
        elif kind is FieldKind.OUTFLOW:
            v = np.broadcast_to(p["drift"], pts.shape).copy()
        elif kind is FieldKind.BOUNDARY_VORTEX:
            v, d = _rotation(p["axis"], p["center"], p["omega"], pts)
            radial = np.sqrt(np.sum(d * d, axis=1))
            along = np.abs(pts[:, p["axis"]] - p["center"][p["axis"]])
            weight = (_smooth_cutoff(radial, p["core_radius"], p["taper"])
                      * _smooth_cutoff(along, p["half_length"], p["taper"]))
            v *= weight[:, None]
        elif kind is FieldKind.COMPOSITE:
            v = np.zeros_like(pts)
            for comp in self.components:
                v += comp(pts)
        else:  # pragma: no cover
            raise ValueError(f"unsupported field kind {kind}")
        return v

    def to_dict(self) -> dict:
        if self.kind is FieldKind.COMPOSITE:
            return {"kind": self.kind.value, "components": [c.to_dict() for c in self.components]}
        out = {"kind": self.kind.value}
        for key, val in self.params.items():
            if isinstance(val, np.ndarray):
                val = [float(x) for x in val]
            elif key in ("axis", "plane_axis"):
                val = "xyz"[val]
            elif isinstance(val, float) and not np.isfinite(val):
                val = None
            out[key] = val
        return out

    @classmethod
    def from_dict(cls, spec: dict) -> "AnalyticField":
        spec = dict(spec)
        kind = FieldKind(spec.pop("kind"))
        if kind is FieldKind.COMPOSITE:
            return cls.composite([cls.from_dict(c) for c in spec.pop("components")])
        if kind is FieldKind.BOUNDARY_VORTEX and spec.get("half_length") is None:
            spec["half_length"] = np.inf
        ctor = {
            FieldKind.CYLINDRICAL: cls.cylindrical,
            FieldKind.SINK: cls.sink,
            FieldKind.OUTFLOW: cls.outflow,
            FieldKind.BOUNDARY_VORTEX: cls.boundary_vortex,
        }[kind]
        return ctor(**spec)


def eval_analytic(f: Callable, p) -> np.ndarray:
    """Velocity of ``f`` at a single point ``p``."""
    p = np.asarray(p, dtype=np.float64)
    if p.shape != (3,) or not np.all(np.isfinite(p)):
        raise ValueError("p must be a finite 3-vector")
    return f(p[None, :])[0]


@dataclass(frozen=True)
class GridBlock:
    """Uniform lattice of velocity samples covering one data block.

    ``samples`` has shape ``dims + (3,)`` with x varying slowest.  ``upper``
    defaults to ``origin + (dims - 1) * spacing`` but may be pinned to the
    layout's face coordinates so neighbouring blocks share faces exactly.
    """

    block_id: int
    origin: np.ndarray
    spacing: np.ndarray
    dims: tuple
    samples: np.ndarray
    upper: np.ndarray = None

    def __post_init__(self):
        origin = _vec3(self.origin, "origin")
        spacing = _vec3(self.spacing, "spacing")
        dims = tuple(int(d) for d in self.dims)
        if np.any(spacing <= 0):
            raise ValueError(f"spacing must be strictly positive, got {spacing}")
        if len(dims) != 3 or min(dims) < 2:
            raise ValueError(f"dims must be three integers >= 2, got {self.dims}")
        samples = np.ascontiguousarray(self.samples, dtype=np.float64)
        if samples.shape != dims + (3,):
            raise ValueError(f"samples shape {samples.shape} does not match dims {dims}")
        upper = origin + (np.asarray(dims) - 1) * spacing if self.upper is None else _vec3(self.upper, "upper")
        object.__setattr__(self, "origin", origin)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "samples", samples)
        object.__setattr__(self, "upper", upper)

    @property
    def lower(self) -> np.ndarray:
        return self.origin

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.upper - self.origin))

    def contains(self, p) -> bool:
        p = np.asarray(p, dtype=np.float64)
        return bool(np.all(p >= self.origin) and np.all(p <= self.upper))


@dataclass(frozen=True)
class GlobalDomain:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lo, hi = _vec3(self.lower, "lower"), _vec3(self.upper, "upper")
        if not np.all(lo < hi):
            raise ValueError(f"domain lower {lo} must be below upper {hi} componentwise")
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.upper - self.lower))

    def contains(self, p) -> bool:
        p = np.asarray(p, dtype=np.float64)
        return bool(np.all(p >= self.lower) and np.all(p <= self.upper))


def lattice_points(origin, spacing, dims) -> np.ndarray:
    """All lattice coordinates, shape ``dims + (3,)``."""
    axes = [origin[i] + spacing[i] * np.arange(dims[i]) for i in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    return np.stack([gx, gy, gz], axis=-1)


def sample_field(f: Callable, origin, spacing, dims, block_id: int = 0, upper=None) -> GridBlock:
    """Evaluate ``f`` on a uniform lattice and wrap the samples as a block.

    ``f`` is any vectorised callable mapping ``(N, 3)`` points to velocities,
    normally an :class:`AnalyticField`.
    """
    origin = _vec3(origin, "origin")
    spacing = _vec3(spacing, "spacing")
    dims = tuple(int(d) for d in dims)
    if np.any(spacing <= 0):
        raise ValueError(f"spacing must be strictly positive, got {spacing}")
    if len(dims) != 3 or min(dims) < 2:
        raise ValueError(f"dims must be three integers >= 2, got {dims}")
    pts = lattice_points(origin, spacing, dims)
    if upper is not None:
        # pin the far face to the layout coordinate exactly
        upper = _vec3(upper, "upper")
        for ax in range(3):
            idx = [slice(None)] * 3
            idx[ax] = -1
            pts[tuple(idx) + (ax,)] = upper[ax]
    vel = np.asarray(f(pts.reshape(-1, 3)), dtype=np.float64).reshape(dims + (3,))
    return GridBlock(block_id, origin, spacing, dims, vel, upper)


def interpolate(block: GridBlock, p) -> np.ndarray:
    """Trilinear reconstruction of the block's samples at ``p``.

    Raises :class:`OutsideBlockError` if ``p`` lies outside the inclusive
    block extent.
    """
    p = np.asarray(p, dtype=np.float64)
    if not block.contains(p):
        raise OutsideBlockError(f"point {p} outside block {block.block_id} "
                                f"[{block.origin}, {block.upper}]")
    return _kernels.trilinear(block.samples, block.origin, block.spacing, p)
