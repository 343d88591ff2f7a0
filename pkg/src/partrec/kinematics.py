"""Part articulation: motion types, parameter remapping, posing, inverse ray maps.

A part is either static, prismatic (slides along an axis), or revolute
(rotates about a pivoted axis). Motion is parametrised per observation
state t by a scalar schedule value S_t; the geometry lives in a rest
frame and is pushed forward by `pose_point`, while rays are pulled back
into the rest frame by `inverse_transform_ray` so fields are only ever
queried at rest.

All math here is float64 numpy; batched dims broadcast on the left.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .geometry import AABB, ContractViolation, _as_vec3


class MotionType(Enum):
    STATIC = "static"
    PRISMATIC = "prismatic"
    REVOLUTE = "revolute"


@dataclass(frozen=True)
class SceneFrame:
    """Shared scene coordinates: bounding-sphere radius and counts."""

    radius: float = 0.5
    state_count: int = 2
    part_count: int = 2

    def __post_init__(self):
        if self.radius <= 0:
            raise ContractViolation("radius must be positive")
        if self.state_count < 2:
            raise ContractViolation("need at least two observation states")
        if self.part_count < 1:
            raise ContractViolation("need at least one part")


@dataclass(frozen=True)
class ArticulationParams:
    """Explicit articulation for one part.

    box: rest-frame axis-aligned bounding box of the part
    motion_type: STATIC parts ignore axis/pivot/schedule
    axis: unit direction of translation or rotation
    pivot: a point on the rotation axis (unused for prismatic)
    schedule: per-state scalars S_t; prismatic displacement is
        2r * S_t * axis, revolute angle is 2*pi*S_t
    """

    box: AABB
    motion_type: MotionType
    axis: np.ndarray
    pivot: np.ndarray
    schedule: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "axis", _as_vec3(self.axis))
        object.__setattr__(self, "pivot", _as_vec3(self.pivot))
        sched = np.asarray(self.schedule, dtype=np.float64)
        if sched.ndim != 1:
            raise ContractViolation(f"schedule must be 1-d, got shape {sched.shape}")
        if np.any(np.abs(sched) >= 1.0):
            raise ContractViolation(f"dynamics must lie in (-1, 1), got {sched}")
        object.__setattr__(self, "schedule", sched)
        n = float(np.linalg.norm(self.axis))
        if self.motion_type is not MotionType.STATIC and abs(n - 1.0) > 1e-6:
            raise ContractViolation(f"axis must be unit length for moving parts, |a|={n}")

    @property
    def num_states(self) -> int:
        return len(self.schedule)

    def check_within(self, radius: float) -> None:
        """Verify the scene-sphere bounds: |center|, |pivot| < r, size < 2r."""
        r = float(radius)
        if np.any(np.abs(self.box.center) >= r) or np.any(np.abs(self.pivot) >= r):
            raise ContractViolation("box center or pivot outside the scene sphere cube")
        if np.any(self.box.size >= 2 * r):
            raise ContractViolation("box size exceeds the scene diameter")


def rotation_matrix(axis, angle: float) -> np.ndarray:
    """Rodrigues rotation about a unit axis.

    Below 1e-8 rad falls back to I + angle*K, which is exact to first
    order and keeps derivatives finite for tiny angles.
    """
    a = _as_vec3(axis)
    k = np.array([
        [0.0, -a[2], a[1]],
        [a[2], 0.0, -a[0]],
        [-a[1], a[0], 0.0],
    ])
    if abs(angle) < 1e-8:
        return np.eye(3) + angle * k
    return np.eye(3) + np.sin(angle) * k + (1.0 - np.cos(angle)) * (k @ k)


def pose_point(points, params: ArticulationParams, state: int, radius: float) -> np.ndarray:
    """Map rest-frame points to world at observation state `state`.

    radius is the scene bounding-sphere radius r; prismatic travel is
    measured in units of the scene diameter 2r.
    """
    p = np.asarray(points, dtype=np.float64)
    if params.motion_type is MotionType.STATIC:
        return p.copy()
    s = float(params.schedule[state])
    if params.motion_type is MotionType.PRISMATIC:
        return p + (2.0 * radius * s) * params.axis
    rot = rotation_matrix(params.axis, 2.0 * np.pi * s)
    return (p - params.pivot) @ rot.T + params.pivot


def inverse_transform_ray(origin, dir, params: ArticulationParams, state: int,
                          radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Pull a world-frame ray back into the part's rest frame.

    Inverts `pose_point`: querying the rest-frame field along the
    returned ray is equivalent to querying the posed field along the
    input ray.
    """
    o = np.asarray(origin, dtype=np.float64)
    v = np.asarray(dir, dtype=np.float64)
    if params.motion_type is MotionType.STATIC:
        return o.copy(), v.copy()
    s = float(params.schedule[state])
    if params.motion_type is MotionType.PRISMATIC:
        return o - (2.0 * radius * s) * params.axis, v.copy()
    rot = rotation_matrix(params.axis, -2.0 * np.pi * s)
    return (o - params.pivot) @ rot.T + params.pivot, v @ rot.T


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


# Raw head output layout: [center 0:3 | size 3:6 | type logits 6:8 |
# axis 8:11 | pivot 11:14 | schedule 14:14+T].
RAW_FIXED = 14


def remap_articulation(raw, radius: float, num_states: int,
                       is_base: bool = False) -> ArticulationParams:
    """Decode an unconstrained head output into valid articulation parameters.

    Sigmoid squashes keep the box inside the scene sphere's bounding
    cube and the schedule in (-1, 1); the axis is normalised rather
    than squashed so its direction is unconstrained. Type is the argmax
    of two logits (prismatic wins ties); base parts are forced static.

    Raises ContractViolation when the axis is degenerate (norm < 1e-8)
    for a part decoded as moving.
    """
    v = np.asarray(raw, dtype=np.float64)
    if v.shape != (RAW_FIXED + num_states,):
        raise ContractViolation(
            f"raw vector must have shape ({RAW_FIXED + num_states},), got {v.shape}")
    r = float(radius)
    # Sigmoid saturates to exactly 0/1 in float64 for |x| beyond ~37; nudge
    # every squashed quantity off its closed endpoints so the open-interval
    # invariants hold for any finite raw input.
    lim = 1.0 - 1e-9
    center = np.clip(2.0 * r * _sigmoid(v[0:3]) - r, -r * lim, r * lim)
    size = np.clip(2.0 * r * _sigmoid(v[3:6]), 1e-9, 2.0 * r * lim)
    schedule = np.clip(2.0 * _sigmoid(v[RAW_FIXED:RAW_FIXED + num_states]) - 1.0,
                       -lim, lim)

    if is_base:
        mtype = MotionType.STATIC
    else:
        logits = v[6:8]
        mtype = MotionType.PRISMATIC if logits[0] >= logits[1] else MotionType.REVOLUTE

    axis_raw = v[8:11]
    if mtype is MotionType.STATIC:
        axis = np.array([1.0, 0.0, 0.0])
    else:
        n = float(np.linalg.norm(axis_raw))
        if n < 1e-8:
            raise ContractViolation(f"degenerate articulation axis, norm={n}")
        axis = axis_raw / n
    pivot = np.clip(2.0 * r * _sigmoid(v[11:14]) - r, -r * lim, r * lim)

    return ArticulationParams(
        box=AABB(center, size),
        motion_type=mtype,
        axis=axis,
        pivot=pivot,
        schedule=schedule,
    )


def posed_box_corners(params: ArticulationParams, state: int, radius: float) -> np.ndarray:
    """World positions of the 8 rest-box corners at a state. (8, 3)."""
    lo, hi = params.box.lo, params.box.hi
    corners = np.array([[x, y, z] for x in (lo[0], hi[0])
                        for y in (lo[1], hi[1]) for z in (lo[2], hi[2])])
    return pose_point(corners, params, state, radius)


def posed_aabb(params: ArticulationParams, state: int, radius: float) -> AABB:
    """Axis-aligned bound of the posed rest box (conservative for revolute)."""
    c = posed_box_corners(params, state, radius)
    lo, hi = c.min(axis=0), c.max(axis=0)
    size = np.maximum(hi - lo, 1e-9)
    return AABB((lo + hi) / 2.0, size)
