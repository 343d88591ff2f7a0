"""Procedural desk-scale articulated scenes with analytic rounded-box parts.

Four templates mimic common furniture: a chest whose drawers slide out of an
open front, a cabinet with hinged doors, a laptop with a lid, and a mixed
chest combining drawers with a door. Every part is a rounded box with a flat
or two-tone banded color; the base part is always static and listed first,
movable parts follow in a canonical order (ascending box-center height, then
depth, then lateral position).

Ground truth supervision is rendered by the same volume renderer used for
learned fields, evaluated on the analytic SDFs, so a trained model is never
compared against images from a different rendering pipeline.

Conventions: +y is up, the object front faces -z, and the whole scene
(including every admissible pose of every part) stays inside the bounding
sphere of the configured radius.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .formats import read_pgm, read_ppm, write_pgm, write_ppm
from .geometry import AABB, Camera, ContractViolation, look_at
from .kinematics import (
    ArticulationParams,
    MotionType,
    SceneFrame,
    posed_box_corners,
    rotation_matrix,
)
from .renderer import PartInstance, render_composite, render_part

TEMPLATES = ("drawer-chest", "door-cabinet", "laptop", "mixed")

DEFAULT_RADIUS = 0.5
MANIFEST_FORMAT = "partrec-scene-1"
# world-unit margin between a shape face and its stored bounding box
BOX_PAD = 0.01
# posed parts keep this fraction of the scene radius, leaving float headroom
SPHERE_MARGIN = 0.995
TWO_PI = 2.0 * np.pi


# ---------------------------------------------------------------------------
# dynamics convention


def motion_value(s: float, motion_type: MotionType, radius: float) -> float:
    """Physical motion for a dynamics value: radians, or world translation."""
    if motion_type is MotionType.REVOLUTE:
        return TWO_PI * float(s)
    if motion_type is MotionType.PRISMATIC:
        return 2.0 * float(radius) * float(s)
    return 0.0


def dynamics_value(motion: float, motion_type: MotionType, radius: float) -> float:
    """Inverse of motion_value.

    Float division can land one ulp away from a preimage, so the result is
    snapped to a neighbor that maps back onto `motion` bitwise whenever one
    exists. Generated schedules are drawn from this lattice, which makes
    scale-then-unscale exact for every stored ground-truth value.
    """
    if motion_type is MotionType.STATIC:
        return 0.0
    c = TWO_PI if motion_type is MotionType.REVOLUTE else 2.0 * float(radius)
    m = float(motion)
    s = m / c
    for cand in (s, np.nextafter(s, np.inf), np.nextafter(s, -np.inf)):
        if float(cand) * c == m:
            return float(cand)
    return s


def _snap_dynamics(s: float, motion_type: MotionType, radius: float) -> float:
    return dynamics_value(motion_value(s, motion_type, radius), motion_type, radius)


# ---------------------------------------------------------------------------
# analytic parts


@dataclass(frozen=True)
class Albedo:
    """Part color: flat `base`, or bands of `base`/`accent` along one axis."""

    base: np.ndarray
    accent: np.ndarray | None = None
    axis: int = 1
    band: float = 0.08

    def __post_init__(self):
        base = np.asarray(self.base, dtype=np.float64)
        object.__setattr__(self, "base", base)
        if base.shape != (3,) or np.any(base < 0) or np.any(base > 1):
            raise ContractViolation(f"albedo base must be rgb in [0,1], got {base}")
        if self.accent is not None:
            accent = np.asarray(self.accent, dtype=np.float64)
            object.__setattr__(self, "accent", accent)
            if accent.shape != (3,) or np.any(accent < 0) or np.any(accent > 1):
                raise ContractViolation("albedo accent must be rgb in [0,1]")
            if self.axis not in (0, 1, 2):
                raise ContractViolation(f"band axis must be 0..2, got {self.axis}")
            if self.band <= 0:
                raise ContractViolation("band width must be positive")

    def colors(self, offsets: torch.Tensor) -> torch.Tensor:
        """Colors for points given as offsets from the shape center, [N, 3]."""
        base = torch.as_tensor(self.base, dtype=offsets.dtype)
        if self.accent is None:
            return base.expand(offsets.shape[0], 3)
        accent = torch.as_tensor(self.accent, dtype=offsets.dtype)
        band = torch.floor(offsets[:, self.axis] / self.band).long() % 2
        return torch.where((band == 0).unsqueeze(-1), base, accent)


class RoundedBoxField:
    """Exact rounded-box SDF with procedural albedo, in rest coordinates.

    Speaks the renderer's field protocol (dtype + query), so ground truth
    renders run through the identical compositing path as learned fields.
    """

    def __init__(self, center, half_extents, corner_radius: float, albedo: Albedo,
                 dtype=torch.float64):
        self.center = torch.as_tensor(np.asarray(center, np.float64), dtype=dtype)
        self.half = torch.as_tensor(np.asarray(half_extents, np.float64), dtype=dtype)
        self.rho = float(corner_radius)
        self.albedo = albedo
        self._dtype = dtype

    @property
    def dtype(self):
        return self._dtype

    def query(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        off = x - self.center                       # [N, 3]
        q = off.abs() - (self.half - self.rho)
        outer = q.clamp_min(0.0).norm(dim=-1)
        inner = q.max(dim=-1).values.clamp_max(0.0)
        return outer + inner - self.rho, self.albedo.colors(off)


@dataclass(frozen=True)
class PrimitivePart:
    """One scene part: rounded-box shape, color, and articulation.

    motion_limits is the admissible dynamics interval [lo, hi] the scene was
    built for; schedules are drawn inside it and the swept volume over the
    whole interval stays inside the scene sphere.
    """

    center: np.ndarray
    half_extents: np.ndarray
    corner_radius: float
    albedo: Albedo
    articulation: ArticulationParams
    motion_limits: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        center = np.asarray(self.center, dtype=np.float64)
        half = np.asarray(self.half_extents, dtype=np.float64)
        object.__setattr__(self, "center", center)
        object.__setattr__(self, "half_extents", half)
        if center.shape != (3,) or half.shape != (3,):
            raise ContractViolation("part center and half_extents must be 3-vectors")
        if np.any(half <= 0):
            raise ContractViolation(f"half extents must be positive, got {half}")
        if not 0 <= self.corner_radius < half.min():
            raise ContractViolation(
                f"corner radius {self.corner_radius} must be in [0, {half.min()})")
        box = self.articulation.box
        if np.any(box.lo > center - half + 1e-12) or np.any(box.hi < center + half - 1e-12):
            raise ContractViolation("articulation box does not contain the shape")
        lo, hi = self.motion_limits
        if lo > hi:
            raise ContractViolation(f"motion limits out of order: {self.motion_limits}")

    def field(self, dtype=torch.float64) -> RoundedBoxField:
        return RoundedBoxField(self.center, self.half_extents, self.corner_radius,
                               self.albedo, dtype=dtype)


@dataclass
class SceneTruth:
    """A generated scene: frame, ordered parts, cameras, and (optionally)
    rendered ground-truth images.

    images, when present, is {"composite": [V][T] image, "parts": [P][V][T]
    image} where an image is {"rgb": float32 [H,W,3], "mask": float32 [H,W]},
    both in [0, 1].
    """

    frame: SceneFrame
    template: str
    seed: int
    parts: list[PrimitivePart]
    cameras: list[list[Camera]]
    rig: dict
    images: dict | None = None
    render_meta: dict | None = None

    @property
    def dynamics(self) -> np.ndarray:
        """Per-part, per-state dynamics values, [P, T]."""
        return np.stack([p.articulation.schedule for p in self.parts])


def max_posed_radius(part: PrimitivePart, s_value: float, radius: float) -> float:
    """Largest box-corner distance from the origin at dynamics value s_value."""
    posed = dataclasses.replace(part.articulation, schedule=np.array([s_value]))
    corners = posed_box_corners(posed, 0, radius)
    return float(np.linalg.norm(corners, axis=1).max())


# ---------------------------------------------------------------------------
# motion budgets: how far can a part move before leaving the scene sphere


def _box_corners(box: AABB) -> np.ndarray:
    lo, hi = box.lo, box.hi
    return np.array([[x, y, z]
                     for x in (lo[0], hi[0])
                     for y in (lo[1], hi[1])
                     for z in (lo[2], hi[2])])  # [8, 3]


def _slide_budget(box: AABB, axis: np.ndarray, radius: float) -> float:
    """Largest prismatic travel keeping every box corner inside the sphere."""
    c = _box_corners(box)
    r2 = (SPHERE_MARGIN * radius) ** 2
    proj = c @ axis                                 # [8]
    disc = proj ** 2 + r2 - (c * c).sum(axis=1)
    if np.any(disc < 0):
        return 0.0
    return max(0.0, float(np.min(-proj + np.sqrt(disc))))


def _swing_budget(box: AABB, axis, pivot, radius: float, cap_angle: float,
                  n_scan: int = 96) -> float:
    """Largest rotation in (0, cap_angle] keeping box corners inside the sphere."""
    rel = _box_corners(box) - np.asarray(pivot, dtype=np.float64)
    best = 0.0
    for ang in np.linspace(0.0, cap_angle, n_scan)[1:]:
        posed = rel @ rotation_matrix(axis, ang).T + pivot
        if np.linalg.norm(posed, axis=1).max() > SPHERE_MARGIN * radius:
            break
        best = ang
    return best


# ---------------------------------------------------------------------------
# template construction


def _draw_albedo(rng: np.random.Generator) -> Albedo:
    base = rng.uniform(0.15, 0.9, 3)
    if rng.random() < 0.5:
        return Albedo(base=base)
    accent = np.clip(base + rng.uniform(-0.4, 0.4, 3), 0.05, 0.95)
    return Albedo(base=base, accent=accent, axis=int(rng.integers(3)),
                  band=float(rng.uniform(0.04, 0.12)))


def _draw_schedule(rng, lo: float, hi: float, states: int,
                   motion_type: MotionType, radius: float) -> np.ndarray:
    """Uniform dynamics per state, rejecting near-constant draws.

    Values are snapped onto the scale/unscale lattice so stored ground truth
    survives the physical-unit round trip bitwise.
    """
    span = hi - lo
    s = np.linspace(lo, hi, states)
    for _ in range(200):
        cand = rng.uniform(lo, hi, states)
        if cand.max() - cand.min() >= 0.25 * span:
            s = cand
            break
    return np.array([_snap_dynamics(v, motion_type, radius) for v in s])


def _build_part(rng, center, half, motion_type: MotionType, axis, pivot,
                limits: tuple[float, float], states: int,
                radius: float) -> PrimitivePart:
    center = np.asarray(center, dtype=np.float64)
    half = np.asarray(half, dtype=np.float64)
    rho = float(rng.uniform(0.06, 0.2) * half.min())
    albedo = _draw_albedo(rng)
    if motion_type is MotionType.STATIC:
        schedule = np.zeros(states)
    else:
        schedule = _draw_schedule(rng, limits[0], limits[1], states,
                                  motion_type, radius)
    params = ArticulationParams(
        box=AABB(center, 2.0 * (half + BOX_PAD)),
        motion_type=motion_type, axis=axis, pivot=pivot, schedule=schedule)
    return PrimitivePart(center=center, half_extents=half, corner_radius=rho,
                         albedo=albedo, articulation=params,
                         motion_limits=(float(limits[0]), float(limits[1])))


def _shell_dims(rng, radius: float, rest_frac: tuple[float, float]) -> np.ndarray:
    """Overall (width, height, depth) whose rest corners sit at rest_frac * r."""
    raw = np.array([rng.uniform(0.9, 1.3),
                    rng.uniform(0.75, 1.35),
                    rng.uniform(0.55, 0.85)])
    frac = rng.uniform(*rest_frac)
    return raw * (frac * radius / np.linalg.norm(raw / 2.0))


def _mover_box(center, half) -> AABB:
    # must match the box _build_part stores, so budgets bound the real part
    return AABB(np.asarray(center, np.float64),
                2.0 * (np.asarray(half, np.float64) + BOX_PAD))


def _require_room(s_hi: float, what: str) -> float:
    if s_hi < 0.02:
        raise RuntimeError(f"template left no motion room for {what}; "
                           "size ranges should make this impossible")
    return s_hi


def _back_slab(rng, w, h, d, t_back, states, radius) -> PrimitivePart:
    return _build_part(rng, center=(0.0, 0.0, (d - t_back) / 2.0),
                       half=(w / 2, h / 2, t_back / 2),
                       motion_type=MotionType.STATIC, axis=(1, 0, 0),
                       pivot=(0, 0, 0), limits=(0.0, 0.0), states=states,
                       radius=radius)


def _drawer_row(rng, w, depth, z_c, y_lo, heights, gap, states,
                radius) -> list[PrimitivePart]:
    """A vertical stack of drawers sliding out of the front face."""
    axis = np.array([0.0, 0.0, -1.0])
    out, y = [], y_lo
    for hk in heights:
        cen = np.array([0.0, y + hk / 2.0, z_c])
        half = np.array([w / 2.0, hk / 2.0, depth / 2.0])
        budget = _slide_budget(_mover_box(cen, half), axis, radius) / (2.0 * radius)
        s_hi = _require_room(min(budget, 0.7 * depth / (2.0 * radius)), "drawer")
        out.append(_build_part(rng, cen, half, MotionType.PRISMATIC, axis,
                               (0, 0, 0), (0.0, s_hi), states, radius))
        y += hk + gap
    return out


def _door(rng, x_lo, x_hi, y_c, door_h, t_door, z_front, hinge_left: bool,
          states, radius) -> PrimitivePart:
    """A door hinged on one outer vertical edge, swinging out of the front."""
    cen = np.array([(x_lo + x_hi) / 2.0, y_c, z_front + t_door / 2.0])
    half = np.array([(x_hi - x_lo) / 2.0, door_h / 2.0, t_door / 2.0])
    # positive dynamics swing the free edge toward the viewer on either side
    axis = np.array([0.0, 1.0, 0.0]) if hinge_left else np.array([0.0, -1.0, 0.0])
    pivot = np.array([x_lo if hinge_left else x_hi, 0.0, z_front])
    budget = _swing_budget(_mover_box(cen, half), axis, pivot, radius,
                           cap_angle=np.pi / 2.0)
    s_hi = _require_room(budget / TWO_PI, "door")
    return _build_part(rng, cen, half, MotionType.REVOLUTE, axis, pivot,
                       (0.0, s_hi), states, radius)


def _drawer_chest(rng, radius, n_movers, states) -> list[PrimitivePart]:
    w, h, d = _shell_dims(rng, radius, (0.78, 0.88))
    t_back = d * rng.uniform(0.14, 0.2)
    gap = max(0.02 * min(w, h), 2.5 * BOX_PAD)
    base = _back_slab(rng, w, h, d, t_back, states, radius)
    depth = d - t_back - gap
    weights = rng.uniform(0.75, 1.3, n_movers)
    heights = (h - gap * (n_movers + 1)) * weights / weights.sum()
    drawers = _drawer_row(rng, w * 0.94, depth, -d / 2 + depth / 2,
                          -h / 2 + gap, heights, gap, states, radius)
    return [base] + drawers


def _door_cabinet(rng, radius, n_movers, states) -> list[PrimitivePart]:
    w, h, d = _shell_dims(rng, radius, (0.78, 0.88))
    t_back = d * rng.uniform(0.14, 0.2)
    gap = max(0.02 * min(w, h), 2.5 * BOX_PAD)
    t_door = max(d * rng.uniform(0.07, 0.11), 0.03)
    base = _back_slab(rng, w, h, d, t_back, states, radius)
    door_h = h - 2 * gap
    z_front = -d / 2.0
    if n_movers == 2:
        doors = [
            _door(rng, -w / 2 + gap / 2, -gap / 2, 0.0, door_h, t_door, z_front,
                  hinge_left=True, states=states, radius=radius),
            _door(rng, gap / 2, w / 2 - gap / 2, 0.0, door_h, t_door, z_front,
                  hinge_left=False, states=states, radius=radius),
        ]
    else:
        hinge_left = bool(rng.random() < 0.5)
        doors = [_door(rng, -w / 2 + gap / 2, w / 2 - gap / 2, 0.0, door_h,
                       t_door, z_front, hinge_left, states, radius)]
    return [base] + doors


def _laptop(rng, radius, n_movers, states) -> list[PrimitivePart]:
    del n_movers  # always exactly one lid
    raw_w = rng.uniform(1.25, 1.6)
    raw_d = rng.uniform(0.85, 1.05)
    tb = raw_d * rng.uniform(0.10, 0.16)
    ts = raw_d * rng.uniform(0.05, 0.09)
    g = raw_d * 0.012
    raw = np.array([raw_w, tb + g + ts, raw_d])
    frac = rng.uniform(0.58, 0.68)
    scale = frac * radius / np.linalg.norm(raw / 2.0)
    w, total_h, d = raw * scale
    tb, ts, g = tb * scale, ts * scale, g * scale
    y0 = -total_h / 2.0
    base = _build_part(rng, center=(0.0, y0 + tb / 2.0, 0.0),
                       half=(w / 2, tb / 2, d / 2),
                       motion_type=MotionType.STATIC, axis=(1, 0, 0),
                       pivot=(0, 0, 0), limits=(0.0, 0.0), states=states,
                       radius=radius)
    w_s = w * rng.uniform(0.9, 0.98)
    d_s = d * rng.uniform(0.88, 0.97)
    cen = np.array([0.0, y0 + tb + g + ts / 2.0, d / 2.0 - d_s / 2.0])
    half = np.array([w_s / 2.0, ts / 2.0, d_s / 2.0])
    # hinge along the lid's bottom-back edge; opening tilts the front edge up
    axis = np.array([1.0, 0.0, 0.0])
    pivot = np.array([0.0, y0 + tb + g, d / 2.0])
    budget = _swing_budget(_mover_box(cen, half), axis, pivot, radius,
                           cap_angle=0.6 * np.pi)
    s_hi = _require_room(budget / TWO_PI, "laptop lid")
    lid = _build_part(rng, cen, half, MotionType.REVOLUTE, axis, pivot,
                      (0.0, s_hi), states, radius)
    return [base, lid]


def _mixed(rng, radius, n_movers, states) -> list[PrimitivePart]:
    """Drawers below, one door above, behind a shared back slab."""
    w, h, d = _shell_dims(rng, radius, (0.76, 0.86))
    t_back = d * rng.uniform(0.14, 0.2)
    gap = max(0.02 * min(w, h), 2.5 * BOX_PAD)
    t_door = max(d * rng.uniform(0.07, 0.11), 0.03)
    base = _back_slab(rng, w, h, d, t_back, states, radius)
    split = rng.uniform(0.45, 0.6)
    h_bottom = h * split
    n_drawers = n_movers - 1
    depth = d - t_back - gap
    weights = rng.uniform(0.75, 1.3, n_drawers)
    heights = (h_bottom - gap * (n_drawers + 1)) * weights / weights.sum()
    drawers = _drawer_row(rng, w * 0.94, depth, -d / 2 + depth / 2,
                          -h / 2 + gap, heights, gap, states, radius)
    door_h = h - h_bottom - 2 * gap
    y_door = -h / 2 + h_bottom + gap + door_h / 2.0
    hinge_left = bool(rng.random() < 0.5)
    door = _door(rng, -w / 2 + gap / 2, w / 2 - gap / 2, y_door, door_h,
                 t_door, -d / 2.0, hinge_left, states, radius)
    return [base] + drawers + [door]


_BUILDERS = {
    "drawer-chest": _drawer_chest,
    "door-cabinet": _door_cabinet,
    "laptop": _laptop,
    "mixed": _mixed,
}

_MOVER_RANGE = {
    "drawer-chest": (1, 3),
    "door-cabinet": (1, 2),
    "laptop": (1, 1),
    "mixed": (2, 3),
}


def canonical_order(parts: list[PrimitivePart]) -> list[int]:
    """Base first, then movers by rest box center: bottom up, front to back,
    left to right. Stable for equal keys."""
    if parts[0].articulation.motion_type is not MotionType.STATIC:
        raise ContractViolation("part 0 must be the static base")

    def key(i: int):
        c = parts[i].articulation.box.center
        return (c[1], c[2], c[0])

    return [0] + sorted(range(1, len(parts)), key=key)


def camera_rig(n_views: int, resolution: int, radius: float = DEFAULT_RADIUS,
               distance: float | None = None, elevation: float = 0.35,
               azimuth_offset: float = 0.0, f_scale: float = 1.2) -> list[Camera]:
    """Evenly spaced azimuth ring of cameras looking at the origin.

    Azimuth 0 faces the object front (-z); elevation raises the ring.
    """
    d = 3.0 * radius if distance is None else distance
    f = f_scale * resolution
    c = resolution / 2.0
    cams = []
    for i in range(n_views):
        az = azimuth_offset + TWO_PI * i / n_views
        eye = np.array([d * np.cos(elevation) * np.sin(az),
                        d * np.sin(elevation),
                        -d * np.cos(elevation) * np.cos(az)])
        cams.append(Camera(fx=f, fy=f, cx=c, cy=c, width=resolution,
                           height=resolution, pose=look_at(eye, np.zeros(3))))
    return cams


def scale_camera(cam: Camera, resolution: int) -> Camera:
    """The same camera pose reprojected to a different square resolution."""
    s = resolution / cam.width
    return Camera(fx=cam.fx * s, fy=cam.fy * s, cx=cam.cx * s, cy=cam.cy * s,
                  width=resolution, height=int(round(cam.height * s)),
                  pose=cam.pose)


def sample_scene(template: str, seed: int, parts: int | None = None,
                 states: int = 2, n_views: int = 4, resolution: int = 64,
                 radius: float = DEFAULT_RADIUS) -> SceneTruth:
    """Randomized scene for a template, deterministic in the seed.

    parts, when given, is the total part count including the base.
    """
    if template not in TEMPLATES:
        raise ContractViolation(f"unknown template {template!r}, "
                                f"expected one of {TEMPLATES}")
    lo, hi = _MOVER_RANGE[template]
    rng = np.random.default_rng(seed)
    if parts is None:
        n_movers = int(rng.integers(lo, hi + 1))
    else:
        n_movers = parts - 1
        if not lo <= n_movers <= hi:
            raise ContractViolation(
                f"{template} supports {lo + 1}..{hi + 1} parts, got {parts}")
    built = _BUILDERS[template](rng, radius, n_movers, states)
    ordered = [built[i] for i in canonical_order(built)]
    elevation = float(rng.uniform(0.25, 0.5))
    offset = float(rng.uniform(0.0, TWO_PI / n_views))
    rig = {"n_views": n_views, "distance": 3.0 * radius, "elevation": elevation,
           "azimuth_offset": offset, "f_scale": 1.2}
    views = camera_rig(n_views, resolution, radius=radius,
                       distance=rig["distance"], elevation=elevation,
                       azimuth_offset=offset, f_scale=rig["f_scale"])
    frame = SceneFrame(radius=radius, state_count=states,
                       part_count=len(ordered))
    return SceneTruth(frame=frame, template=template, seed=int(seed),
                      parts=ordered, cameras=[[cam] * states for cam in views],
                      rig=rig)


# ---------------------------------------------------------------------------
# rendering and dataset files


def _to_image(out) -> dict:
    return {"rgb": out.rgb.numpy().astype(np.float32),
            "mask": out.mask.numpy().astype(np.float32)}


def render_truth(scene: SceneTruth, resolution: int | None = None,
                 n_samples: int = 96, beta: float = 1e-3) -> SceneTruth:
    """Scene with ground-truth images: composite plus each part in isolation.

    resolution None keeps the scene's cameras; otherwise they are rescaled.
    """
    if resolution is None:
        cams = scene.cameras
    else:
        cams = [[scale_camera(c, resolution) for c in row]
                for row in scene.cameras]
    instances = [PartInstance(field=p.field(), params=p.articulation)
                 for p in scene.parts]
    n_v, n_t = len(cams), scene.frame.state_count
    composite = [[None] * n_t for _ in range(n_v)]
    per_part = [[[None] * n_t for _ in range(n_v)] for _ in scene.parts]
    with torch.no_grad():
        for v in range(n_v):
            for t in range(n_t):
                cam = cams[v][t]
                comp = render_composite(instances, t, cam, beta=beta,
                                        n_samples=n_samples,
                                        radius=scene.frame.radius)
                composite[v][t] = _to_image(comp)
                for p, inst in enumerate(instances):
                    solo = render_part(inst, t, cam, beta=beta,
                                       n_samples=n_samples,
                                       radius=scene.frame.radius)
                    per_part[p][v][t] = _to_image(solo)
    meta = {"resolution": cams[0][0].width, "n_samples": n_samples,
            "beta": beta}
    return dataclasses.replace(scene, cameras=cams,
                               images={"composite": composite,
                                       "parts": per_part},
                               render_meta=meta)


def _part_dict(p: PrimitivePart) -> dict:
    art = p.articulation
    return {
        "shape": {"center": p.center.tolist(),
                  "half_extents": p.half_extents.tolist(),
                  "corner_radius": p.corner_radius},
        "albedo": {"base": p.albedo.base.tolist(),
                   "accent": None if p.albedo.accent is None
                   else p.albedo.accent.tolist(),
                   "axis": p.albedo.axis, "band": p.albedo.band},
        "articulation": {"box_center": art.box.center.tolist(),
                         "box_size": art.box.size.tolist(),
                         "motion_type": art.motion_type.value,
                         "axis": art.axis.tolist(),
                         "pivot": art.pivot.tolist(),
                         "schedule": art.schedule.tolist()},
        "motion_limits": list(p.motion_limits),
    }


def _part_from_dict(d: dict) -> PrimitivePart:
    a = d["articulation"]
    alb = d["albedo"]
    params = ArticulationParams(
        box=AABB(np.array(a["box_center"]), np.array(a["box_size"])),
        motion_type=MotionType(a["motion_type"]),
        axis=np.array(a["axis"]), pivot=np.array(a["pivot"]),
        schedule=np.array(a["schedule"]))
    albedo = Albedo(base=np.array(alb["base"]),
                    accent=None if alb["accent"] is None
                    else np.array(alb["accent"]),
                    axis=alb["axis"], band=alb["band"])
    return PrimitivePart(center=np.array(d["shape"]["center"]),
                         half_extents=np.array(d["shape"]["half_extents"]),
                         corner_radius=d["shape"]["corner_radius"],
                         albedo=albedo, articulation=params,
                         motion_limits=tuple(d["motion_limits"]))


def scene_manifest(scene: SceneTruth) -> dict:
    return {
        "format": MANIFEST_FORMAT,
        "template": scene.template,
        "seed": scene.seed,
        "frame": {"radius": scene.frame.radius,
                  "state_count": scene.frame.state_count,
                  "part_count": scene.frame.part_count},
        "axis_convention": {"up": "+y", "front": "-z", "right": "+x",
                            "order": "base first, then ascending (y, z, x) "
                                     "box center"},
        "rig": scene.rig,
        "cameras": [[c.to_dict() for c in row] for row in scene.cameras],
        "render": scene.render_meta,
        "parts": [_part_dict(p) for p in scene.parts],
    }


def save_scene(scene: SceneTruth, outdir) -> Path:
    """Write manifest.json plus PPM/PGM image pairs into outdir."""
    if scene.images is None:
        raise ContractViolation("scene has no images; call render_truth first")
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(
        json.dumps(scene_manifest(scene), indent=1) + "\n")
    n_v, n_t = len(scene.cameras), scene.frame.state_count
    for v in range(n_v):
        for t in range(n_t):
            comp = scene.images["composite"][v][t]
            write_ppm(out / f"composite_v{v}_s{t}.ppm", comp["rgb"])
            write_pgm(out / f"composite_v{v}_s{t}.pgm", comp["mask"])
            for p in range(len(scene.parts)):
                img = scene.images["parts"][p][v][t]
                write_ppm(out / f"part{p}_v{v}_s{t}.ppm", img["rgb"])
                write_pgm(out / f"part{p}_v{v}_s{t}.pgm", img["mask"])
    return out


def composite_stack(scene: SceneTruth) -> np.ndarray:
    """Composite RGB images as one [V, T, H, W, 3] array (model input)."""
    if scene.images is None:
        raise ContractViolation("scene has no images; call render_truth first")
    return np.stack([
        np.stack([scene.images["composite"][v][t]["rgb"]
                  for t in range(scene.frame.state_count)])
        for v in range(len(scene.cameras))])


def load_scene(path) -> SceneTruth:
    """Rebuild a SceneTruth (with images in [0, 1]) from a scene directory."""
    root = Path(path)
    d = json.loads((root / "manifest.json").read_text())
    if d.get("format") != MANIFEST_FORMAT:
        raise ContractViolation(f"not a scene directory: {root}")
    frame = SceneFrame(**d["frame"])
    parts = [_part_from_dict(x) for x in d["parts"]]
    cameras = [[Camera.from_dict(c) for c in row] for row in d["cameras"]]
    n_v, n_t = len(cameras), frame.state_count

    def read_pair(stem: str) -> dict:
        rgb = read_ppm(root / f"{stem}.ppm").astype(np.float32)
        mask = read_pgm(root / f"{stem}.pgm").astype(np.float32)
        return {"rgb": rgb, "mask": mask}

    composite = [[read_pair(f"composite_v{v}_s{t}") for t in range(n_t)]
                 for v in range(n_v)]
    per_part = [[[read_pair(f"part{p}_v{v}_s{t}") for t in range(n_t)]
                 for v in range(n_v)] for p in range(len(parts))]
    return SceneTruth(frame=frame, template=d["template"], seed=d["seed"],
                      parts=parts, cameras=cameras, rig=d["rig"],
                      images={"composite": composite, "parts": per_part},
                      render_meta=d["render"])


def make_dataset(outdir, n_scenes: int, seed: int, template: str = "all",
                 parts: int | None = None, states: int = 2, n_views: int = 4,
                 resolution: int = 64, n_samples: int = 96,
                 beta: float = 1e-3) -> list[Path]:
    """Generate and save n_scenes scenes under outdir, one folder each.

    template "all" cycles through the template list; per-scene seeds are
    spawned from the dataset seed, so any prefix of a dataset is stable.
    """
    if template != "all" and template not in TEMPLATES:
        raise ContractViolation(f"unknown template {template!r}")
    out = Path(outdir)
    out.mkdir(parents=True, exist_ok=True)
    children = np.random.SeedSequence(seed).spawn(n_scenes)
    dirs, index = [], []
    for i, child in enumerate(children):
        scene_seed = int(child.generate_state(1)[0])
        tmpl = TEMPLATES[i % len(TEMPLATES)] if template == "all" else template
        scene = sample_scene(tmpl, scene_seed, parts=parts, states=states,
                             n_views=n_views, resolution=resolution)
        scene = render_truth(scene, n_samples=n_samples, beta=beta)
        scene_dir = save_scene(scene, out / f"scene_{i:04d}")
        dirs.append(scene_dir)
        index.append({"dir": scene_dir.name, "template": tmpl,
                      "seed": scene_seed})
    (out / "index.json").write_text(
        json.dumps({"seed": seed, "scenes": index}, indent=1) + "\n")
    return dirs
