"""Cameras, rays, Plucker embeddings, and ray/box intersection and sampling.

Conventions (shared by the data generator, tokenizer, and renderer):
  * right-handed world frame, +y up
  * camera looks down -z in its own frame, +x right, +y up
  * pixel rays pass through pixel centers (index + 0.5)
All functions here are pure and operate on float64 numpy arrays.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ContractViolation(ValueError):
    """An argument broke a documented precondition."""


def _as_vec3(x) -> np.ndarray:
    v = np.asarray(x, dtype=np.float64)
    if v.shape != (3,):
        raise ContractViolation(f"expected 3-vector, got shape {v.shape}")
    return v


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    dir: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "origin", _as_vec3(self.origin))
        object.__setattr__(self, "dir", _as_vec3(self.dir))
        n = float(np.linalg.norm(self.dir))
        if abs(n - 1.0) > 1e-6:
            raise ContractViolation(f"ray direction must be unit length, |d|={n}")

    def at(self, t: float) -> np.ndarray:
        return self.origin + t * self.dir


@dataclass(frozen=True)
class AABB:
    """Axis-aligned box given by center and full side lengths."""

    center: np.ndarray
    size: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "center", _as_vec3(self.center))
        object.__setattr__(self, "size", _as_vec3(self.size))
        if not np.all(self.size > 0):
            raise ContractViolation(f"box size must be positive, got {self.size}")

    @property
    def lo(self) -> np.ndarray:
        return self.center - 0.5 * self.size

    @property
    def hi(self) -> np.ndarray:
        return self.center + 0.5 * self.size

    def contains(self, points: np.ndarray, pad: float = 0.0) -> np.ndarray:
        p = np.asarray(points, dtype=np.float64)
        return np.all((p >= self.lo - pad) & (p <= self.hi + pad), axis=-1)


@dataclass(frozen=True)
class Camera:
    """Pinhole camera with a world-from-camera rigid pose.

    pose is a 4x4 matrix whose rotation columns are the camera x/y/z axes
    expressed in world coordinates; the camera looks along -z.
    """

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    pose: np.ndarray = field(repr=False)

    def __post_init__(self):
        pose = np.asarray(self.pose, dtype=np.float64)
        if pose.shape != (4, 4):
            raise ContractViolation(f"pose must be 4x4, got {pose.shape}")
        object.__setattr__(self, "pose", pose)
        if self.fx <= 0 or self.fy <= 0:
            raise ContractViolation("focal lengths must be positive")
        r = pose[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise ContractViolation("pose rotation is not orthonormal")

    @property
    def rotation(self) -> np.ndarray:
        return self.pose[:3, :3]

    @property
    def origin(self) -> np.ndarray:
        return self.pose[:3, 3]

    @property
    def forward(self) -> np.ndarray:
        """Viewing direction in world coordinates (-z camera axis)."""
        return -self.pose[:3, 2]

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
            "pose": self.pose.tolist(),
        }

    @staticmethod
    def from_dict(d: dict) -> "Camera":
        return Camera(fx=d["fx"], fy=d["fy"], cx=d["cx"], cy=d["cy"],
                      width=d["width"], height=d["height"],
                      pose=np.asarray(d["pose"], dtype=np.float64))


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-from-camera pose for a camera at `eye` looking at `target`."""
    eye = _as_vec3(eye)
    fwd = _as_vec3(target) - eye
    fwd = fwd / np.linalg.norm(fwd)
    right = np.cross(fwd, _as_vec3(up))
    nr = np.linalg.norm(right)
    if nr < 1e-9:
        raise ContractViolation("look_at: view direction parallel to up vector")
    right = right / nr
    true_up = np.cross(right, fwd)
    pose = np.eye(4)
    pose[:3, 0] = right
    pose[:3, 1] = true_up
    pose[:3, 2] = -fwd
    pose[:3, 3] = eye
    return pose


def pixel_ray(cam: Camera, px: float, py: float) -> Ray:
    """Ray through the center of pixel (px, py); origin at the camera center."""
    if not (0 <= px < cam.width and 0 <= py < cam.height):
        raise ContractViolation(f"pixel ({px}, {py}) outside {cam.width}x{cam.height}")
    d_cam = np.array([
        (px + 0.5 - cam.cx) / cam.fx,
        -(py + 0.5 - cam.cy) / cam.fy,
        -1.0,
    ])
    d = cam.rotation @ d_cam
    return Ray(cam.origin.copy(), d / np.linalg.norm(d))


def camera_rays(cam: Camera) -> tuple[np.ndarray, np.ndarray]:
    """Rays for every pixel, row-major. Returns (origins, dirs), each (H*W, 3)."""
    py, px = np.meshgrid(np.arange(cam.height), np.arange(cam.width), indexing="ij")
    u = (px.ravel() + 0.5 - cam.cx) / cam.fx
    v = -(py.ravel() + 0.5 - cam.cy) / cam.fy
    d_cam = np.stack([u, v, -np.ones_like(u)], axis=-1)
    d = d_cam @ cam.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(cam.origin, d.shape).copy()
    return o, d


def project_points(cam: Camera, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """World points to pixel coordinates, inverting the pixel_ray convention.

    Returns (pix [N, 2] as (px, py), depth [N]); depth <= 0 marks points
    behind the camera plane whose pixel coordinates are meaningless.
    """
    p = np.atleast_2d(np.asarray(points, dtype=np.float64))
    p_cam = (p - cam.origin) @ cam.rotation  # [N, 3], R^T (p - o)
    depth = -p_cam[:, 2]
    safe = np.where(np.abs(depth) < 1e-12, 1e-12, depth)
    px = cam.fx * (p_cam[:, 0] / safe) + cam.cx - 0.5
    py = -cam.fy * (p_cam[:, 1] / safe) + cam.cy - 0.5
    return np.stack([px, py], axis=-1), depth


def plucker(origin, dir) -> np.ndarray:
    """Plucker embedding (v, v x o) of an oriented line. Broadcasts over leading dims."""
    o = np.asarray(origin, dtype=np.float64)
    v = np.asarray(dir, dtype=np.float64)
    return np.concatenate([v, np.cross(v, o)], axis=-1)


def ray_aabb(origin, dir, box: AABB) -> tuple[float, float] | None:
    """Slab-method ray/box intersection.

    Returns (t_near, t_far) with t_near clamped to 0 when the origin is
    inside, or None when the box has no positive-extent overlap ahead of
    the origin.
    """
    o = _as_vec3(origin)
    d = _as_vec3(dir)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        inv = 1.0 / d
        t_lo = (box.lo - o) * inv
        t_hi = (box.hi - o) * inv
    # Rays parallel to a slab: inside -> (-inf, inf), outside -> empty.
    para = d == 0.0
    if np.any(para):
        inside = (o >= box.lo) & (o <= box.hi)
        if np.any(para & ~inside):
            return None
        t_lo = np.where(para, -np.inf, t_lo)
        t_hi = np.where(para, np.inf, t_hi)
    t0 = float(np.max(np.minimum(t_lo, t_hi)))
    t1 = float(np.min(np.maximum(t_lo, t_hi)))
    t0 = max(t0, 0.0)
    if t0 < t1 and t1 > 0.0:
        return t0, t1
    return None


def ray_aabb_batch(origins: np.ndarray, dirs: np.ndarray,
                   box: AABB) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized slab intersection for N rays against one box.

    Returns (t_near, t_far, hit); t values are meaningful only where hit
    is True. Matches ray_aabb semantics, including the clamp of t_near
    to 0 for interior origins.
    """
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(dirs, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        inv = 1.0 / d
        t_a = (box.lo - o) * inv  # 0 * inf -> nan only for on-boundary grazes
        t_b = (box.hi - o) * inv
    t0 = np.max(np.fmin(t_a, t_b), axis=-1)
    t1 = np.min(np.fmax(t_a, t_b), axis=-1)
    t0 = np.maximum(t0, 0.0)
    hit = (t0 < t1) & (t1 > 0.0) & np.isfinite(t0) & np.isfinite(t1)
    return t0, t1, hit


def _splitmix64(x: np.ndarray) -> np.ndarray:
    """SplitMix64 finalizer; counter-based hashing for reproducible jitter."""
    z = (x + np.uint64(0x9E3779B97F4A7C15)).astype(np.uint64)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def hash_uniform(seed: int, index: np.ndarray, n: int) -> np.ndarray:
    """Deterministic uniforms in [0,1): shape (len(index), n), keyed by (seed, index, k)."""
    idx = np.asarray(index, dtype=np.uint64).reshape(-1, 1)
    k = np.arange(n, dtype=np.uint64).reshape(1, -1)
    base = _splitmix64(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + _splitmix64(idx))
    bits = _splitmix64(base + k)
    return (bits >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


def stratified_samples(t_near: float, t_far: float, n: int,
                       jitter: bool = False, seed: int = 0) -> np.ndarray:
    """n strictly increasing parameters in [t_near, t_far].

    Bin midpoints when jitter is off; one uniform draw per equal bin when
    on, reproducible from the seed.
    """
    if not t_near < t_far:
        raise ContractViolation(f"need t_near < t_far, got ({t_near}, {t_far})")
    if n < 1:
        raise ContractViolation("need n >= 1")
    if jitter:
        u = hash_uniform(seed, np.array([0]), n)[0]
    else:
        u = np.full(n, 0.5)
    h = (t_far - t_near) / n
    return t_near + (np.arange(n) + u) * h
