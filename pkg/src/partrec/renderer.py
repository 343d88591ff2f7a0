"""SDF volume rendering of parts and alpha-composited articulated scenes.

Per pixel the pipeline is: pull the camera ray back into each part's
rest frame at the requested state, intersect with the part's box,
stratify samples over the hit segment, evaluate density and color from
the part's field, merge everything along the ray by world-space depth
(rigid inverse transforms preserve the parameterization), and composite
front to back with transmittance weights.

Sample positions, segments, and the merge order are computed in numpy
float64 and treated as constants; field evaluation and compositing run
in torch so gradients flow to plane features and head parameters. Pose
gradients are cut by default and only enabled via `pose_grad`, which
recomputes query coordinates through torch copies of the articulation
tensors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .field import density
from .geometry import Camera, ContractViolation, camera_rays, hash_uniform, ray_aabb_batch
from .kinematics import ArticulationParams, MotionType, inverse_transform_ray


@dataclass(frozen=True)
class BetaSchedule:
    """Linear ramp of 1/beta from start to end over total_steps."""

    inv_beta_start: float
    inv_beta_end: float
    total_steps: int

    def __post_init__(self):
        if not (0 < self.inv_beta_start <= self.inv_beta_end):
            raise ContractViolation(
                f"need 0 < inv_beta_start <= inv_beta_end, got "
                f"({self.inv_beta_start}, {self.inv_beta_end})")
        if self.total_steps < 1:
            raise ContractViolation("total_steps must be >= 1")


def anneal_beta(sched: BetaSchedule, step: int) -> float:
    frac = min(max(step / sched.total_steps, 0.0), 1.0)
    inv = sched.inv_beta_start + frac * (sched.inv_beta_end - sched.inv_beta_start)
    return 1.0 / inv


@dataclass
class PartInstance:
    """One renderable part: a queryable field plus explicit articulation.

    field exposes `dtype` and `query(x) -> (sdf, rgb)` over rest-frame
    world points; learned hexa-plane fields and the data generator's
    analytic primitives both fit. pose_tensors optionally carries torch
    copies of (axis, pivot, schedule) so `pose_grad` rendering can
    differentiate through the pose; `params` remains the source of truth
    for sampling geometry.
    """

    field: object
    params: ArticulationParams
    pose_tensors: dict | None = None


@dataclass
class RenderOutput:
    rgb: torch.Tensor    # [H, W, 3] in [0, 1]
    mask: torch.Tensor   # [H, W] accumulated opacity in [0, 1]
    depth: torch.Tensor  # [H, W] expected ray parameter, 0 on misses


def _rodrigues_t(axis: torch.Tensor, angle: torch.Tensor) -> torch.Tensor:
    """Torch twin of kinematics.rotation_matrix, same tiny-angle fallback."""
    ax, ay, az = axis[0], axis[1], axis[2]
    zero = torch.zeros((), dtype=axis.dtype)
    k = torch.stack([
        torch.stack([zero, -az, ay]),
        torch.stack([az, zero, -ax]),
        torch.stack([-ay, ax, zero]),
    ])
    eye = torch.eye(3, dtype=axis.dtype)
    if float(angle.detach().abs()) < 1e-8:
        return eye + angle * k
    return eye + torch.sin(angle) * k + (1.0 - torch.cos(angle)) * (k @ k)


def _inverse_rays_torch(o: torch.Tensor, v: torch.Tensor, pose: dict,
                        mtype: MotionType, state: int,
                        radius: float) -> tuple[torch.Tensor, torch.Tensor]:
    """inverse_transform_ray on torch tensors for the pose_grad path."""
    if mtype is MotionType.STATIC:
        return o, v
    s = pose["schedule"][state]
    if mtype is MotionType.PRISMATIC:
        return o - (2.0 * radius * s) * pose["axis"], v
    rot = _rodrigues_t(pose["axis"], -2.0 * torch.pi * s)
    pivot = pose["pivot"]
    return (o - pivot) @ rot.T + pivot, v @ rot.T


def render_composite(parts: list[PartInstance], state: int, cam: Camera,
                     beta: float, n_samples: int, radius: float = 0.5,
                     jitter_seed: int | None = None,
                     pose_grad: bool = False) -> RenderOutput:
    """Render all parts into one image by depth-merged compositing.

    Args:
        parts: at least one part; all planes must share a dtype.
        state: observation state index into each part's schedule.
        beta: density sharpness (smaller is harder surfaces).
        n_samples: stratified samples per part segment, >= 2.
        radius: scene bounding-sphere radius r.
        jitter_seed: None renders at bin midpoints; an int jitters each
            pixel's bins reproducibly (shared across parts, so output is
            still independent of part order).
        pose_grad: re-derive query points through pose_tensors so the
            pose receives gradients; sampling geometry stays fixed.

    Output is independent of the order of `parts`: samples are merged on
    content keys, not list position.
    """
    if len(parts) == 0:
        raise ContractViolation("render_composite needs at least one part")
    if n_samples < 2:
        raise ContractViolation("n_samples must be >= 2")
    dtype = parts[0].field.dtype
    h, w = cam.height, cam.width
    n_rays = h * w
    o_np, v_np = camera_rays(cam)  # [HW, 3] float64

    # per-part gathered sample data, flat over (hit ray, sample)
    rid_chunks: list[np.ndarray] = []
    t_chunks: list[np.ndarray] = []
    dt_chunks: list[np.ndarray] = []
    sigma_chunks: list[torch.Tensor] = []
    rgb_chunks: list[torch.Tensor] = []

    for part in parts:
        p = part.params
        oh, vh = inverse_transform_ray(o_np, v_np, p, state, radius)
        t0, t1, hit = ray_aabb_batch(oh, vh, p.box)
        if not np.any(hit):
            continue
        rid = np.nonzero(hit)[0]  # [M]
        m = len(rid)
        seg = (t1[rid] - t0[rid])[:, None]  # [M, 1]
        if jitter_seed is None:
            u = np.full((m, n_samples), 0.5)
        else:
            u = hash_uniform(jitter_seed, rid, n_samples)  # keyed by pixel
        step = seg / n_samples
        ts = t0[rid][:, None] + (np.arange(n_samples) + u) * step  # [M, S]
        deltas = np.empty_like(ts)
        deltas[:, :-1] = ts[:, 1:] - ts[:, :-1]
        deltas[:, -1] = t1[rid] - ts[:, -1]

        if pose_grad:
            if part.pose_tensors is None:
                raise ContractViolation("pose_grad render needs pose_tensors")
            pt = part.pose_tensors
            o_t = torch.as_tensor(o_np[rid], dtype=dtype)
            v_t = torch.as_tensor(v_np[rid], dtype=dtype)
            oh_t, vh_t = _inverse_rays_torch(o_t, v_t, pt, p.motion_type,
                                             state, radius)
            ts_t = torch.as_tensor(ts, dtype=dtype)
            x = oh_t[:, None, :] + ts_t[:, :, None] * vh_t[:, None, :]
            x = x.reshape(-1, 3)
        else:
            x_np = oh[rid][:, None, :] + ts[..., None] * vh[rid][:, None, :]
            x = torch.as_tensor(x_np.reshape(-1, 3), dtype=dtype)

        s_vals, rgb_vals = part.field.query(x)
        sigma_chunks.append(density(s_vals, beta))
        rgb_chunks.append(rgb_vals)
        rid_chunks.append(np.repeat(rid, n_samples))
        t_chunks.append(ts.reshape(-1))
        dt_chunks.append(deltas.reshape(-1))

    zero_img = torch.zeros(h, w, dtype=dtype)
    if not rid_chunks:
        return RenderOutput(torch.zeros(h, w, 3, dtype=dtype), zero_img.clone(),
                            zero_img.clone())

    rid_all = np.concatenate(rid_chunks)
    t_all = np.concatenate(t_chunks)
    dt_all = np.concatenate(dt_chunks)
    sigma_all = torch.cat(sigma_chunks)
    rgb_all = torch.cat(rgb_chunks)

    # content-keyed merge order: equal-content ties compose identically,
    # so permuting the part list cannot change the image
    sig_np = sigma_all.detach().double().numpy()
    col_np = rgb_all.detach().double().numpy()
    perm = np.lexsort((col_np[:, 2], col_np[:, 1], col_np[:, 0],
                       dt_all, sig_np, t_all, rid_all))
    rid_s = rid_all[perm]
    perm_t = torch.as_tensor(perm)
    sigma_s = sigma_all[perm_t]
    rgb_s = rgb_all[perm_t]
    t_s = torch.as_tensor(t_all[perm], dtype=dtype)
    dt_s = torch.as_tensor(dt_all[perm], dtype=dtype)

    # transmittance via exact log: 1 - alpha = exp(-sigma*delta)
    optical = sigma_s * dt_s
    cum = torch.cumsum(optical, dim=0) - optical  # exclusive, global
    starts, counts = np.unique(rid_s, return_index=True, return_counts=True)[1:]
    seg_base = cum[torch.as_tensor(np.repeat(starts, counts))]
    trans = torch.exp(-(cum - seg_base))
    alpha = 1.0 - torch.exp(-optical)
    weights = trans * alpha

    rid_t = torch.as_tensor(rid_s)
    rgb_flat = torch.zeros(n_rays, 3, dtype=dtype).index_add(
        0, rid_t, weights[:, None] * rgb_s)
    mask_flat = torch.zeros(n_rays, dtype=dtype).index_add(0, rid_t, weights)
    depth_acc = torch.zeros(n_rays, dtype=dtype).index_add(0, rid_t, weights * t_s)
    depth_flat = depth_acc / mask_flat.clamp_min(1e-8)

    return RenderOutput(rgb_flat.reshape(h, w, 3), mask_flat.reshape(h, w),
                        depth_flat.reshape(h, w))


def render_part(part: PartInstance, state: int, cam: Camera, beta: float,
                n_samples: int, radius: float = 0.5,
                jitter_seed: int | None = None,
                pose_grad: bool = False) -> RenderOutput:
    """Render one part alone; exactly the single-element composite."""
    return render_composite([part], state, cam, beta, n_samples, radius=radius,
                            jitter_seed=jitter_seed, pose_grad=pose_grad)
