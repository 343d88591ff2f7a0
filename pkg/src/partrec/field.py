"""Per-part hexa-plane feature fields with SDF and color heads.

A part's geometry lives on six feature planes (two per axis pair). A
query point in the part's normalized box frame picks one plane of each
pair by the sign of its out-of-plane coordinate, bilinearly samples the
three chosen planes, and concatenates the results. Small MLP heads map
the feature to an SDF value (plus a sphere-shaped bias so an untrained
field is a small sphere) and an RGB color.

Everything here is torch and differentiable with respect to plane
values and head parameters.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from .geometry import ContractViolation

# Plane storage order; (pair, sign) -> index 2*pair + (0 if + else 1).
PLANE_ORDER = ("xy+", "xy-", "yz+", "yz-", "xz+", "xz-")
# In-plane coordinate axes per pair and the out-of-plane axis deciding the sign.
_PAIR_AXES = ((0, 1, 2), (1, 2, 0), (0, 2, 1))  # (u, v, w) for xy, yz, xz

SPHERE_BIAS_SCALE = 0.1  # untrained level set: sphere of radius 0.1*r


def query_features(planes: torch.Tensor, x_local: torch.Tensor,
                   validate: bool = True) -> torch.Tensor:
    """Sample the six planes at normalized part coordinates.

    Args:
        planes: [6, R, R, C] feature grids in PLANE_ORDER; grid node i of
            an in-plane axis sits at coordinate -1 + 2i/(R-1).
        x_local: [N, 3] query points, componentwise in [-1, 1].
        validate: raise on out-of-range coordinates (a 1e-6 overshoot is
            clamped silently to absorb float noise from box rescaling).

    Returns:
        [N, 3*C] features, pair order (xy, yz, xz).
    """
    if planes.ndim != 4 or planes.shape[0] != 6 or planes.shape[1] != planes.shape[2]:
        raise ContractViolation(f"planes must be [6, R, R, C], got {tuple(planes.shape)}")
    r = planes.shape[1]
    if r < 2:
        raise ContractViolation("plane resolution must be at least 2")
    if validate:
        bound = x_local.abs().max()
        if bound > 1.0 + 1e-6:
            raise ContractViolation(f"query coordinate out of [-1,1]: max |x| = {bound}")
    x = x_local.clamp(-1.0, 1.0)

    c = planes.shape[3]
    flat = planes.reshape(6 * r * r, c)
    feats = []
    for pair, (au, av, aw) in enumerate(_PAIR_AXES):
        u, v, w = x[:, au], x[:, av], x[:, aw]
        sel = torch.where(w >= 0, 2 * pair, 2 * pair + 1)  # [N]
        gu = (u + 1.0) * 0.5 * (r - 1)
        gv = (v + 1.0) * 0.5 * (r - 1)
        iu0 = gu.floor().long().clamp(0, r - 2)
        iv0 = gv.floor().long().clamp(0, r - 2)
        fu = (gu - iu0).unsqueeze(-1)  # [N, 1]
        fv = (gv - iv0).unsqueeze(-1)
        base = sel * (r * r)
        i00 = base + iu0 * r + iv0
        g00 = flat[i00]            # [N, C]
        g10 = flat[i00 + r]
        g01 = flat[i00 + 1]
        g11 = flat[i00 + r + 1]
        top = g00 * (1 - fu) + g10 * fu
        bot = g01 * (1 - fu) + g11 * fu
        feats.append(top * (1 - fv) + bot * fv)
    return torch.cat(feats, dim=-1)


class HexaPlane(nn.Module):
    """Learnable six-plane feature grid for one part."""

    def __init__(self, resolution: int = 16, channels: int = 8, init_scale: float = 0.1):
        super().__init__()
        if resolution < 2:
            raise ContractViolation("plane resolution must be at least 2")
        self.resolution = resolution
        self.channels = channels
        self.planes = nn.Parameter(
            init_scale * torch.randn(6, resolution, resolution, channels))

    def forward(self, x_local: torch.Tensor) -> torch.Tensor:
        return query_features(self.planes, x_local)


class FieldHeads(nn.Module):
    """Shared SDF and color heads over concatenated plane features.

    The final layers start at zero so a fresh field is exactly the
    sphere bias with mid-grey color.
    """

    def __init__(self, channels: int = 8, hidden: int = 32):
        super().__init__()
        d = 3 * channels
        self.sdf_mlp = nn.Sequential(
            nn.Linear(d, hidden), nn.GELU(),
            nn.Linear(hidden, hidden), nn.GELU(),
            nn.Linear(hidden, 1),
        )
        self.color_mlp = nn.Sequential(
            nn.Linear(d, hidden), nn.GELU(),
            nn.Linear(hidden, hidden), nn.GELU(),
            nn.Linear(hidden, 3),
        )
        nn.init.zeros_(self.sdf_mlp[-1].weight)
        nn.init.zeros_(self.sdf_mlp[-1].bias)
        nn.init.zeros_(self.color_mlp[-1].weight)
        nn.init.zeros_(self.color_mlp[-1].bias)


def sdf(planes: torch.Tensor, heads: FieldHeads, x_local: torch.Tensor,
        half_extent: torch.Tensor, radius: float) -> torch.Tensor:
    """SDF at normalized part coordinates, in scene length units.

    Args:
        planes: [6, R, R, C] grids.
        x_local: [N, 3] in [-1, 1].
        half_extent: [3] part-box half sizes; x_local * half_extent is the
            offset from the box center in scene units.
        radius: scene bounding-sphere radius r.

    Returns:
        [N] SDF values: head output plus the bias |x_local * half_extent| -
        0.1*r, so a zeroed head yields a sphere of radius 0.1*r at the
        box center.
    """
    feats = query_features(planes, x_local)
    raw = heads.sdf_mlp(feats).squeeze(-1)  # [N]
    offset = x_local * half_extent  # [N, 3] in scene units
    bias = offset.norm(dim=-1) - SPHERE_BIAS_SCALE * radius
    return raw + bias


def color(planes: torch.Tensor, heads: FieldHeads, x_local: torch.Tensor) -> torch.Tensor:
    """View-independent RGB in (0,1) at normalized part coordinates. [N, 3].

    The clamp keeps the open interval under float saturation; 1e-6 is
    wide enough to survive float32 rounding at 1.0.
    """
    feats = query_features(planes, x_local)
    return torch.sigmoid(heads.color_mlp(feats)).clamp(1e-6, 1.0 - 1e-6)


def density(s: torch.Tensor, beta: float) -> torch.Tensor:
    """Laplace-CDF density in [0, 1]: sharp step at the surface as beta -> 0.

    sigma = 1/2 exp(-s/beta) outside (s >= 0), 1 - 1/2 exp(s/beta) inside.
    """
    if beta <= 0:
        raise ContractViolation(f"beta must be positive, got {beta}")
    half = 0.5 * torch.exp(-s.abs() / beta)
    return torch.where(s >= 0, half, 1.0 - half)


class HexaPlaneField:
    """Field view of (planes, heads) over one part's box.

    Adapts the normalized-coordinate plane machinery to the renderer's
    field protocol: `query` takes rest-frame world points and returns
    (sdf, rgb). center and size may be torch tensors to let pose or box
    gradients flow; arrays are converted as constants.
    """

    def __init__(self, planes: torch.Tensor, heads: FieldHeads, center, size,
                 radius: float):
        self.planes = planes
        self.heads = heads
        self.radius = radius
        self.center = torch.as_tensor(center, dtype=planes.dtype)
        self.size = torch.as_tensor(size, dtype=planes.dtype)

    @property
    def dtype(self) -> torch.dtype:
        return self.planes.dtype

    def query(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(sdf [N], rgb [N, 3]) at rest-frame world points x [N, 3].

        Points are clamped into the box, so callers may pass samples a
        float rounding away from the faces. One plane lookup feeds both
        heads.
        """
        half = self.size / 2.0
        x_local = ((x - self.center) / half).clamp(-1.0, 1.0)
        feats = query_features(self.planes, x_local, validate=False)
        bias = (x_local * half).norm(dim=-1) - SPHERE_BIAS_SCALE * self.radius
        s = self.heads.sdf_mlp(feats).squeeze(-1) + bias
        rgb = torch.sigmoid(self.heads.color_mlp(feats)).clamp(1e-6, 1.0 - 1e-6)
        return s, rgb


def normal(planes: torch.Tensor, heads: FieldHeads, x_local: torch.Tensor,
           half_extent: torch.Tensor, radius: float,
           eps: float = 1e-3) -> tuple[torch.Tensor, torch.Tensor]:
    """Unit surface normal from central differences of the SDF.

    eps is the step in normalized box coordinates (a fraction of the
    part-box extent). Points must sit at least eps inside [-1,1]^3.

    Returns:
        normals: [N, 3] unit vectors in scene-unit gradient direction;
            zero where degenerate.
        valid: [N] bool, False where the gradient vanished.
    """
    n = x_local.shape[0]
    offsets = torch.zeros(6, n, 3, dtype=x_local.dtype, device=x_local.device)
    for axis in range(3):
        offsets[2 * axis, :, axis] = eps
        offsets[2 * axis + 1, :, axis] = -eps
    probes = (x_local.unsqueeze(0) + offsets).reshape(6 * n, 3)
    vals = sdf(planes, heads, probes, half_extent, radius).reshape(6, n)
    # divide per-axis by the object-space step so anisotropic boxes give
    # a true spatial gradient
    step = 2.0 * eps * half_extent  # [3]
    grad = torch.stack([(vals[0] - vals[1]), (vals[2] - vals[3]),
                        (vals[4] - vals[5])], dim=-1) / step
    norm = grad.norm(dim=-1, keepdim=True)
    valid = norm.squeeze(-1) > 1e-12
    out = torch.where(valid.unsqueeze(-1), grad / norm.clamp_min(1e-12),
                      torch.zeros_like(grad))
    return out, valid
