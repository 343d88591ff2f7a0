"""Part-slot transformer: images and rays in, per-part fields and joints out.

Images are cut into non-overlapping patches; each patch token carries
its raw pixels plus per-pixel Plucker ray coordinates (and optional
externally provided semantic features), projected to the embed width
and tagged with a learned per-state stage embedding. A bank of learned
slot tokens (M geometry tokens and one articulation token per slot)
exchanges information with the image tokens through interleaved
cross/self attention blocks. Each surviving slot decodes into six
feature planes (geometry tokens own fixed q x q patches) and one raw
articulation vector.

There are no positional embeddings beyond the ray and stage terms, so
image tokens within a state are an unordered set.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .field import FieldHeads
from .geometry import Camera, ContractViolation, camera_rays, plucker
from .kinematics import RAW_FIXED


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 64
    n_heads: int = 4
    n_blocks: int = 8
    cross_ratio: float = 0.75       # fraction of blocks that cross-attend
    patch_size: int = 8
    slot_count: int = 4             # P0, slot 0 is the base part
    plane_res: int = 16             # R_plane
    plane_patch: int = 8            # q, side of the patch one token owns
    feat_dim: int = 8               # C_feat
    state_count: int = 2            # T
    semantic_features: bool = False
    semantic_dim: int = 16
    cross_reversed: bool = False    # swap query/key-value roles in cross blocks

    def __post_init__(self):
        if self.embed_dim % self.n_heads:
            raise ContractViolation("embed_dim must divide by n_heads")
        if self.plane_res % self.plane_patch:
            raise ContractViolation("plane_res must divide by plane_patch")
        if self.slot_count < 2:
            raise ContractViolation("need at least a base slot and one movable slot")
        if not 0.0 <= self.cross_ratio <= 1.0:
            raise ContractViolation("cross_ratio must lie in [0, 1]")

    @property
    def tokens_per_slot(self) -> int:
        # one geometry token per q x q patch across all six planes
        return 6 * (self.plane_res // self.plane_patch) ** 2

    @property
    def raw_dim(self) -> int:
        return RAW_FIXED + self.state_count

    @property
    def token_in_dim(self) -> int:
        per_pixel = 3 + 6  # rgb + plucker
        extra = self.semantic_dim if self.semantic_features else 0
        return self.patch_size ** 2 * per_pixel + extra


def block_is_self(index: int, cross_ratio: float) -> bool:
    """Spread self blocks evenly: flip wherever the self quota increments."""
    frac = 1.0 - cross_ratio
    return math.floor((index + 1) * frac) > math.floor(index * frac)


@dataclass
class PartSlotOutput:
    planes: torch.Tensor            # [6, R, R, C]
    heads: FieldHeads               # shared across slots
    raw_articulation: torch.Tensor  # [14 + T]


def no_features(images, cams, cfg) -> None:
    """Default semantic provider: feature channel disabled."""
    return None


class RandomPatchFeatures:
    """Fixed random projection of patch pixels, for ablation plumbing."""

    def __init__(self, dim: int, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self._proj = None

    def __call__(self, images: np.ndarray, cams, cfg: ModelConfig) -> np.ndarray:
        p = cfg.patch_size
        v, t, h, w, _ = images.shape
        if self._proj is None:
            rng = np.random.default_rng(self.seed)
            self._proj = rng.normal(size=(p * p * 3, self.dim)) / math.sqrt(p * p * 3)
        patches = images.reshape(v, t, h // p, p, w // p, p, 3)
        patches = patches.transpose(0, 1, 2, 4, 3, 5, 6).reshape(
            v, t, h // p, w // p, p * p * 3)
        return patches @ self._proj


class AttentionBlock(nn.Module):
    """Pre-norm attention + MLP, both residual."""

    def __init__(self, dim: int, heads: int, cross: bool):
        super().__init__()
        self.cross = cross
        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim) if cross else None
        self.attn = nn.MultiheadAttention(dim, heads)
        self.norm_mlp = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 4 * dim), nn.GELU(),
                                 nn.Linear(4 * dim, dim))

    def forward_self(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm_q(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm_mlp(x))

    def forward_cross(self, q: torch.Tensor, kv: torch.Tensor) -> torch.Tensor:
        """Updates the query stream against the key/value stream."""
        hq, hkv = self.norm_q(q), self.norm_kv(kv)
        q = q + self.attn(hq, hkv, hkv, need_weights=False)[0]
        return q + self.mlp(self.norm_mlp(q))


class PartSlotTransformer(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        torch.manual_seed(seed)
        d = cfg.embed_dim

        self.patch_embed = nn.Linear(cfg.token_in_dim, d)
        self.stage_embed = nn.Parameter(torch.empty(cfg.state_count, d))
        self.slot_tokens = nn.Parameter(
            torch.empty(cfg.slot_count, cfg.tokens_per_slot + 1, d))
        self.blocks = nn.ModuleList([
            AttentionBlock(d, cfg.n_heads, cross=not block_is_self(i, cfg.cross_ratio))
            for i in range(cfg.n_blocks)])
        self.plane_head = nn.Linear(d, cfg.plane_patch ** 2 * cfg.feat_dim)
        self.artic_head = nn.Sequential(nn.Linear(d, d), nn.GELU(),
                                        nn.Linear(d, cfg.raw_dim))
        self.field_heads = FieldHeads(cfg.feat_dim)
        self._init_weights()

    def _init_weights(self):
        for module in self.modules():
            if isinstance(module, nn.Linear):
                nn.init.trunc_normal_(module.weight, std=0.02)
                if module.bias is not None:
                    nn.init.zeros_(module.bias)
            elif isinstance(module, nn.MultiheadAttention):
                nn.init.trunc_normal_(module.in_proj_weight, std=0.02)
                nn.init.zeros_(module.in_proj_bias)
                nn.init.trunc_normal_(module.out_proj.weight, std=0.02)
                nn.init.zeros_(module.out_proj.bias)
        nn.init.trunc_normal_(self.stage_embed, std=0.02)
        nn.init.trunc_normal_(self.slot_tokens, std=0.02)
        # fresh fields must be the bias sphere with grey color
        nn.init.zeros_(self.field_heads.sdf_mlp[-1].weight)
        nn.init.zeros_(self.field_heads.sdf_mlp[-1].bias)
        nn.init.zeros_(self.field_heads.color_mlp[-1].weight)
        nn.init.zeros_(self.field_heads.color_mlp[-1].bias)
        # articulation starts at the sigmoid midpoints (centered box, zero
        # dynamics); the axis slice is not squashed, so its bias must be a
        # valid direction rather than the degenerate zero vector
        final = self.artic_head[-1]
        nn.init.zeros_(final.weight)
        nn.init.zeros_(final.bias)
        with torch.no_grad():
            final.bias[8] = 1.0

    def patch_features(self, images: np.ndarray, cams,
                       provider=no_features) -> np.ndarray:
        """Raw per-patch input rows for a V x T grid of images and cameras.

        This is the learning-free half of tokenize: pixel colors and
        plucker ray coordinates flattened per patch (plus optional
        semantic features). It depends only on the data, so callers may
        compute it once and re-embed as weights change.

        Args:
            images: [V, T, H, W, 3] floats in [0, 1].
            cams: nested (V, T) list of Cameras matching the image grid.
            provider: semantic feature source, consulted only when the
                config enables semantic features.

        Returns:
            [V, T, (H/p)*(W/p), token_in_dim] rows, ordered by
            (patch row, patch column) within each (view, state).
        """
        cfg = self.cfg
        p = cfg.patch_size
        if images.ndim != 5 or images.shape[4] != 3:
            raise ContractViolation(f"images must be [V,T,H,W,3], got {images.shape}")
        v, t, h, w, _ = images.shape
        if t != cfg.state_count:
            raise ContractViolation(f"expected {cfg.state_count} states, got {t}")
        if h % p or w % p:
            raise ContractViolation("image size must divide by patch size")

        sem = None
        if cfg.semantic_features:
            sem = provider(images, cams, cfg)
            if sem is None:
                raise ContractViolation(
                    "semantic features enabled but the provider returned none")

        rows = np.empty((v, t, (h // p) * (w // p), cfg.token_in_dim))
        for vi in range(v):
            for ti in range(t):
                o, d = camera_rays(cams[vi][ti])  # [H*W, 3] each
                rays = plucker(o, d).reshape(h, w, 6)
                per_pixel = np.concatenate([images[vi, ti], rays], axis=-1)
                patches = per_pixel.reshape(h // p, p, w // p, p, 9)
                patches = patches.transpose(0, 2, 1, 3, 4).reshape(-1, p * p * 9)
                if sem is not None:
                    patches = np.concatenate(
                        [patches, sem[vi, ti].reshape(patches.shape[0], -1)], axis=-1)
                rows[vi, ti] = patches
        return rows

    def embed_tokens(self, patches: np.ndarray) -> torch.Tensor:
        """Project patch rows and add state embeddings.

        Returns [V*T*n, embed_dim] tokens ordered by (view, state,
        patch row, patch column).
        """
        dtype = self.patch_embed.weight.dtype
        v, t, n, _ = patches.shape
        x = self.patch_embed(torch.as_tensor(patches.reshape(v * t * n, -1),
                                             dtype=dtype))
        x = x.reshape(v, t, n, -1) + self.stage_embed[None, :, None, :]
        return x.reshape(v * t * n, -1)

    def tokenize(self, images: np.ndarray, cams, provider=no_features) -> torch.Tensor:
        """Image-token sequence from a V x T grid of images and cameras."""
        return self.embed_tokens(self.patch_features(images, cams, provider))

    def encode(self, image_tokens: torch.Tensor) -> torch.Tensor:
        """Run the block stack; returns final slot tokens [P0, M+1, D]."""
        cfg = self.cfg
        img = image_tokens
        part = self.slot_tokens.reshape(-1, cfg.embed_dim)
        for block in self.blocks:
            if not block.cross:
                n_img = img.shape[0]
                both = block.forward_self(torch.cat([img, part], dim=0))
                img, part = both[:n_img], both[n_img:]
            elif cfg.cross_reversed:
                part = block.forward_cross(part, img)
            else:
                img = block.forward_cross(img, part)
        return part.reshape(cfg.slot_count, cfg.tokens_per_slot + 1, cfg.embed_dim)

    def decode_slot(self, slot_tokens: torch.Tensor) -> PartSlotOutput:
        """One slot's final tokens [M+1, D] -> planes and raw articulation."""
        cfg = self.cfg
        n_pp = cfg.plane_res // cfg.plane_patch
        q, c = cfg.plane_patch, cfg.feat_dim
        geo, art = slot_tokens[:-1], slot_tokens[-1]
        patches = self.plane_head(geo).reshape(cfg.tokens_per_slot, q, q, c)
        planes = patches.reshape(6, n_pp, n_pp, q, q, c)
        planes = planes.permute(0, 1, 3, 2, 4, 5).reshape(
            6, cfg.plane_res, cfg.plane_res, c)
        raw = self.artic_head(art)
        return PartSlotOutput(planes=planes, heads=self.field_heads,
                              raw_articulation=raw)

    def forward(self, image_tokens: torch.Tensor, num_parts: int) -> list[PartSlotOutput]:
        """Predict fields and articulation for the first num_parts slots."""
        if not 1 <= num_parts <= self.cfg.slot_count:
            raise ContractViolation(
                f"num_parts must be in [1, {self.cfg.slot_count}], got {num_parts}")
        final = self.encode(image_tokens)
        return [self.decode_slot(final[p]) for p in range(num_parts)]

    def predict(self, images: np.ndarray, cams, num_parts: int,
                provider=no_features) -> list[PartSlotOutput]:
        return self.forward(self.tokenize(images, cams, provider), num_parts)


def remap_raw_torch(raw: torch.Tensor, radius: float,
                    num_states: int) -> dict[str, torch.Tensor]:
    """Differentiable twin of kinematics.remap_articulation.

    Returns the remapped quantities as tensors for direct supervision;
    the numpy remap stays authoritative for rendering and export.
    """
    if raw.shape != (RAW_FIXED + num_states,):
        raise ContractViolation(
            f"raw vector must have shape ({RAW_FIXED + num_states},), got "
            f"{tuple(raw.shape)}")
    r = radius
    axis_raw = raw[8:11]
    return {
        "center": 2 * r * torch.sigmoid(raw[0:3]) - r,
        "size": 2 * r * torch.sigmoid(raw[3:6]),
        "type_logits": raw[6:8],
        "axis": axis_raw / axis_raw.norm().clamp_min(1e-8),
        "pivot": 2 * r * torch.sigmoid(raw[11:14]) - r,
        "schedule": 2 * torch.sigmoid(raw[RAW_FIXED:]) - 1,
    }


def count_parameters(cfg: ModelConfig) -> int:
    """Exact learned-scalar count for a config."""
    model = PartSlotTransformer(cfg, seed=0)
    return sum(p.numel() for p in model.parameters())
