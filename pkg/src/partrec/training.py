"""Losses, curricula, and the optimizer loop tying model to renderer.

Supervision is per part: slot i renders against the isolated images of
ordered ground-truth part i, with direct penalties on the decoded box,
motion type, axis, pivot, and dynamics. A composite-image term exists
but is off by default.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .datagen import SceneTruth, composite_stack, scale_camera
from .field import HexaPlaneField
from .formats import load_checkpoint, save_checkpoint
from .geometry import ContractViolation
from .kinematics import MotionType, remap_articulation
from .model import (ModelConfig, PartSlotOutput, PartSlotTransformer,
                    no_features, remap_raw_torch)
from .renderer import (BetaSchedule, PartInstance, anneal_beta,
                       render_composite, render_part)

__all__ = [
    "LossWeights", "ResolutionSchedule", "TrainConfig", "TrainResult",
    "TrainingDiverged", "axis_alignment_loss", "block_mean",
    "checkpoint_model", "per_part_losses", "pretrain_weights",
    "restore_model", "train",
]

LOSS_TERMS = ("rgb", "mask", "type", "box", "axis", "pivot", "dyn", "composite")


@dataclass(frozen=True)
class LossWeights:
    """Non-negative weights for each supervision term."""

    w_rgb: float = 1.0
    w_mask: float = 1.0
    w_type: float = 1.0
    w_box: float = 1.0
    w_axis: float = 1.0
    w_pivot: float = 1.0
    w_dyn: float = 1.0
    w_composite: float = 0.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if not (math.isfinite(value) and value >= 0):
                raise ContractViolation(
                    f"{f.name} must be finite and >= 0, got {value}")

    def term(self, name: str) -> float:
        return getattr(self, f"w_{name}")


def pretrain_weights(weights: LossWeights) -> LossWeights:
    """Rendering-and-box objective: articulation terms switched off."""
    return dataclasses.replace(weights, w_type=0.0, w_axis=0.0,
                               w_pivot=0.0, w_dyn=0.0)


@dataclass(frozen=True)
class ResolutionSchedule:
    """Supervise at low resolution, switching to high at switch_step."""

    low: int
    high: int
    switch_step: int

    def __post_init__(self):
        if not 0 < self.low <= self.high:
            raise ContractViolation(
                f"need 0 < low <= high, got ({self.low}, {self.high})")
        if self.switch_step < 0:
            raise ContractViolation("switch_step must be >= 0")

    def at(self, step: int) -> int:
        return self.low if step < self.switch_step else self.high


@dataclass(frozen=True)
class TrainConfig:
    steps: int
    lr: float = 3e-4
    warmup: int = 100
    adam_beta1: float = 0.9
    adam_beta2: float = 0.95
    weight_decay: float = 0.01
    batch_scenes: int = 1
    views_per_step: int = 0                          # 0: render every view
    n_samples: int = 32
    seed: int = 0
    beta: BetaSchedule | None = None                 # None: 1/beta 20 -> 200
    resolution: ResolutionSchedule | None = None     # None: half res, then full
    pretrain: bool = False
    log_every: int = 10
    checkpoint_every: int = 0                        # 0: final only
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if self.steps < 1:
            raise ContractViolation("steps must be >= 1")
        if self.lr < 0 or not math.isfinite(self.lr):
            raise ContractViolation(f"lr must be finite and >= 0, got {self.lr}")
        if self.warmup < 0:
            raise ContractViolation("warmup must be >= 0")
        if self.batch_scenes < 1:
            raise ContractViolation("batch_scenes must be >= 1")
        if self.views_per_step < 0:
            raise ContractViolation("views_per_step must be >= 0")
        if self.n_samples < 2:
            raise ContractViolation("n_samples must be >= 2")
        if self.log_every < 1:
            raise ContractViolation("log_every must be >= 1")


@dataclass
class TrainResult:
    model: PartSlotTransformer
    checkpoint_path: Path
    log_path: Path
    steps_run: int
    final_loss: float


class TrainingDiverged(RuntimeError):
    """Loss left the finite range; diagnostic state was dumped."""

    def __init__(self, step: int, breakdown: dict):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.breakdown = breakdown


def axis_alignment_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """MSE to the closer of the two sign choices of the target direction.

    An axis direction is only defined jointly with the dynamics sign, so
    D and -D describe the same joint.
    """
    direct = ((pred - gt) ** 2).mean()
    flipped = ((pred + gt) ** 2).mean()
    return torch.minimum(direct, flipped)


def block_mean(arr: np.ndarray, factor: int) -> np.ndarray:
    """Downsample (H, W, ...) by averaging factor x factor blocks."""
    if factor == 1:
        return arr
    h, w = arr.shape[:2]
    shaped = arr.reshape(h // factor, factor, w // factor, factor,
                         *arr.shape[2:])
    return shaped.mean(axis=(1, 3))


def _target_pair(img: dict, factor: int, dtype) -> tuple[torch.Tensor, torch.Tensor]:
    rgb = torch.as_tensor(block_mean(img["rgb"], factor), dtype=dtype)
    mask = torch.as_tensor(block_mean(img["mask"], factor), dtype=dtype)
    return rgb, mask


def _sub_seed(base: int | None, *indices: int) -> int | None:
    if base is None:
        return None
    h = base
    for i in indices:
        h = (h * 1000003 + i + 1) & 0x7FFFFFFF
    return h


def per_part_losses(preds: list[PartSlotOutput], truth: SceneTruth,
                    views=None, states=None,
                    weights: LossWeights = LossWeights(),
                    beta: float = 5e-3, resolution: int = 32,
                    n_samples: int = 32,
                    jitter_seed: int | None = None,
                    ) -> tuple[torch.Tensor, dict[str, float]]:
    """Weighted training loss for one scene plus a per-term breakdown.

    Slot i is supervised against ground-truth part i (the dataset's
    canonical order). Rendering terms are MSE against the isolated
    per-part images downsampled to the requested resolution; direct
    terms penalise the decoded articulation. Returns the total as a
    tensor (for backward) and a float breakdown including "total".
    """
    if truth.images is None:
        raise ContractViolation("truth scene has no images")
    if len(preds) != len(truth.parts):
        raise ContractViolation(
            f"part count mismatch: {len(preds)} predictions for "
            f"{len(truth.parts)} ground-truth parts")
    if truth.parts[0].articulation.motion_type is not MotionType.STATIC:
        raise ContractViolation("ground-truth part 0 must be the static base")

    radius = truth.frame.radius
    n_states = truth.frame.state_count
    data_res = truth.cameras[0][0].width
    factor, rem = divmod(data_res, resolution)
    if rem or factor < 1:
        raise ContractViolation(
            f"render resolution {resolution} must divide dataset "
            f"resolution {data_res}")
    views = range(len(truth.cameras)) if views is None else views
    states = range(n_states) if states is None else states

    dtype = preds[0].planes.dtype
    zero = torch.zeros((), dtype=dtype)
    terms = {name: zero for name in LOSS_TERMS}

    instances = []
    n_movable = 0
    for i, out in enumerate(preds):
        decoded = remap_raw_torch(out.raw_articulation, radius, n_states)
        params = remap_articulation(
            out.raw_articulation.detach().cpu().numpy(), radius, n_states,
            is_base=(i == 0))
        fld = HexaPlaneField(out.planes, out.heads, decoded["center"],
                             decoded["size"], radius)
        pose = {"axis": decoded["axis"], "pivot": decoded["pivot"],
                "schedule": decoded["schedule"]}
        instances.append(PartInstance(field=fld, params=params,
                                      pose_tensors=pose))

        gt = truth.parts[i].articulation
        gt_center = torch.as_tensor(gt.box.center, dtype=dtype)
        gt_size = torch.as_tensor(gt.box.size, dtype=dtype)
        terms["box"] = terms["box"] + ((decoded["center"] - gt_center) ** 2).mean() \
            + ((decoded["size"] - gt_size) ** 2).mean()
        if gt.motion_type is not MotionType.STATIC:
            n_movable += 1
            target = 0 if gt.motion_type is MotionType.PRISMATIC else 1
            terms["type"] = terms["type"] + F.cross_entropy(
                decoded["type_logits"][None, :],
                torch.tensor([target]))
            terms["axis"] = terms["axis"] + axis_alignment_loss(
                decoded["axis"], torch.as_tensor(gt.axis, dtype=dtype))
            terms["pivot"] = terms["pivot"] + ((decoded["pivot"]
                - torch.as_tensor(gt.pivot, dtype=dtype)) ** 2).mean()
            terms["dyn"] = terms["dyn"] + ((decoded["schedule"]
                - torch.as_tensor(gt.schedule, dtype=dtype)) ** 2).mean()

    terms["box"] = terms["box"] / len(preds)
    if n_movable:
        for name in ("type", "axis", "pivot", "dyn"):
            terms[name] = terms[name] / n_movable

    n_images = 0
    for v in views:
        for t in states:
            cam = scale_camera(truth.cameras[v][t], resolution)
            seed_vt = _sub_seed(jitter_seed, v, t)
            for i, inst in enumerate(instances):
                out_r = render_part(inst, t, cam, beta, n_samples,
                                    radius=radius,
                                    jitter_seed=_sub_seed(seed_vt, i),
                                    pose_grad=True)
                tgt_rgb, tgt_mask = _target_pair(
                    truth.images["parts"][i][v][t], factor, dtype)
                terms["rgb"] = terms["rgb"] + ((out_r.rgb - tgt_rgb) ** 2).mean()
                terms["mask"] = terms["mask"] + ((out_r.mask - tgt_mask) ** 2).mean()
                n_images += 1
            if weights.w_composite > 0:
                comp = render_composite(instances, t, cam, beta, n_samples,
                                        radius=radius,
                                        jitter_seed=_sub_seed(seed_vt, -1),
                                        pose_grad=True)
                tgt_rgb, tgt_mask = _target_pair(
                    truth.images["composite"][v][t], factor, dtype)
                terms["composite"] = terms["composite"] \
                    + ((comp.rgb - tgt_rgb) ** 2).mean() \
                    + ((comp.mask - tgt_mask) ** 2).mean()
    if n_images:
        terms["rgb"] = terms["rgb"] / n_images
        terms["mask"] = terms["mask"] / n_images
        terms["composite"] = terms["composite"] / (n_images // len(instances))

    total = zero
    for name in LOSS_TERMS:
        total = total + weights.term(name) * terms[name]
    breakdown = {name: float(terms[name].detach()) for name in LOSS_TERMS}
    breakdown["total"] = float(total.detach())
    return total, breakdown


def checkpoint_model(model: PartSlotTransformer, path, meta: dict | None = None) -> Path:
    arrays = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    save_checkpoint(path, arrays, meta)
    return Path(path)


def restore_model(model: PartSlotTransformer, path) -> dict:
    """Load a checkpoint into an existing model; returns the metadata."""
    tensors, meta = load_checkpoint(path)
    state = model.state_dict()
    if set(tensors) != set(state):
        raise ContractViolation("checkpoint keys do not match the model")
    for k, v in tensors.items():
        if tuple(v.shape) != tuple(state[k].shape):
            raise ContractViolation(
                f"checkpoint tensor {k} has shape {tuple(v.shape)}, model "
                f"expects {tuple(state[k].shape)}")
    model.load_state_dict({k: torch.as_tensor(v) for k, v in tensors.items()})
    return meta


def train(scenes: list[SceneTruth], model_cfg: ModelConfig, cfg: TrainConfig,
          out_dir, provider=no_features) -> TrainResult:
    """AdamW loop over loaded scenes with beta and resolution annealing.

    Writes a JSONL loss log and a final checkpoint (plus periodic ones
    when checkpoint_every > 0) into out_dir. A non-finite loss aborts
    with TrainingDiverged after dumping diagnostic state.
    """
    if not scenes:
        raise ContractViolation("dataset is empty")
    data_res = scenes[0].cameras[0][0].width
    for sc in scenes:
        if sc.images is None:
            raise ContractViolation("every scene needs images")
        if sc.frame.state_count != model_cfg.state_count:
            raise ContractViolation(
                f"scene has {sc.frame.state_count} states, model expects "
                f"{model_cfg.state_count}")
        if sc.cameras[0][0].width != data_res:
            raise ContractViolation("scenes disagree on image resolution")
        if len(sc.parts) > model_cfg.slot_count:
            raise ContractViolation(
                f"scene has {len(sc.parts)} parts, model has "
                f"{model_cfg.slot_count} slots")

    beta_sched = cfg.beta or BetaSchedule(20.0, 200.0, cfg.steps)
    res_sched = cfg.resolution or ResolutionSchedule(
        max(data_res // 2, 1), data_res, cfg.steps // 2)
    for r in (res_sched.low, res_sched.high):
        if data_res % r:
            raise ContractViolation(
                f"render resolution {r} must divide dataset resolution "
                f"{data_res}")
    weights = pretrain_weights(cfg.weights) if cfg.pretrain else cfg.weights

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "train_log.jsonl"
    ckpt_path = out / "model.ckpt"
    meta = {"model": dataclasses.asdict(model_cfg), "seed": cfg.seed}

    torch.manual_seed(cfg.seed)
    model = PartSlotTransformer(model_cfg, seed=cfg.seed)
    patch_rows = [model.patch_features(composite_stack(sc), sc.cameras,
                                       provider) for sc in scenes]
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr,
                            betas=(cfg.adam_beta1, cfg.adam_beta2),
                            weight_decay=cfg.weight_decay)

    last_total = math.nan
    with open(log_path, "w") as log:
        for step in range(cfg.steps):
            lr_now = cfg.lr
            if cfg.warmup:
                lr_now = cfg.lr * min(1.0, (step + 1) / cfg.warmup)
            for group in opt.param_groups:
                group["lr"] = lr_now
            beta = anneal_beta(beta_sched, step)
            res = res_sched.at(step)

            opt.zero_grad(set_to_none=True)
            batch = [(step * cfg.batch_scenes + j) % len(scenes)
                     for j in range(cfg.batch_scenes)]
            total = torch.zeros(())
            sums = dict.fromkeys((*LOSS_TERMS, "total"), 0.0)
            for idx in batch:
                sc = scenes[idx]
                views = None
                if cfg.views_per_step:
                    # round-robin so every view is supervised over time
                    n_v = len(sc.cameras)
                    k = min(cfg.views_per_step, n_v)
                    views = sorted({(step * k + j) % n_v for j in range(k)})
                preds = model.forward(model.embed_tokens(patch_rows[idx]),
                                      num_parts=len(sc.parts))
                loss, bd = per_part_losses(
                    preds, sc, views=views, weights=weights, beta=beta,
                    resolution=res, n_samples=cfg.n_samples,
                    jitter_seed=_sub_seed(cfg.seed, step))
                total = total + loss
                for k, v in bd.items():
                    sums[k] += v / len(batch)
            total = total / len(batch)
            last_total = float(total.detach())

            if not math.isfinite(last_total):
                checkpoint_model(model, out / "diverged.ckpt",
                                 {**meta, "step": step})
                (out / "diverged.json").write_text(json.dumps(
                    {"step": step, "breakdown": sums, "beta": beta,
                     "resolution": res, "lr": lr_now}, indent=1) + "\n")
                raise TrainingDiverged(step, sums)

            total.backward()
            opt.step()

            if step % cfg.log_every == 0 or step == cfg.steps - 1:
                record = {"step": step, **sums, "beta": beta,
                          "resolution": res, "lr": lr_now}
                log.write(json.dumps(record) + "\n")
                log.flush()
            if cfg.checkpoint_every and (step + 1) % cfg.checkpoint_every == 0:
                checkpoint_model(model, out / f"step_{step + 1:06d}.ckpt",
                                 {**meta, "step": step + 1})

    checkpoint_model(model, ckpt_path, {**meta, "step": cfg.steps})
    return TrainResult(model=model, checkpoint_path=ckpt_path,
                       log_path=log_path, steps_run=cfg.steps,
                       final_loss=last_total)
