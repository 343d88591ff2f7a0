"""Command line for dataset generation, training, rendering, evaluation,
and URDF export.

Each command reads an optional JSON config file, applies flag overrides,
writes the resolved settings next to its outputs, and follows a stable
exit-code contract: 0 success, 2 usage, 3 data, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np
import torch

from .datagen import TEMPLATES, load_scene, make_dataset, scale_camera
from .evaluation import (evaluate_instances, evaluate_scene,
                         extract_mesh_field, novel_cameras, predict_scene,
                         predicted_instances, write_report)
from .formats import (UrdfJoint, UrdfLink, UrdfRobot, load_checkpoint,
                      write_obj, write_pgm, write_ppm, write_urdf)
from .geometry import ContractViolation, project_points
from .kinematics import MotionType, posed_box_corners
from .model import ModelConfig, PartSlotTransformer
from .plotting import plot_eval_summary, plot_training_curves, plot_view_grid
from .renderer import BetaSchedule, PartInstance, render_composite, render_part
from .training import (ResolutionSchedule, TrainConfig, TrainingDiverged,
                       restore_model, train)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


class UsageError(Exception):
    """Bad flags or config contents, as opposed to bad data on disk."""


# Defaults double as the schema: config files and flags may only set
# these keys, and values are coerced to the default's type.
GEN_KEYS = {
    "out": "dataset", "template": "all", "scenes": 4, "seed": 0,
    "views": 4, "res": 32, "states": 2, "parts": 0,
    "gt_samples": 96, "gt_beta": 1e-3,
}
TRAIN_KEYS = {
    "out": "run", "data": "", "seed": 0, "steps": 2000, "lr": 1e-3,
    "warmup": 100, "batch_scenes": 1, "views_per_step": 2, "n_samples": 32,
    "log_every": 10, "checkpoint_every": 0, "pretrain": False,
    "embed_dim": 48, "n_heads": 4, "n_blocks": 4, "cross_ratio": 0.5,
    "patch_size": 8, "slots": 4, "plane_res": 16, "plane_patch": 8,
    "feat_dim": 8, "beta_start": 20.0, "beta_end": 200.0,
    "res_low": 0, "res_switch": 0,
}
RENDER_KEYS = {
    "out": "render", "scene": "", "checkpoint": "", "seed": 0,
    "beta": 5e-3, "n_samples": 64, "res": 0,
}
EVAL_KEYS = {
    "out": "eval", "data": "", "checkpoint": "", "seed": 0,
    "novel": 8, "beta": 5e-3, "n_samples": 48, "grid_res": 32,
    "points": 4000, "self_check": False,
}
EXPORT_KEYS = {
    "out": "export", "scene": "", "checkpoint": "", "seed": 0,
    "grid_res": 48, "gt": False,
}

_SCHEMAS = {"gen": GEN_KEYS, "train": TRAIN_KEYS, "render": RENDER_KEYS,
            "eval": EVAL_KEYS, "export": EXPORT_KEYS}

# spec'd shared flag names; remaining keys become flags automatically
_FLAG_HELP = {
    "out": "output directory",
    "seed": "run seed",
    "scenes": "number of scenes to generate",
    "template": f"scene template, one of {TEMPLATES + ('all',)}",
    "steps": "training steps",
    "res": "image resolution",
    "views": "cameras per scene",
    "states": "articulation states per scene",
    "parts": "total part count including the base (0 = template default)",
}


def _add_command(sub, name: str, schema: dict, help_text: str):
    p = sub.add_parser(name, help=help_text)
    p.add_argument("--config", type=str, default=None,
                   help="JSON config file; flags override its values")
    for key, default in schema.items():
        flag = "--" + key.replace("_", "-")
        if isinstance(default, bool):
            p.add_argument(flag, action="store_true", default=None,
                           help=_FLAG_HELP.get(key, ""))
        else:
            p.add_argument(flag, type=type(default), default=None,
                           help=_FLAG_HELP.get(key, ""))
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="partrec",
        description="Articulated-part reconstruction: generate scenes, "
                    "train, render, evaluate, export URDF.")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_command(sub, "gen", GEN_KEYS, "generate a scene dataset")
    _add_command(sub, "train", TRAIN_KEYS, "train a part-slot model")
    _add_command(sub, "render", RENDER_KEYS,
                 "render composites, per-part images, and box overlays")
    _add_command(sub, "eval", EVAL_KEYS, "evaluate on held-out scenes")
    _add_command(sub, "export", EXPORT_KEYS, "export meshes and a URDF")
    return parser


def resolve_config(args: argparse.Namespace) -> dict:
    """Defaults, then config file, then flags; unknown keys are errors."""
    schema = _SCHEMAS[args.command]
    cfg = dict(schema)
    if args.config is not None:
        path = Path(args.config)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise UsageError(f"config is not valid JSON: {e}") from e
        if not isinstance(loaded, dict):
            raise UsageError("config must be a JSON object")
        unknown = sorted(set(loaded) - set(schema))
        if unknown:
            raise UsageError(
                f"unknown config keys for {args.command}: {unknown}")
        for key, value in loaded.items():
            want = type(schema[key])
            if want in (int, float) and isinstance(value, (int, float)) \
                    and not isinstance(value, bool):
                cfg[key] = want(value)
            elif isinstance(value, want):
                cfg[key] = value
            else:
                raise UsageError(
                    f"config key {key!r} expects {want.__name__}, "
                    f"got {type(value).__name__}")
    for key in schema:
        flag_val = getattr(args, key)
        if flag_val is not None:
            cfg[key] = flag_val
    return cfg


def _write_resolved(cfg: dict, command: str, out: Path) -> None:
    resolved = {"command": command, **cfg}
    (out / "resolved_config.json").write_text(
        json.dumps(resolved, indent=1, sort_keys=True) + "\n")


def _load_dataset(data_dir: str) -> list:
    root = Path(data_dir)
    if not root.is_dir():
        raise ContractViolation(f"dataset directory not found: {root}")
    scene_dirs = sorted(p for p in root.iterdir()
                        if (p / "manifest.json").is_file())
    if not scene_dirs:
        raise ContractViolation(f"no scene folders under {root}")
    return [load_scene(p) for p in scene_dirs]


def _restore(checkpoint: str) -> tuple[PartSlotTransformer, dict]:
    path = Path(checkpoint)
    if not path.is_file():
        raise ContractViolation(f"checkpoint not found: {path}")
    _, meta = load_checkpoint(path)
    if "model" not in meta:
        raise ContractViolation(f"checkpoint {path} lacks model settings")
    model = PartSlotTransformer(ModelConfig(**meta["model"]))
    restore_model(model, path)
    model.eval()
    return model, meta


# ------------------------------------------------------------------ gen

def cmd_gen(cfg: dict, out: Path) -> int:
    paths = make_dataset(out, n_scenes=cfg["scenes"], seed=cfg["seed"],
                         template=cfg["template"],
                         parts=cfg["parts"] or None, states=cfg["states"],
                         n_views=cfg["views"], resolution=cfg["res"],
                         n_samples=cfg["gt_samples"], beta=cfg["gt_beta"])
    print(f"wrote {len(paths)} scenes (template {cfg['template']}, "
          f"seed {cfg['seed']}) under {out}")
    return EXIT_OK


# ---------------------------------------------------------------- train

def cmd_train(cfg: dict, out: Path) -> int:
    if not cfg["data"]:
        raise UsageError("train requires --data (dataset directory)")
    scenes = _load_dataset(cfg["data"])
    data_res = scenes[0].cameras[0][0].width
    model_cfg = ModelConfig(
        embed_dim=cfg["embed_dim"], n_heads=cfg["n_heads"],
        n_blocks=cfg["n_blocks"], cross_ratio=cfg["cross_ratio"],
        patch_size=cfg["patch_size"], slot_count=cfg["slots"],
        plane_res=cfg["plane_res"], plane_patch=cfg["plane_patch"],
        feat_dim=cfg["feat_dim"],
        state_count=scenes[0].frame.state_count)
    resolution = None
    if cfg["res_low"]:
        resolution = ResolutionSchedule(
            low=cfg["res_low"], high=data_res,
            switch_step=cfg["res_switch"] or cfg["steps"] // 2)
    train_cfg = TrainConfig(
        steps=cfg["steps"], lr=cfg["lr"], warmup=cfg["warmup"],
        batch_scenes=cfg["batch_scenes"],
        views_per_step=cfg["views_per_step"], n_samples=cfg["n_samples"],
        seed=cfg["seed"],
        beta=BetaSchedule(cfg["beta_start"], cfg["beta_end"], cfg["steps"]),
        resolution=resolution, pretrain=cfg["pretrain"],
        log_every=cfg["log_every"],
        checkpoint_every=cfg["checkpoint_every"])
    result = train(scenes, model_cfg, train_cfg, out)
    curves = plot_training_curves(result.log_path, out / "train_curves.png")
    print(f"trained {result.steps_run} steps on {len(scenes)} scenes, "
          f"final loss {result.final_loss:.3g}")
    print(f"checkpoint {result.checkpoint_path}")
    print(f"curves {curves}")
    return EXIT_OK


# --------------------------------------------------------------- render

_OVERLAY_COLORS = ("#e41a1c", "#377eb8", "#4daf4a", "#984ea3", "#ff7f00",
                   "#17becf")

# cube wireframe over posed_box_corners' binary (x, y, z) corner order
_BOX_EDGES = ((0, 1), (0, 2), (1, 3), (2, 3), (4, 5), (4, 6), (5, 7),
              (6, 7), (0, 4), (1, 5), (2, 6), (3, 7))


def write_box_overlay(path, cam, params_list, state: int,
                      radius: float) -> None:
    """SVG wireframes of each part's posed box projected into a camera."""
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" '
             f'width="{cam.width}" height="{cam.height}" '
             f'viewBox="0 0 {cam.width} {cam.height}">']
    for i, params in enumerate(params_list):
        corners = posed_box_corners(params, state, radius)  # [8, 3]
        pix, depth = project_points(cam, corners)
        color = _OVERLAY_COLORS[i % len(_OVERLAY_COLORS)]
        for a, b in _BOX_EDGES:
            if depth[a] <= 0 or depth[b] <= 0:
                continue
            lines.append(
                f'<line x1="{pix[a, 0]:.2f}" y1="{pix[a, 1]:.2f}" '
                f'x2="{pix[b, 0]:.2f}" y2="{pix[b, 1]:.2f}" '
                f'stroke="{color}" stroke-width="0.6" fill="none"/>')
    lines.append("</svg>")
    Path(path).write_text("\n".join(lines) + "\n")


def _scene_instances(cfg: dict, scene) -> tuple[list, list]:
    """(instances, params) from a checkpoint, or ground truth without one."""
    if cfg["checkpoint"]:
        model, _ = _restore(cfg["checkpoint"])
        with torch.no_grad():
            preds = predict_scene(model, scene)
        return predicted_instances(preds, scene.frame.radius,
                                   scene.frame.state_count)
    instances = [PartInstance(field=p.field(), params=p.articulation)
                 for p in scene.parts]
    return instances, [p.articulation for p in scene.parts]


def cmd_render(cfg: dict, out: Path) -> int:
    if not cfg["scene"]:
        raise UsageError("render requires --scene (scene directory)")
    scene = load_scene(cfg["scene"])
    instances, params = _scene_instances(cfg, scene)
    res = cfg["res"] or scene.cameras[0][0].width
    n_states = scene.frame.state_count
    have_gt = scene.images is not None and res == scene.cameras[0][0].width
    part_mse = np.zeros(len(instances))
    n_imgs = 0
    with torch.no_grad():
        for v, row in enumerate(scene.cameras):
            for t in range(n_states):
                cam = scale_camera(row[t], res)
                comp = render_composite(instances, t, cam, cfg["beta"],
                                        cfg["n_samples"],
                                        radius=scene.frame.radius)
                write_ppm(out / f"composite_v{v}_s{t}.ppm",
                          comp.rgb.numpy())
                write_pgm(out / f"composite_v{v}_s{t}_mask.pgm",
                          comp.mask.numpy())
                for i, inst in enumerate(instances):
                    solo = render_part(inst, t, cam, cfg["beta"],
                                       cfg["n_samples"],
                                       radius=scene.frame.radius)
                    write_ppm(out / f"part{i}_v{v}_s{t}.ppm",
                              solo.rgb.numpy())
                    if have_gt:
                        gt = scene.images["parts"][i][v][t]["rgb"]
                        part_mse[i] += float(
                            ((solo.rgb.numpy() - gt) ** 2).mean())
                write_box_overlay(out / f"boxes_v{v}_s{t}.svg", cam,
                                  params, t, scene.frame.radius)
                n_imgs += 1
    print(f"rendered {n_imgs} composite views "
          f"({len(instances)} parts each) under {out}")
    if have_gt and n_imgs:
        for i, total in enumerate(part_mse):
            mse = total / n_imgs
            db = 99.0 if mse == 0 else min(99.0, 10 * math.log10(1.0 / mse))
            print(f"part {i} training-view psnr {db:.2f} dB")
    return EXIT_OK


# ----------------------------------------------------------------- eval

def cmd_eval(cfg: dict, out: Path) -> int:
    if not cfg["data"]:
        raise UsageError("eval requires --data (dataset directory)")
    if not cfg["self_check"] and not cfg["checkpoint"]:
        raise UsageError("eval requires --checkpoint unless --self-check")
    scenes = _load_dataset(cfg["data"])
    model = None
    if not cfg["self_check"]:
        model, _ = _restore(cfg["checkpoint"])

    records = []
    first_pair = None
    for scene in scenes:
        if cfg["self_check"]:
            instances = [PartInstance(field=p.field(), params=p.articulation)
                         for p in scene.parts]
            decoded = [p.articulation for p in scene.parts]
            beta = (scene.render_meta or {}).get("beta", 1e-3)
            rec = evaluate_instances(instances, decoded, scene,
                                     n_novel=cfg["novel"], beta=beta,
                                     n_samples=cfg["n_samples"],
                                     grid_res=cfg["grid_res"],
                                     n_points=cfg["points"],
                                     seed=cfg["seed"])
        else:
            with torch.no_grad():
                preds = predict_scene(model, scene)
            instances, _ = predicted_instances(preds, scene.frame.radius,
                                               scene.frame.state_count)
            rec = evaluate_scene(preds, scene, n_novel=cfg["novel"],
                                 beta=cfg["beta"],
                                 n_samples=cfg["n_samples"],
                                 grid_res=cfg["grid_res"],
                                 n_points=cfg["points"], seed=cfg["seed"])
        records.append(rec)
        print(json.dumps(rec))
        if first_pair is None:
            first_pair = (scene, instances)

    summary = write_report(records, out / "eval_report.jsonl")
    plot_eval_summary(records, out / "eval_summary.png")
    _comparison_figure(first_pair[0], first_pair[1], cfg,
                       out / "eval_views.png")
    print(json.dumps(summary))
    return EXIT_OK


def _comparison_figure(scene, instances, cfg: dict, path: Path) -> None:
    """Ground truth vs prediction at two held-out cameras, all states."""
    cams = novel_cameras(scene, n=2)
    gt_instances = [PartInstance(field=p.field(), params=p.articulation)
                    for p in scene.parts]
    gt_beta = (scene.render_meta or {}).get("beta", 1e-3)
    n_states = scene.frame.state_count
    gt_row, pred_row, labels = [], [], []
    with torch.no_grad():
        for cam in cams:
            for t in range(n_states):
                gt = render_composite(gt_instances, t, cam, gt_beta,
                                      cfg["n_samples"],
                                      radius=scene.frame.radius)
                pr = render_composite(instances, t, cam, cfg["beta"],
                                      cfg["n_samples"],
                                      radius=scene.frame.radius)
                gt_row.append(gt.rgb.numpy())
                pred_row.append(pr.rgb.numpy())
                labels.append(f"state {t}")
    plot_view_grid([gt_row, pred_row], path,
                   row_labels=["truth", "prediction"], col_labels=labels)


# --------------------------------------------------------------- export

_JOINT_NAMES = {MotionType.PRISMATIC: "prismatic",
                MotionType.REVOLUTE: "revolute"}


def export_urdf(params_list, fields, radius: float, out: Path,
                grid_res: int = 48, name: str = "partrec") -> Path:
    """Meshes plus a URDF: base link static, movers jointed to it.

    Meshes are extracted in rest coordinates; each mover's visual sits
    at -pivot inside its link frame so that placing the link frame at
    the pivot reproduces the rest pose.
    """
    robot = UrdfRobot(name=name)
    for i, (params, fld) in enumerate(zip(params_list, fields)):
        link_name = "base" if i == 0 else f"part{i}"
        mesh = extract_mesh_field(fld, params.box, grid_res)
        mesh_file = None
        if mesh.is_empty:
            print(f"warning: part {i} has an empty surface, "
                  f"link {link_name} gets no visual", file=sys.stderr)
        else:
            mesh_file = f"{link_name}.obj"
            write_obj(out / mesh_file, mesh.vertices, mesh.faces,
                      mesh.colors)
        if i == 0:
            robot.links.append(UrdfLink(name=link_name, mesh=mesh_file))
            continue
        pivot = params.pivot
        robot.links.append(UrdfLink(
            name=link_name, mesh=mesh_file,
            visual_origin=tuple(-pivot)))
        if params.motion_type is MotionType.PRISMATIC:
            lo, hi = -2.0 * radius, 2.0 * radius
        else:
            lo, hi = -2.0 * math.pi, 2.0 * math.pi
        robot.joints.append(UrdfJoint(
            name=f"joint{i}", joint_type=_JOINT_NAMES[params.motion_type],
            parent="base", child=link_name, origin=tuple(pivot),
            axis=tuple(params.axis), lower=lo, upper=hi))
    urdf_path = out / f"{name}.urdf"
    write_urdf(urdf_path, robot)
    return urdf_path


def cmd_export(cfg: dict, out: Path) -> int:
    if not cfg["scene"]:
        raise UsageError("export requires --scene (scene directory)")
    if not cfg["gt"] and not cfg["checkpoint"]:
        raise UsageError("export requires --checkpoint unless --gt")
    scene = load_scene(cfg["scene"])
    if cfg["gt"]:
        params = [p.articulation for p in scene.parts]
        fields = [p.field() for p in scene.parts]
    else:
        model, _ = _restore(cfg["checkpoint"])
        with torch.no_grad():
            preds = predict_scene(model, scene)
        instances, params = predicted_instances(preds, scene.frame.radius,
                                                scene.frame.state_count)
        fields = [inst.field for inst in instances]
    urdf_path = export_urdf(params, fields, scene.frame.radius, out,
                            grid_res=cfg["grid_res"])
    n_joints = sum(1 for p in params[1:]
                   if p.motion_type is not MotionType.STATIC)
    print(f"exported {len(params)} links, {n_joints} joints: {urdf_path}")
    return EXIT_OK


# ----------------------------------------------------------------- main

_COMMANDS = {"gen": cmd_gen, "train": cmd_train, "render": cmd_render,
             "eval": cmd_eval, "export": cmd_export}


def main(argv=None) -> int:
    threads = os.environ.get("ART_THREADS")
    if threads:
        try:
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            print(f"ART_THREADS must be an integer, got {threads!r}",
                  file=sys.stderr)
            return EXIT_USAGE
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        cfg = resolve_config(args)
        out = Path(cfg["out"])
        out.mkdir(parents=True, exist_ok=True)
        _write_resolved(cfg, args.command, out)
        return _COMMANDS[args.command](cfg, out)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ContractViolation, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
