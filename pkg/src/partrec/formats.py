"""File formats: PPM/PGM images, tensor checkpoints, OBJ meshes, URDF, JSONL.

Every format here is dependency-free and byte-stable so outputs diff
cleanly across runs: binary PPM (P6) and PGM (P5) for images, a flat
little-endian float32 archive with a JSON manifest for checkpoints,
OBJ with per-vertex colors for meshes, and URDF XML for articulation.
"""

from __future__ import annotations

import json
import struct
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .geometry import ContractViolation

CHECKPOINT_MAGIC = b"PTRC0001"


# ---------------------------------------------------------------- images

def write_ppm(path, img: np.ndarray) -> None:
    """Binary P6 image from float RGB in [0,1], shape (H, W, 3)."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ContractViolation(f"expected (H, W, 3) image, got {img.shape}")
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def write_pgm(path, img: np.ndarray) -> None:
    """Binary P5 image from float grey in [0,1], shape (H, W)."""
    img = np.asarray(img)
    if img.ndim != 2:
        raise ContractViolation(f"expected (H, W) image, got {img.shape}")
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def _read_pnm_header(f) -> tuple[bytes, int, int, int]:
    """Parse a PNM header tolerating comments and arbitrary whitespace."""
    magic = f.read(2)
    fields = []
    while len(fields) < 3:
        tok = b""
        ch = f.read(1)
        while ch.isspace():
            ch = f.read(1)
        if ch == b"#":
            while ch not in (b"\n", b""):
                ch = f.read(1)
            continue
        while ch and not ch.isspace():
            tok += ch
            ch = f.read(1)
        if not tok:
            raise ContractViolation("truncated PNM header")
        fields.append(int(tok))
    return magic, fields[0], fields[1], fields[2]


def read_ppm(path) -> np.ndarray:
    """Float RGB in [0,1] from a binary P6 file."""
    with open(path, "rb") as f:
        magic, w, h, maxval = _read_pnm_header(f)
        if magic != b"P6":
            raise ContractViolation(f"not a P6 file: {magic!r}")
        data = np.frombuffer(f.read(w * h * 3), dtype=np.uint8)
    if data.size != w * h * 3:
        raise ContractViolation("truncated P6 payload")
    return data.reshape(h, w, 3).astype(np.float64) / maxval


def read_pgm(path) -> np.ndarray:
    """Float grey in [0,1] from a binary P5 file."""
    with open(path, "rb") as f:
        magic, w, h, maxval = _read_pnm_header(f)
        if magic != b"P5":
            raise ContractViolation(f"not a P5 file: {magic!r}")
        data = np.frombuffer(f.read(w * h), dtype=np.uint8)
    if data.size != w * h:
        raise ContractViolation("truncated P5 payload")
    return data.reshape(h, w).astype(np.float64) / maxval


# ------------------------------------------------------------ checkpoints

def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Flat float32 little-endian archive with a JSON manifest.

    Layout: magic, uint64 header length, JSON header, raw data. The
    manifest stores each tensor's shape and element offset into the
    blob; names are written in sorted order so files are reproducible.
    """
    names = sorted(tensors)
    manifest = {}
    offset = 0
    blobs = []
    for name in names:
        src = np.asarray(tensors[name])
        # ascontiguousarray promotes 0-dim to 1-dim; keep the true shape
        arr = np.ascontiguousarray(src, dtype="<f4")
        manifest[name] = {"shape": list(src.shape), "offset": offset}
        offset += arr.size
        blobs.append(arr.tobytes())
    header = json.dumps({"meta": meta or {}, "tensors": manifest},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        for b in blobs:
            f.write(b)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as f:
        magic = f.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ContractViolation(f"bad checkpoint magic: {magic!r}")
        (hlen,) = struct.unpack("<Q", f.read(8))
        header = json.loads(f.read(hlen).decode("utf-8"))
        blob = np.frombuffer(f.read(), dtype="<f4")
    tensors = {}
    for name, info in header["tensors"].items():
        shape = tuple(info["shape"])
        n = int(np.prod(shape)) if shape else 1
        start = info["offset"]
        tensors[name] = blob[start:start + n].reshape(shape).copy()
    return tensors, header.get("meta", {})


# ------------------------------------------------------------------ OBJ

def write_obj(path, vertices: np.ndarray, faces: np.ndarray,
              colors: np.ndarray | None = None) -> None:
    """OBJ mesh; vertex lines carry RGB as 'v x y z r g b' when given."""
    vertices = np.asarray(vertices, dtype=np.float64)
    faces = np.asarray(faces, dtype=np.int64)
    lines = []
    if colors is None:
        for v in vertices:
            lines.append(f"v {v[0]:.8g} {v[1]:.8g} {v[2]:.8g}")
    else:
        colors = np.asarray(colors, dtype=np.float64)
        if colors.shape != vertices.shape:
            raise ContractViolation("colors must match vertex count")
        for v, c in zip(vertices, colors):
            lines.append(f"v {v[0]:.8g} {v[1]:.8g} {v[2]:.8g} "
                         f"{c[0]:.6g} {c[1]:.6g} {c[2]:.6g}")
    for tri in faces:
        lines.append(f"f {tri[0] + 1} {tri[1] + 1} {tri[2] + 1}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Vertices, 0-based faces, and per-vertex colors (None if absent)."""
    verts, faces, cols = [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
            if len(parts) >= 7:
                cols.append([float(x) for x in parts[4:7]])
        elif parts[0] == "f":
            faces.append([int(tok.split("/")[0]) - 1 for tok in parts[1:4]])
    v = np.array(verts, dtype=np.float64).reshape(-1, 3)
    f = np.array(faces, dtype=np.int64).reshape(-1, 3)
    c = np.array(cols, dtype=np.float64) if len(cols) == len(verts) and verts else None
    return v, f, c


# ----------------------------------------------------------------- URDF

@dataclass
class UrdfLink:
    name: str
    mesh: str | None = None          # OBJ filename relative to the URDF
    visual_origin: tuple = (0.0, 0.0, 0.0)


@dataclass
class UrdfJoint:
    name: str
    joint_type: str                  # "prismatic" | "revolute"
    parent: str
    child: str
    origin: tuple
    axis: tuple
    lower: float
    upper: float


@dataclass
class UrdfRobot:
    name: str
    links: list = field(default_factory=list)
    joints: list = field(default_factory=list)


def _vec_attr(v) -> str:
    return f"{v[0]:.10g} {v[1]:.10g} {v[2]:.10g}"


def write_urdf(path, robot: UrdfRobot) -> None:
    root = ET.Element("robot", name=robot.name)
    for link in robot.links:
        el = ET.SubElement(root, "link", name=link.name)
        if link.mesh is not None:
            vis = ET.SubElement(el, "visual")
            ET.SubElement(vis, "origin", xyz=_vec_attr(link.visual_origin),
                          rpy="0 0 0")
            geom = ET.SubElement(vis, "geometry")
            ET.SubElement(geom, "mesh", filename=link.mesh)
    for j in robot.joints:
        el = ET.SubElement(root, "joint", name=j.name, type=j.joint_type)
        ET.SubElement(el, "parent", link=j.parent)
        ET.SubElement(el, "child", link=j.child)
        ET.SubElement(el, "origin", xyz=_vec_attr(j.origin), rpy="0 0 0")
        ET.SubElement(el, "axis", xyz=_vec_attr(j.axis))
        ET.SubElement(el, "limit", lower=f"{j.lower:.10g}", upper=f"{j.upper:.10g}",
                      effort="1", velocity="1")
    tree = ET.ElementTree(root)
    ET.indent(tree)
    tree.write(path, xml_declaration=True, encoding="unicode")


def parse_urdf(path) -> UrdfRobot:
    root = ET.parse(path).getroot()
    if root.tag != "robot":
        raise ContractViolation(f"not a URDF robot file: root <{root.tag}>")
    robot = UrdfRobot(name=root.attrib["name"])
    for el in root.findall("link"):
        mesh_el = el.find("visual/geometry/mesh")
        origin_el = el.find("visual/origin")
        origin = (0.0, 0.0, 0.0)
        if origin_el is not None:
            origin = tuple(float(x) for x in origin_el.attrib["xyz"].split())
        robot.links.append(UrdfLink(
            name=el.attrib["name"],
            mesh=None if mesh_el is None else mesh_el.attrib["filename"],
            visual_origin=origin))
    for el in root.findall("joint"):
        limit = el.find("limit")
        robot.joints.append(UrdfJoint(
            name=el.attrib["name"],
            joint_type=el.attrib["type"],
            parent=el.find("parent").attrib["link"],
            child=el.find("child").attrib["link"],
            origin=tuple(float(x) for x in el.find("origin").attrib["xyz"].split()),
            axis=tuple(float(x) for x in el.find("axis").attrib["xyz"].split()),
            lower=float(limit.attrib["lower"]),
            upper=float(limit.attrib["upper"])))
    return robot


# ---------------------------------------------------------------- JSONL

def append_jsonl(path, record: dict) -> None:
    with open(path, "a") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out
