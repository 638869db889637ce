"""File formats and exports.

Structured text formats for meshes, surfaces, labeled pointclouds and
deformation fields (floats printed with 17 significant digits so round-trips
are exact), a raw+JSON voxel mask format, Abaqus INP export with a matching
reader, and deterministic run-report serialization.
"""

import functools
import json
import os

import numpy as np

from .attach import VoxelMask
from .errors import InputError
from .field import ControlGrid, DenseField, Lattice
from .mesh import LabeledPointCloud, SurfaceMesh, VolumetricMesh
from .metrics import scaled_jacobian
from .pipeline import RunReport
from .synthetic import Scene, make_scene

FORMAT_VERSION = 1


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def _fmt3(v) -> str:
    return " ".join(_fmt(float(x)) for x in v)


def _loader(fn):
    """Turn malformed-content parse errors into InputError (CLI exit 2)."""

    @functools.wraps(fn)
    def wrapped(path, *args, **kwargs):
        try:
            return fn(path, *args, **kwargs)
        except (ValueError, IndexError, KeyError) as exc:
            raise InputError(f"malformed file {path}: {exc}") from exc

    return wrapped


class _SectionReader:
    def __init__(self, path: str, magic: str):
        try:
            with open(path, "r", encoding="ascii") as fh:
                self.lines = [ln.rstrip("\n") for ln in fh]
        except OSError as exc:
            raise InputError(f"cannot read {path}: {exc}") from exc
        self.pos = 0
        head = self.next().split()
        if len(head) != 2 or head[0] != magic or head[1] != str(FORMAT_VERSION):
            raise InputError(f"{path}: expected header '{magic} "
                             f"{FORMAT_VERSION}', got {head}")

    def next(self) -> str:
        while self.pos < len(self.lines):
            line = self.lines[self.pos].strip()
            self.pos += 1
            if line:
                return line
        raise InputError("unexpected end of file")

    def expect(self, keyword: str) -> list:
        parts = self.next().split()
        if parts[0] != keyword:
            raise InputError(f"expected section '{keyword}', got '{parts[0]}'")
        return parts[1:]


# ---------------------------------------------------------------------------
# volumetric mesh


def save_mesh(mesh: VolumetricMesh, path: str) -> None:
    """Write the structured-text mesh format (17-digit coordinates)."""
    lines = [f"meshtune-mesh {FORMAT_VERSION}", "units mm"]
    lines.append(f"vertices {mesh.n_vertices}")
    for i, v in enumerate(mesh.vertices):
        lines.append(f"{i} {_fmt3(v)}")
    code = "H8" if mesh.is_hex else "T4"
    lines.append(f"cells {mesh.n_cells}")
    for cell, comp in zip(mesh.cells, mesh.cell_components):
        lines.append(f"{code} {comp} " + " ".join(str(int(n)) for n in cell))
    lines.append(f"base_faces {len(mesh.base_faces)}")
    for cls, ci, lf in mesh.base_faces:
        lines.append(f"{cls} {ci} {lf}")
    lines.append(f"component_names {mesh.n_components}")
    for i, name in enumerate(mesh.component_names):
        lines.append(f"{i} {name}")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


@_loader
def load_mesh(path: str, template: bool = False) -> VolumetricMesh:
    """Load a mesh; with template=True also validate positive scaled
    Jacobians and per-component connectivity."""
    r = _SectionReader(path, "meshtune-mesh")
    r.expect("units")
    (n,) = r.expect("vertices")
    verts = np.empty((int(n), 3))
    for _ in range(int(n)):
        parts = r.next().split()
        verts[int(parts[0])] = [float(x) for x in parts[1:4]]
    (m,) = r.expect("cells")
    cells, comps = [], []
    width = None
    for _ in range(int(m)):
        parts = r.next().split()
        w = 8 if parts[0] == "H8" else 4 if parts[0] == "T4" else None
        if w is None:
            raise InputError(f"unknown cell type code {parts[0]!r}")
        if width is None:
            width = w
        elif width != w:
            raise InputError("mixed cell types are not supported")
        comps.append(int(parts[1]))
        cells.append([int(x) for x in parts[2:2 + w]])
    (k,) = r.expect("base_faces")
    base = [[int(x) for x in r.next().split()[:3]] for _ in range(int(k))]
    (c,) = r.expect("component_names")
    names = [""] * int(c)
    for _ in range(int(c)):
        parts = r.next().split(maxsplit=1)
        names[int(parts[0])] = parts[1] if len(parts) > 1 else ""
    mesh = VolumetricMesh(verts, np.asarray(cells, dtype=np.int64),
                          np.asarray(comps, dtype=np.int64),
                          np.asarray(base, dtype=np.int64).reshape(-1, 3),
                          tuple(names))
    if template:
        if scaled_jacobian(mesh).min() <= 0:
            raise InputError(f"{path}: template mesh has non-positive scaled "
                             "Jacobians")
        mesh.validate()
    return mesh


# ---------------------------------------------------------------------------
# surface mesh


def save_surface(surface: SurfaceMesh, path: str) -> None:
    lines = [f"meshtune-surface {FORMAT_VERSION}", "units mm",
             f"vertices {surface.n_vertices}"]
    lines.extend(_fmt3(v) for v in surface.vertices)
    lines.append(f"faces {surface.n_faces}")
    lines.extend(f"{a} {b} {c}" for a, b, c in surface.faces)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


@_loader
def load_surface(path: str) -> SurfaceMesh:
    r = _SectionReader(path, "meshtune-surface")
    r.expect("units")
    (n,) = r.expect("vertices")
    verts = np.array([[float(x) for x in r.next().split()]
                      for _ in range(int(n))]).reshape(int(n), 3)
    (m,) = r.expect("faces")
    faces = np.array([[int(x) for x in r.next().split()]
                      for _ in range(int(m))], dtype=np.int64).reshape(int(m), 3)
    return SurfaceMesh(verts, faces)


# ---------------------------------------------------------------------------
# labeled pointclouds


def save_points(cloud: LabeledPointCloud, path: str) -> None:
    lines = [f"meshtune-points {FORMAT_VERSION}", "units mm",
             f"classes {cloud.n_classes}"]
    for i, pts in enumerate(cloud.classes):
        lines.append(f"class {i} {len(pts)}")
        lines.extend(_fmt3(p) for p in pts)
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


@_loader
def load_points(path: str) -> LabeledPointCloud:
    r = _SectionReader(path, "meshtune-points")
    r.expect("units")
    (n,) = r.expect("classes")
    classes = []
    for _ in range(int(n)):
        parts = r.expect("class")
        count = int(parts[1])
        pts = np.array([[float(x) for x in r.next().split()]
                        for _ in range(count)]).reshape(count, 3)
        classes.append(pts)
    return LabeledPointCloud(tuple(classes))


# ---------------------------------------------------------------------------
# deformation fields


def save_field(obj, path: str) -> None:
    """Serialize a ControlGrid or DenseField."""
    if isinstance(obj, ControlGrid):
        kind, origin, spacing, vec = "control", obj.origin, obj.spacing, obj.velocities
    elif isinstance(obj, DenseField):
        kind, origin, spacing, vec = "dense", obj.origin, obj.spacing, obj.vectors
    else:
        raise InputError("save_field expects a ControlGrid or DenseField")
    dims = vec.shape[:3]
    lines = [f"meshtune-field {FORMAT_VERSION}", "units mm", f"kind {kind}",
             f"origin {_fmt3(origin)}", f"spacing {_fmt3(spacing)}",
             f"dims {dims[0]} {dims[1]} {dims[2]}",
             f"vectors {dims[0] * dims[1] * dims[2]}"]
    lines.extend(_fmt3(v) for v in vec.reshape(-1, 3))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


@_loader
def load_field(path: str):
    """Load a field file; returns ControlGrid or DenseField by kind."""
    r = _SectionReader(path, "meshtune-field")
    r.expect("units")
    (kind,) = r.expect("kind")
    origin = np.array([float(x) for x in r.expect("origin")])
    spacing = np.array([float(x) for x in r.expect("spacing")])
    dims = tuple(int(x) for x in r.expect("dims"))
    (n,) = r.expect("vectors")
    vec = np.array([[float(x) for x in r.next().split()]
                    for _ in range(int(n))]).reshape(dims + (3,))
    if kind == "control":
        return ControlGrid(origin, spacing, vec)
    if kind == "dense":
        return DenseField(Lattice(origin, spacing, dims), vec)
    raise InputError(f"unknown field kind {kind!r}")


# ---------------------------------------------------------------------------
# voxel masks


def _mask_sidecar(path: str) -> str:
    stem, _ = os.path.splitext(path)
    return stem + ".json"


def save_mask(mask: VoxelMask, path: str) -> None:
    """Raw little-endian unsigned bytes plus a JSON sidecar."""
    with open(path, "wb") as fh:
        fh.write(np.ascontiguousarray(mask.values, dtype=np.uint8).tobytes())
    sidecar = {
        "dims": list(mask.dims),
        "spacing_mm": [float(x) for x in mask.spacing],
        "origin_mm": [float(x) for x in mask.origin],
    }
    with open(_mask_sidecar(path), "w", encoding="ascii") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


@_loader
def load_mask(path: str) -> VoxelMask:
    try:
        with open(_mask_sidecar(path), "r", encoding="ascii") as fh:
            meta = json.load(fh)
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise InputError(f"cannot read mask {path}: {exc}") from exc
    dims = tuple(int(x) for x in meta["dims"])
    if len(raw) != dims[0] * dims[1] * dims[2]:
        raise InputError(f"{path}: byte count {len(raw)} does not match dims "
                         f"{dims}")
    values = np.frombuffer(raw, dtype=np.uint8).reshape(dims)
    return VoxelMask(values != 0, meta["spacing_mm"], meta["origin_mm"])


# ---------------------------------------------------------------------------
# Abaqus INP


def export_inp(mesh: VolumetricMesh, path: str) -> None:
    """Write an Abaqus-INP-dialect file: 1-based *NODE ids, one C3D8/C3D4
    *ELEMENT block per component (as its ELSET), and one *NSET per base-face
    class."""
    etype = "C3D8" if mesh.is_hex else "C3D4"
    lines = ["*HEADING", "meshtune export", "*NODE"]
    for i, v in enumerate(mesh.vertices, start=1):
        lines.append(f"{i}, " + ", ".join(_fmt(float(x)) for x in v))
    eid = 1
    for comp in range(mesh.n_components):
        ids = np.nonzero(mesh.cell_components == comp)[0]
        if len(ids) == 0:
            continue
        name = mesh.component_names[comp].replace(" ", "_") or f"COMP{comp}"
        lines.append(f"*ELEMENT, TYPE={etype}, ELSET={name}")
        for ci in ids:
            nodes = ", ".join(str(int(n) + 1) for n in mesh.cells[ci])
            lines.append(f"{eid}, {nodes}")
            eid += 1
    for cls in range(mesh.n_classes):
        rows = mesh.base_faces[mesh.base_faces[:, 0] == cls]
        vids = np.unique(np.concatenate(
            [mesh.face_vertex_ids(c, lf) for _, c, lf in rows])) + 1
        lines.append(f"*NSET, NSET=BASE_CLASS_{cls}")
        for start in range(0, len(vids), 16):
            lines.append(", ".join(str(int(v)) for v in vids[start:start + 16]))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


@_loader
def read_inp(path: str) -> dict:
    """Minimal INP reader for round-trip checks.

    Returns a dict with 0-based "vertices", "cells", "cell_components",
    "component_names" and "nsets" (1-based ids converted back).
    """
    try:
        with open(path, "r", encoding="ascii") as fh:
            lines = [ln.strip() for ln in fh if ln.strip()]
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc}") from exc
    nodes: dict = {}
    elements: list = []
    components: list = []
    names: list = []
    nsets: dict = {}
    section = None
    current_nset = None
    for line in lines:
        if line.startswith("*"):
            upper = line.upper()
            if upper.startswith("*NODE"):
                section = "node"
            elif upper.startswith("*ELEMENT"):
                section = "element"
                elset = "ELSET"
                name = None
                for part in line.split(",")[1:]:
                    key, _, val = part.partition("=")
                    if key.strip().upper() == elset:
                        name = val.strip()
                names.append(name or f"COMP{len(names)}")
            elif upper.startswith("*NSET"):
                section = "nset"
                current_nset = None
                for part in line.split(",")[1:]:
                    key, _, val = part.partition("=")
                    if key.strip().upper() == "NSET":
                        current_nset = val.strip()
                nsets[current_nset] = []
            else:
                section = None
            continue
        if section == "node":
            parts = [p.strip() for p in line.split(",")]
            nodes[int(parts[0])] = [float(x) for x in parts[1:4]]
        elif section == "element":
            parts = [int(p) for p in line.split(",")]
            elements.append([n - 1 for n in parts[1:]])
            components.append(len(names) - 1)
        elif section == "nset":
            nsets[current_nset].extend(int(p) - 1 for p in line.split(","))
    n = max(nodes) if nodes else 0
    verts = np.zeros((n, 3))
    for nid, xyz in nodes.items():
        verts[nid - 1] = xyz
    return {
        "vertices": verts,
        "cells": np.asarray(elements, dtype=np.int64),
        "cell_components": np.asarray(components, dtype=np.int64),
        "component_names": tuple(names),
        "nsets": {k: np.asarray(v, dtype=np.int64) for k, v in nsets.items()},
    }


# ---------------------------------------------------------------------------
# run reports and scenes


def _json_dump(obj: dict, path: str) -> None:
    with open(path, "w", encoding="ascii") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_report(report: RunReport, path: str) -> None:
    """Deterministic run report (no wall-clock content)."""
    _json_dump(report.to_dict(include_timings=False), path)


def write_timings(report: RunReport, path: str) -> None:
    """Wall-clock per-phase timings, kept out of the deterministic report."""
    _json_dump({"timings_sec": dict(report.timings_sec)}, path)


def write_loss_trace_csv(trace: list, path: str) -> None:
    keys = sorted({k for row in trace for k in row})
    keys.remove("iteration")
    keys = ["iteration"] + keys
    lines = [",".join(keys)]
    for row in trace:
        lines.append(",".join(
            "" if k not in row else
            (str(row[k]) if k == "iteration" else _fmt(float(row[k])))
            for k in keys))
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def write_scene(scene: Scene, out_dir: str) -> dict:
    """Write a synthetic scene's files; returns the path manifest."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {
        "template": os.path.join(out_dir, "template.mesh"),
        "ground_truth": os.path.join(out_dir, "ground_truth.mesh"),
        "targets": os.path.join(out_dir, "targets.pts"),
        "pseudo_labels": os.path.join(out_dir, "pseudo_labels.pts"),
        "manifest": os.path.join(out_dir, "manifest.json"),
    }
    save_mesh(scene.template, paths["template"])
    save_mesh(scene.ground_truth, paths["ground_truth"])
    save_points(scene.targets, paths["targets"])
    save_points(scene.targets, paths["pseudo_labels"])
    if scene.mask is not None:
        paths["mask"] = os.path.join(out_dir, "mask.raw")
        save_mask(scene.mask, paths["mask"])
    manifest = dict(scene.manifest)
    manifest["files"] = {k: os.path.basename(v) for k, v in paths.items()
                         if k != "manifest"}
    _json_dump(manifest, paths["manifest"])
    return paths


def gen_synthetic_scene(kind: str, seed: int, out_dir: str, **kwargs) -> dict:
    """Generate a named synthetic scene and write its files."""
    return write_scene(make_scene(kind, seed, **kwargs), out_dir)
