"""ASCII PLY / OBJ readers and writers (positions and triangles only)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .geometry import TriangleMesh


class MeshFormatError(ValueError):
    pass


def _fmt(v: float) -> str:
    # repr round-trips doubles exactly
    r = repr(float(v))
    return "0.0" if r == "-0.0" else r


def _fan(indices: list[int]) -> list[list[int]]:
    return [[indices[0], indices[i], indices[i + 1]] for i in range(1, len(indices) - 1)]


def read_obj(path) -> TriangleMesh:
    verts, tris = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                try:
                    verts.append([float(x) for x in parts[1:4]])
                except ValueError as exc:
                    raise MeshFormatError(f"{path}:{lineno}: bad vertex") from exc
            elif parts[0] == "f":
                idx = []
                for token in parts[1:]:
                    i = int(token.split("/")[0])
                    idx.append(i - 1 if i > 0 else len(verts) + i)
                tris.extend(_fan(idx))
    return TriangleMesh(np.array(verts, dtype=float).reshape(-1, 3), np.array(tris, dtype=np.int64).reshape(-1, 3))


def write_obj(path, mesh: TriangleMesh) -> None:
    lines = [f"v {_fmt(x)} {_fmt(y)} {_fmt(z)}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_ply(path) -> TriangleMesh:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0].strip() != "ply":
        raise MeshFormatError(f"{path}: not a PLY file")
    n_vert = n_face = 0
    vert_props: list[str] = []
    current = None
    body_start = None
    for i, line in enumerate(lines[1:], 1):
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "format" and parts[1] != "ascii":
            raise MeshFormatError(f"{path}: only ASCII PLY is supported")
        if parts[0] == "element":
            current = parts[1]
            if current == "vertex":
                n_vert = int(parts[2])
            elif current == "face":
                n_face = int(parts[2])
        elif parts[0] == "property" and current == "vertex":
            vert_props.append(parts[-1])
        elif parts[0] == "end_header":
            body_start = i + 1
            break
    if body_start is None:
        raise MeshFormatError(f"{path}: missing end_header")
    try:
        ix, iy, iz = (vert_props.index(k) for k in ("x", "y", "z"))
    except ValueError as exc:
        raise MeshFormatError(f"{path}: vertex element lacks x/y/z") from exc
    body = lines[body_start:]
    if len(body) < n_vert + n_face:
        raise MeshFormatError(f"{path}: truncated body")
    verts = np.empty((n_vert, 3))
    for k in range(n_vert):
        vals = body[k].split()
        verts[k] = (float(vals[ix]), float(vals[iy]), float(vals[iz]))
    tris: list[list[int]] = []
    for k in range(n_face):
        vals = [int(v) for v in body[n_vert + k].split()]
        tris.extend(_fan(vals[1:1 + vals[0]]))
    return TriangleMesh(verts, np.array(tris, dtype=np.int64).reshape(-1, 3))


def write_ply(path, mesh: TriangleMesh) -> None:
    header = [
        "ply",
        "format ascii 1.0",
        f"element vertex {len(mesh.vertices)}",
        "property double x",
        "property double y",
        "property double z",
        f"element face {len(mesh.triangles)}",
        "property list uchar int vertex_indices",
        "end_header",
    ]
    body = [f"{_fmt(x)} {_fmt(y)} {_fmt(z)}" for x, y, z in mesh.vertices]
    body += [f"3 {a} {b} {c}" for a, b, c in mesh.triangles]
    Path(path).write_text("\n".join(header + body) + "\n", encoding="utf-8")


def read_mesh(path) -> TriangleMesh:
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        return read_obj(path)
    if suffix == ".ply":
        return read_ply(path)
    raise MeshFormatError(f"unsupported mesh format: {path}")


def write_mesh(path, mesh: TriangleMesh) -> None:
    suffix = Path(path).suffix.lower()
    if suffix == ".obj":
        write_obj(path, mesh)
    elif suffix == ".ply":
        write_ply(path, mesh)
    else:
        raise MeshFormatError(f"unsupported mesh format: {path}")
