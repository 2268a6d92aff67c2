"""Minimal OBJ and PLY readers/writers for scans, predictions, landmarks.

Scans are treated as point sets: faces are read when present but the
evaluation protocol only consumes vertices of the scan side. PLY support
covers ascii and binary_little_endian with float/double vertex
properties, which is what scan tooling commonly emits.
"""

from __future__ import annotations

import json
import struct

import numpy as np


class MeshFileError(ValueError):
    pass


def read_obj(path: str) -> tuple[np.ndarray, np.ndarray | None]:
    """Vertices and (fan-triangulated) faces from a Wavefront OBJ."""
    verts: list[list[float]] = []
    faces: list[list[int]] = []
    with open(path, "r", encoding="utf-8", errors="replace") as f:
        for lineno, raw in enumerate(f, start=1):
            parts = raw.split()
            if not parts or parts[0].startswith("#"):
                continue
            if parts[0] == "v":
                if len(parts) < 4:
                    raise MeshFileError(f"{path}:{lineno}: vertex needs 3 coordinates")
                verts.append([float(parts[1]), float(parts[2]), float(parts[3])])
            elif parts[0] == "f":
                idx = [int(tok.split("/")[0]) for tok in parts[1:]]
                idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                if len(idx) < 3:
                    raise MeshFileError(f"{path}:{lineno}: face needs at least 3 vertices")
                for k in range(1, len(idx) - 1):
                    faces.append([idx[0], idx[k], idx[k + 1]])
    if not verts:
        raise MeshFileError(f"{path}: no vertices")
    v = np.asarray(verts, dtype=np.float64)
    return v, (np.asarray(faces, dtype=np.int64) if faces else None)


def write_obj(path: str, vertices: np.ndarray, faces: np.ndarray | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for x, y, z in np.asarray(vertices, dtype=np.float64):
            f.write(f"v {float(x)!r} {float(y)!r} {float(z)!r}\n")
        if faces is not None:
            for a, b, c in np.asarray(faces, dtype=np.int64):
                f.write(f"f {a + 1} {b + 1} {c + 1}\n")


_PLY_TYPES = {
    "float": ("f", 4), "float32": ("f", 4),
    "double": ("d", 8), "float64": ("d", 8),
    "char": ("b", 1), "int8": ("b", 1),
    "uchar": ("B", 1), "uint8": ("B", 1),
    "short": ("h", 2), "int16": ("h", 2),
    "ushort": ("H", 2), "uint16": ("H", 2),
    "int": ("i", 4), "int32": ("i", 4),
    "uint": ("I", 4), "uint32": ("I", 4),
}


def read_ply(path: str) -> tuple[np.ndarray, np.ndarray | None]:
    """Vertices and faces from ascii or binary little-endian PLY."""
    with open(path, "rb") as f:
        data = f.read()
    try:
        header_end = data.index(b"end_header\n") + len(b"end_header\n")
    except ValueError:
        raise MeshFileError(f"{path}: missing end_header") from None
    header_lines = data[:header_end].decode("ascii", errors="replace").splitlines()
    if not header_lines or header_lines[0].strip() != "ply":
        raise MeshFileError(f"{path}: not a PLY file")

    fmt = None
    elements: list[tuple[str, int, list]] = []  # (name, count, properties)
    for line in header_lines[1:]:
        parts = line.split()
        if not parts or parts[0] == "comment":
            continue
        if parts[0] == "format":
            fmt = parts[1]
        elif parts[0] == "element":
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property":
            if not elements:
                raise MeshFileError(f"{path}: property before element")
            if parts[1] == "list":
                elements[-1][2].append(("list", parts[2], parts[3], parts[4]))
            else:
                elements[-1][2].append(("scalar", parts[1], parts[2]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise MeshFileError(f"{path}: unsupported PLY format {fmt!r}")

    verts: list[list[float]] = []
    faces: list[list[int]] = []
    if fmt == "ascii":
        tokens = data[header_end:].decode("ascii", errors="replace").split()
        pos = 0
        for name, count, props in elements:
            for _ in range(count):
                values = {}
                for prop in props:
                    if prop[0] == "list":
                        n = int(float(tokens[pos])); pos += 1
                        values[prop[3]] = [int(float(tokens[pos + i])) for i in range(n)]
                        pos += n
                    else:
                        values[prop[2]] = float(tokens[pos]); pos += 1
                _collect_ply_row(name, values, verts, faces)
    else:
        offset = header_end
        for name, count, props in elements:
            for _ in range(count):
                values = {}
                for prop in props:
                    if prop[0] == "list":
                        cfmt, csize = _PLY_TYPES[prop[1]]
                        (n,) = struct.unpack_from("<" + cfmt, data, offset)
                        offset += csize
                        ifmt, isize = _PLY_TYPES[prop[2]]
                        values[prop[3]] = list(
                            struct.unpack_from(f"<{n}{ifmt}", data, offset)
                        )
                        offset += n * isize
                    else:
                        sfmt, ssize = _PLY_TYPES[prop[1]]
                        (values[prop[2]],) = struct.unpack_from("<" + sfmt, data, offset)
                        offset += ssize
                _collect_ply_row(name, values, verts, faces)
    if not verts:
        raise MeshFileError(f"{path}: no vertices")
    v = np.asarray(verts, dtype=np.float64)
    return v, (np.asarray(faces, dtype=np.int64) if faces else None)


def _collect_ply_row(element: str, values: dict, verts: list, faces: list) -> None:
    if element == "vertex":
        try:
            verts.append([values["x"], values["y"], values["z"]])
        except KeyError:
            raise MeshFileError("PLY vertex element lacks x/y/z") from None
    elif element == "face":
        idx = values.get("vertex_indices", values.get("vertex_index"))
        if idx and len(idx) >= 3:
            for k in range(1, len(idx) - 1):
                faces.append([idx[0], idx[k], idx[k + 1]])


def load_scan(path: str) -> tuple[np.ndarray, np.ndarray | None]:
    """Load a scan (point cloud or mesh) by extension."""
    lower = path.lower()
    if lower.endswith(".obj"):
        return read_obj(path)
    if lower.endswith(".ply"):
        return read_ply(path)
    raise MeshFileError(f"{path}: unsupported scan format (need .obj or .ply)")


def read_landmark_points(path: str) -> dict[str, np.ndarray]:
    """JSON {name: [x, y, z]} -> name -> point."""
    with open(path, "r", encoding="utf-8") as f:
        raw = json.load(f)
    out = {}
    for name, xyz in raw.items():
        pt = np.asarray(xyz, dtype=np.float64)
        if pt.shape != (3,):
            raise MeshFileError(f"{path}: landmark {name!r} is not a 3-vector")
        out[name] = pt
    return out


def read_landmark_indices(path: str) -> dict[str, int]:
    """JSON {name: vertex_index} for the model side."""
    with open(path, "r", encoding="utf-8") as f:
        raw = json.load(f)
    return {name: int(i) for name, i in raw.items()}


def write_landmark_points(path: str, landmarks: dict[str, np.ndarray]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump({k: [float(c) for c in v] for k, v in landmarks.items()}, f, sort_keys=True)
        f.write("\n")


def write_landmark_indices(path: str, indices: dict[str, int]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump({k: int(v) for k, v in indices.items()}, f, sort_keys=True)
        f.write("\n")


def matched_landmarks(
    indices: dict[str, int], points: dict[str, np.ndarray]
) -> tuple[np.ndarray, np.ndarray]:
    """Pair model vertex indices with scan points by shared landmark names."""
    names = sorted(set(indices) & set(points))
    if len(names) < 3:
        raise MeshFileError(f"only {len(names)} landmark names shared; need at least 3")
    idx = np.asarray([indices[n] for n in names], dtype=np.int64)
    pts = np.stack([points[n] for n in names])
    return idx, pts
