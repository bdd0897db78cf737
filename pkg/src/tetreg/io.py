"""File formats: .node/.ele tet meshes, ascii PLY surfaces, XYZ clouds, field text.

Floats are written with 17 significant digits so every array round-trips
bit-exactly through text.
"""

from __future__ import annotations

import os

import numpy as np

from .mesh import MeshError, PointCloud, SurfaceMesh, TetMesh, build_tet_mesh

FLOAT_FMT = "%.17g"


class FileFormatError(ValueError):
    """Malformed input file."""


def _numeric_rows(path) -> list[list[str]]:
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.split("#", 1)[0].strip()
            if line:
                rows.append(line.split())
    if not rows:
        raise FileFormatError(f"{path}: no data rows")
    return rows


def _index_column_ok(rows: list[list[str]]) -> bool:
    try:
        ids = sorted(int(float(r[0])) for r in rows)
    except (ValueError, IndexError):
        return False
    n = len(ids)
    return ids == list(range(n)) or ids == list(range(1, n + 1))


def _strip_header(rows: list[list[str]]) -> list[list[str]]:
    """Drop a leading count header if present.

    A header row states the record count, which the body length must match;
    the body's first column must then be a consistent 0- or 1-based index
    sequence. Headerless files must satisfy the index check outright.
    """
    try:
        declared = int(float(rows[0][0]))
    except (ValueError, IndexError):
        raise FileFormatError(f"unparseable leading row: {' '.join(rows[0])!r}")
    if declared == len(rows) - 1 and len(rows) > 1 and _index_column_ok(rows[1:]):
        return rows[1:]
    if _index_column_ok(rows):
        return rows
    raise FileFormatError("row indices are not a consistent 0- or 1-based sequence")


def load_tet_mesh(node_path, ele_path) -> TetMesh:
    """Read an indexed node/element file pair and return a boundary-first mesh.

    Accepts files with or without a leading count header; 1-based indexing is
    detected from the first node index. Nodes are re-sorted boundary first and
    the permutation from file order to stored order is retained on the mesh.
    """
    try:
        node_rows = _strip_header(_numeric_rows(node_path))
    except FileFormatError as exc:
        raise FileFormatError(f"{node_path}: {exc}")
    try:
        raw = np.array([[float(v) for v in row[:4]] for row in node_rows])
    except (ValueError, IndexError) as exc:
        raise FileFormatError(f"{node_path}: bad node row ({exc})")
    if raw.shape[1] != 4:
        raise FileFormatError(f"{node_path}: expected 'index x y z' rows")
    node_ids = raw[:, 0].astype(np.int64)
    base = int(node_ids.min())
    if base not in (0, 1):
        raise FileFormatError(f"{node_path}: node indices must start at 0 or 1, got {base}")
    order = np.argsort(node_ids, kind="stable")
    nodes = raw[order, 1:4]

    try:
        ele_rows = _strip_header(_numeric_rows(ele_path))
    except FileFormatError as exc:
        raise FileFormatError(f"{ele_path}: {exc}")
    try:
        tets = np.array([[int(float(v)) for v in row[1:5]] for row in ele_rows], dtype=np.int64)
    except (ValueError, IndexError) as exc:
        raise FileFormatError(f"{ele_path}: bad element row ({exc})")
    tets -= base
    if tets.min(initial=0) < 0 or tets.max(initial=-1) >= len(nodes):
        raise FileFormatError(f"{ele_path}: element references a missing node index")
    try:
        return build_tet_mesh(nodes, tets)
    except MeshError as exc:
        raise FileFormatError(str(exc))


def save_tet_mesh(mesh: TetMesh, node_path, ele_path) -> None:
    with open(node_path, "w") as fh:
        fh.write(f"{mesh.n_nodes} 3 0 0\n")
        for i, p in enumerate(mesh.nodes):
            fh.write(f"{i} {FLOAT_FMT % p[0]} {FLOAT_FMT % p[1]} {FLOAT_FMT % p[2]}\n")
    with open(ele_path, "w") as fh:
        fh.write(f"{mesh.n_tets} 4 0\n")
        for i, t in enumerate(mesh.tets):
            fh.write(f"{i} {t[0]} {t[1]} {t[2]} {t[3]}\n")


def save_surface(mesh: SurfaceMesh, path) -> None:
    """Write an ascii PLY file (with per-vertex normals when present)."""
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {mesh.n_vertices}\n")
        fh.write("property double x\nproperty double y\nproperty double z\n")
        if mesh.normals is not None:
            fh.write("property double nx\nproperty double ny\nproperty double nz\n")
        fh.write(f"element face {len(mesh.triangles)}\n")
        fh.write("property list uchar int vertex_indices\nend_header\n")
        if mesh.normals is not None:
            for p, n in zip(mesh.vertices, mesh.normals):
                fh.write(" ".join(FLOAT_FMT % v for v in (*p, *n)) + "\n")
        else:
            for p in mesh.vertices:
                fh.write(" ".join(FLOAT_FMT % v for v in p) + "\n")
        for t in mesh.triangles:
            fh.write(f"3 {t[0]} {t[1]} {t[2]}\n")


def load_surface(path) -> SurfaceMesh:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh]
    if not lines or lines[0] != "ply":
        raise FileFormatError(f"{path}: not a PLY file")
    n_vertices = n_faces = None
    has_normals = False
    i = 1
    current = None
    while i < len(lines) and lines[i] != "end_header":
        tok = lines[i].split()
        if tok[:2] == ["format", "binary_little_endian"] or tok[:2] == ["format", "binary_big_endian"]:
            raise FileFormatError(f"{path}: binary PLY is not supported")
        if tok[0] == "element":
            current = tok[1]
            if tok[1] == "vertex":
                n_vertices = int(tok[2])
            elif tok[1] == "face":
                n_faces = int(tok[2])
        elif tok[0] == "property" and current == "vertex" and tok[-1] == "nx":
            has_normals = True
        i += 1
    if i == len(lines) or n_vertices is None or n_faces is None:
        raise FileFormatError(f"{path}: malformed PLY header")
    body = [ln for ln in lines[i + 1 :] if ln]
    if len(body) != n_vertices + n_faces:
        raise FileFormatError(f"{path}: expected {n_vertices + n_faces} data rows, got {len(body)}")
    try:
        vdata = np.array([[float(v) for v in ln.split()] for ln in body[:n_vertices]])
        faces = np.array([[int(v) for v in ln.split()] for ln in body[n_vertices:]], dtype=np.int64)
    except ValueError as exc:
        raise FileFormatError(f"{path}: bad data row ({exc})")
    if vdata.shape[1] < 3:
        raise FileFormatError(f"{path}: vertex rows need at least 3 coordinates")
    if faces.size and (faces.shape[1] != 4 or np.any(faces[:, 0] != 3)):
        raise FileFormatError(f"{path}: only triangle faces are supported")
    normals = vdata[:, 3:6] if has_normals and vdata.shape[1] >= 6 else None
    return SurfaceMesh(vertices=vdata[:, :3], triangles=faces[:, 1:4], normals=normals)


def save_cloud(cloud: PointCloud, path) -> None:
    np.savetxt(path, cloud.points, fmt=FLOAT_FMT)


def load_cloud(path) -> PointCloud:
    rows = _numeric_rows(path)
    try:
        pts = np.array([[float(v) for v in row] for row in rows])
    except ValueError as exc:
        raise FileFormatError(f"{path}: bad coordinate row ({exc})")
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise FileFormatError(f"{path}: expected 'x y z' rows")
    return PointCloud(points=pts)


def save_field(field: np.ndarray, path) -> None:
    """One 'dx dy dz' line per node, in the node order of the mesh file."""
    field = np.asarray(field, dtype=np.float64)
    if field.ndim == 1:
        field = field.reshape(-1, 3)
    np.savetxt(path, field, fmt=FLOAT_FMT)


def load_field(path, n_nodes: int | None = None) -> np.ndarray:
    rows = _numeric_rows(path)
    try:
        field = np.array([[float(v) for v in row] for row in rows])
    except ValueError as exc:
        raise FileFormatError(f"{path}: bad displacement row ({exc})")
    if field.ndim != 2 or field.shape[1] != 3:
        raise FileFormatError(f"{path}: expected 'dx dy dz' rows")
    if n_nodes is not None and len(field) != n_nodes:
        raise FileFormatError(f"{path}: expected {n_nodes} rows, got {len(field)}")
    return field


def file_digest(path) -> str:
    import hashlib

    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def ensure_dir(path) -> str:
    os.makedirs(path, exist_ok=True)
    return path
