"""Tetrahedral and surface mesh containers.

Volumetric meshes follow a boundary-first node contract: the first
``boundary_count`` nodes are exactly the nodes lying on the mesh boundary.
This lets the surface selector operator be a plain index block instead of a
stored matrix, and every downstream solver relies on it.

All coordinates are in millimeters.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

# Tets with signed volume below this (mm^3) are treated as degenerate.
MIN_TET_VOLUME = 1e-12

# Local vertex index patterns of the four outward-oriented faces of a
# positively oriented tetrahedron (face k is opposite vertex k).
_TET_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]], dtype=np.int64)


class MeshError(ValueError):
    """Invalid mesh topology or geometry."""


def _as_points(points, name: str) -> np.ndarray:
    arr = np.ascontiguousarray(points, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise MeshError(f"{name} must have shape (n, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise MeshError(f"{name} contains non-finite coordinates")
    return arr


def tet_volumes(nodes: np.ndarray, tets: np.ndarray) -> np.ndarray:
    """Signed volumes of each tetrahedron (positive under the ordering convention)."""
    p0 = nodes[tets[:, 0]]
    e1 = nodes[tets[:, 1]] - p0
    e2 = nodes[tets[:, 2]] - p0
    e3 = nodes[tets[:, 3]] - p0
    return np.einsum("ij,ij->i", np.cross(e1, e2), e3) / 6.0


def triangle_areas(vertices: np.ndarray, triangles: np.ndarray) -> np.ndarray:
    e1 = vertices[triangles[:, 1]] - vertices[triangles[:, 0]]
    e2 = vertices[triangles[:, 2]] - vertices[triangles[:, 0]]
    return 0.5 * np.linalg.norm(np.cross(e1, e2), axis=1)


@dataclass(frozen=True)
class PointCloud:
    """Unstructured 3D point set, e.g. a partially observed organ surface."""

    points: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "points", _as_points(self.points, "points"))
        if len(self.points) < 1:
            raise MeshError("point cloud must contain at least one point")

    def __len__(self) -> int:
        return len(self.points)


@dataclass(frozen=True)
class SurfaceMesh:
    """Triangle mesh; when ``closed`` each edge must be shared by exactly two triangles."""

    vertices: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray | None = None
    closed: bool = False

    def __post_init__(self):
        object.__setattr__(self, "vertices", _as_points(self.vertices, "vertices"))
        tris = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if tris.ndim != 2 or tris.shape[1] != 3:
            raise MeshError(f"triangles must have shape (n, 3), got {tris.shape}")
        object.__setattr__(self, "triangles", tris)
        if tris.size and (tris.min() < 0 or tris.max() >= len(self.vertices)):
            raise MeshError("triangle index out of range")
        if np.any(triangle_areas(self.vertices, tris) <= 0.0):
            raise MeshError("mesh contains degenerate (zero-area) triangles")
        if self.normals is not None:
            object.__setattr__(self, "normals", _as_points(self.normals, "normals"))
            if len(self.normals) != len(self.vertices):
                raise MeshError("one normal per vertex required")
        if self.closed:
            edges = np.sort(tris[:, [[0, 1], [1, 2], [2, 0]]].reshape(-1, 2), axis=1)
            _, counts = np.unique(edges, axis=0, return_counts=True)
            if np.any(counts != 2):
                raise MeshError("mesh flagged closed but has edges not shared by exactly 2 triangles")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)


@dataclass(frozen=True)
class TetMesh:
    """Volumetric tetrahedral mesh with boundary nodes stored first.

    ``nodes[:boundary_count]`` are exactly the boundary nodes and
    ``boundary_faces`` (outward oriented) reference only those indices.
    ``permutation`` maps the node order of the originating file to the
    stored order, for round-tripping externally produced meshes.
    """

    nodes: np.ndarray
    tets: np.ndarray
    boundary_count: int
    boundary_faces: np.ndarray
    permutation: np.ndarray = field(repr=False, default=None)

    def __post_init__(self):
        if self.permutation is None:
            object.__setattr__(self, "permutation", np.arange(len(self.nodes), dtype=np.int64))

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_tets(self) -> int:
        return len(self.tets)

    def boundary_surface(self) -> SurfaceMesh:
        """The boundary as a closed triangle mesh over the first ``boundary_count`` nodes."""
        return SurfaceMesh(
            vertices=self.nodes[: self.boundary_count].copy(),
            triangles=self.boundary_faces.copy(),
            closed=True,
        )

    def interpolation_op(self) -> "InterpolationOp":
        return InterpolationOp(self.boundary_count, self.n_nodes)


def boundary_faces_of(tets: np.ndarray) -> np.ndarray:
    """Outward-oriented faces that belong to exactly one tetrahedron."""
    faces = tets[:, _TET_FACES].reshape(-1, 3)
    key = np.sort(faces, axis=1)
    _, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
    single = counts[inverse] == 1
    return faces[single]


def build_tet_mesh(nodes, tets, permutation: np.ndarray | None = None) -> TetMesh:
    """Validate geometry and connectivity, then reorder nodes boundary-first.

    Raises :class:`MeshError` for dangling indices or inverted/degenerate
    tets (reported by tet id). Node reordering is stable within the boundary
    and interior groups.
    """
    nodes = _as_points(nodes, "nodes")
    tets = np.ascontiguousarray(tets, dtype=np.int64)
    if tets.ndim != 2 or tets.shape[1] != 4:
        raise MeshError(f"tets must have shape (n, 4), got {tets.shape}")
    if tets.min(initial=0) < 0 or tets.max(initial=-1) >= len(nodes):
        raise MeshError("tet references a node index out of range")
    vols = tet_volumes(nodes, tets)
    bad = np.flatnonzero(vols < MIN_TET_VOLUME)
    if bad.size:
        raise MeshError(
            f"tet {bad[0]} has non-positive or degenerate volume {vols[bad[0]]:.3e} mm^3"
        )

    faces = boundary_faces_of(tets)
    boundary_nodes = np.unique(faces)
    is_boundary = np.zeros(len(nodes), dtype=bool)
    is_boundary[boundary_nodes] = True
    # Stable boundary-first permutation: old index -> new index.
    order = np.concatenate([np.flatnonzero(is_boundary), np.flatnonzero(~is_boundary)])
    remap = np.empty(len(nodes), dtype=np.int64)
    remap[order] = np.arange(len(nodes))

    perm = remap if permutation is None else remap[permutation]
    return TetMesh(
        nodes=nodes[order],
        tets=remap[tets],
        boundary_count=len(boundary_nodes),
        boundary_faces=remap[faces],
        permutation=perm,
    )


# Local tets of the six-tet cube subdivision sharing the main diagonal
# (conformal across a translated grid of identical cells).
_CUBE_TETS = np.array(
    [
        [0, 1, 2, 6],
        [0, 2, 3, 6],
        [0, 3, 7, 6],
        [0, 7, 4, 6],
        [0, 4, 5, 6],
        [0, 5, 1, 6],
    ],
    dtype=np.int64,
)


def make_beam_mesh(nx: int, ny: int, nz: int, spacing: float) -> TetMesh:
    """Structured beam of ``nx * ny * nz`` cubic cells, each split into 6 tets.

    The grid has ``(nx+1)(ny+1)(nz+1)`` nodes at ``spacing`` millimeters and
    every tet has positive volume. Deterministic replacement for externally
    meshed geometry in desk-scale tests.
    """
    if min(nx, ny, nz) < 1:
        raise MeshError("cell counts must be >= 1")
    if spacing <= 0:
        raise MeshError("spacing must be positive")
    n_nodes = (nx + 1) * (ny + 1) * (nz + 1)
    if n_nodes * 3 > np.iinfo(np.int64).max:
        raise MeshError("grid too large for index type")

    xs = np.arange(nx + 1) * spacing
    ys = np.arange(ny + 1) * spacing
    zs = np.arange(nz + 1) * spacing
    gx, gy, gz = np.meshgrid(xs, ys, zs, indexing="ij")
    nodes = np.column_stack([gx.ravel(), gy.ravel(), gz.ravel()])

    def nid(i, j, k):
        return (i * (ny + 1) + j) * (nz + 1) + k

    ci, cj, ck = np.meshgrid(np.arange(nx), np.arange(ny), np.arange(nz), indexing="ij")
    ci, cj, ck = ci.ravel(), cj.ravel(), ck.ravel()
    # Cube corners in the order p0..p7 used by _CUBE_TETS.
    corners = np.stack(
        [
            nid(ci, cj, ck),
            nid(ci + 1, cj, ck),
            nid(ci + 1, cj + 1, ck),
            nid(ci, cj + 1, ck),
            nid(ci, cj, ck + 1),
            nid(ci + 1, cj, ck + 1),
            nid(ci + 1, cj + 1, ck + 1),
            nid(ci, cj + 1, ck + 1),
        ],
        axis=1,
    )
    tets = corners[:, _CUBE_TETS].reshape(-1, 4)
    return build_tet_mesh(nodes, tets)


@dataclass(frozen=True)
class InterpolationOp:
    """Selector between volumetric and boundary displacement fields.

    Never materialized as a matrix: forward keeps the leading boundary block
    of a length ``3 * node_count`` vector, transpose embeds a boundary field
    with zeroed interior. Forward composed with transpose is the identity on
    boundary fields.
    """

    boundary_count: int
    node_count: int

    def __post_init__(self):
        if not 0 < self.boundary_count <= self.node_count:
            raise MeshError("need 0 < boundary_count <= node_count")

    def apply(self, u_vol: np.ndarray) -> np.ndarray:
        u_vol = np.asarray(u_vol, dtype=np.float64)
        if u_vol.shape != (3 * self.node_count,):
            raise ValueError(
                f"expected volumetric field of length {3 * self.node_count}, got {u_vol.shape}"
            )
        return u_vol[: 3 * self.boundary_count].copy()

    def apply_transpose(self, u_surf: np.ndarray) -> np.ndarray:
        u_surf = np.asarray(u_surf, dtype=np.float64)
        if u_surf.shape != (3 * self.boundary_count,):
            raise ValueError(
                f"expected boundary field of length {3 * self.boundary_count}, got {u_surf.shape}"
            )
        out = np.zeros(3 * self.node_count)
        out[: 3 * self.boundary_count] = u_surf
        return out


def apply_phi(op: InterpolationOp, u_vol: np.ndarray) -> np.ndarray:
    return op.apply(u_vol)


def apply_phi_transpose(op: InterpolationOp, u_surf: np.ndarray) -> np.ndarray:
    return op.apply_transpose(u_surf)


def vertex_normals(mesh: SurfaceMesh) -> np.ndarray:
    """Area-weighted per-vertex normals (unit length; zero where undefined)."""
    e1 = mesh.vertices[mesh.triangles[:, 1]] - mesh.vertices[mesh.triangles[:, 0]]
    e2 = mesh.vertices[mesh.triangles[:, 2]] - mesh.vertices[mesh.triangles[:, 0]]
    face_n = np.cross(e1, e2)  # magnitude = 2 * area
    normals = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(normals, mesh.triangles[:, k], face_n)
    lengths = np.linalg.norm(normals, axis=1)
    nonzero = lengths > 0
    normals[nonzero] /= lengths[nonzero, None]
    return normals


def edge_graph(mesh: SurfaceMesh) -> coo_matrix:
    """Sparse symmetric graph of mesh edges weighted by Euclidean length."""
    edges = mesh.triangles[:, [[0, 1], [1, 2], [2, 0]]].reshape(-1, 2)
    edges = np.unique(np.sort(edges, axis=1), axis=0)
    weights = np.linalg.norm(mesh.vertices[edges[:, 0]] - mesh.vertices[edges[:, 1]], axis=1)
    n = mesh.n_vertices
    return coo_matrix(
        (
            np.concatenate([weights, weights]),
            (np.concatenate([edges[:, 0], edges[:, 1]]), np.concatenate([edges[:, 1], edges[:, 0]])),
        ),
        shape=(n, n),
    )


def geodesic_distance(mesh: SurfaceMesh, sources, normalized: bool = False) -> np.ndarray:
    """Per-vertex shortest-path distance along mesh edges from the nearest source.

    Vertices unreachable from every source get ``inf``. With ``normalized``
    the finite distances are divided by the largest finite distance (a field
    that is identically zero is returned unchanged).
    """
    sources = np.atleast_1d(np.asarray(sources, dtype=np.int64))
    if sources.size == 0:
        raise ValueError("need at least one source vertex")
    if sources.min() < 0 or sources.max() >= mesh.n_vertices:
        raise ValueError("source vertex index out of range")
    graph = edge_graph(mesh).tocsr()
    dist = dijkstra(graph, directed=False, indices=np.unique(sources), min_only=True)
    if normalized:
        finite = np.isfinite(dist)
        top = dist[finite].max(initial=0.0)
        if top > 0:
            dist = dist.copy()
            dist[finite] /= top
    return dist
