"""Synthetic deformation cases with exact ground truth.

Each case applies random surface force patches and a zero-displacement
patch to a tet mesh, solves the forward elastic problem for the true
volumetric field, then emits a partial noisy cloud from the visible side
of the deformed surface together with the exact vertex correspondences.

Force magnitudes are calibrated so the peak surface displacement lands in
a preset band: an absolute force scale is meaningless across mesh scales
in a linear model, while displacement bands transfer. The nominal force is
still recorded in solver-native units in the case record.
"""

from __future__ import annotations

import json
import os
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np

from . import io as tio
from .correspond import CorrespondenceSet
from .fem import BcSpec, Material, assemble_stiffness, solve_forward
from .mesh import PointCloud, TetMesh, geodesic_distance, make_beam_mesh, vertex_normals

SCHEMA_VERSION = 1


@dataclass(frozen=True)
class SynthSpec:
    """Sampling ranges for one case family (desk-scale organ stand-ins)."""

    name: str
    beam_cells: tuple[int, int, int] = (6, 3, 3)
    beam_spacing: float = 10.0  # mm
    force_count: tuple[int, int] = (1, 3)
    max_force: float = 1.5  # solver-native cap used for the nominal draw
    # Broad pressing patches give pneumoperitoneum-like global squash;
    # small patches give local bulges a rigid fit explains too easily.
    force_radius: tuple[float, float] = (15.0, 30.0)  # mm, geodesic
    # Broad anchor (proportionally like an organ held by its ligaments);
    # small anchors let the body swing quasi-rigidly.
    fixed_radius: tuple[float, float] = (25.0, 40.0)  # mm, geodesic
    max_perturbation: float = 0.8  # mm, noise ball radius
    young_range: tuple[float, float] = (2.0, 5.0)  # kPa
    poisson: float = 0.35
    visibility: tuple[float, float] = (0.42, 0.52)  # fraction of surface vertices
    displacement_band: tuple[float, float] = (5.0, 9.0)  # mm, peak surface motion
    inward_force_bias: float = 0.75  # 1 = pure pressing, 0 = isotropic directions
    # Loss weights used by pipelines on this family (tuned per preset).
    lambda_strain: float = 3e-4
    lambda_rigid: float = 1e-4


PRESETS = {
    "liver-beam": SynthSpec(name="liver-beam"),
    "kidney-beam": SynthSpec(
        name="kidney-beam",
        beam_cells=(5, 3, 3),
        beam_spacing=8.0,
        force_radius=(10.0, 20.0),
        fixed_radius=(18.0, 28.0),
        max_force=1.0,
        max_perturbation=0.6,
        displacement_band=(3.5, 6.5),
    ),
    "prostate-beam": SynthSpec(
        name="prostate-beam",
        beam_cells=(4, 3, 3),
        beam_spacing=6.0,
        force_count=(1, 2),
        force_radius=(6.0, 12.0),
        fixed_radius=(10.0, 16.0),
        max_force=0.3,
        max_perturbation=0.25,
        displacement_band=(1.5, 3.5),
    ),
    "identity-beam": SynthSpec(
        name="identity-beam",
        force_count=(0, 0),
        max_force=0.0,
        max_perturbation=0.0,
        visibility=(0.4, 0.5),
    ),
}


@dataclass
class SynthCase:
    mesh: TetMesh
    u_true: np.ndarray  # (n_nodes, 3) mm
    cloud: PointCloud
    corr: CorrespondenceSet  # exact: surface vertex i <-> cloud point j
    material: Material
    bc: BcSpec
    seed: int
    spec: SynthSpec
    visibility: float
    view_direction: np.ndarray = field(default=None)

    @property
    def visible_vertices(self) -> np.ndarray:
        return self.corr.source_indices


def _geodesic_patch(surface, seed_vertex: int, radius: float) -> np.ndarray:
    dist = geodesic_distance(surface, [seed_vertex])
    return np.flatnonzero(dist <= radius)


def _sample_unit(rng: np.random.Generator) -> np.ndarray:
    v = rng.normal(size=3)
    return v / np.linalg.norm(v)


def generate_case(spec: SynthSpec, seed: int, mesh: TetMesh | None = None) -> SynthCase:
    """Deterministically generate one case from (spec, seed)."""
    rng = np.random.default_rng([zlib.crc32(spec.name.encode()), seed])
    mesh = mesh or make_beam_mesh(*spec.beam_cells, spec.beam_spacing)
    n = mesh.boundary_count
    surface = mesh.boundary_surface()

    material = Material(
        young_modulus=float(rng.uniform(*spec.young_range)), poisson_ratio=spec.poisson
    )
    k = assemble_stiffness(mesh, material)

    fixed_seed = int(rng.integers(n))
    fixed_radius = rng.uniform(*spec.fixed_radius)
    # The clamped patch must pin all six rigid modes: at least three nodes,
    # not collinear. Grow the radius until that holds.
    for _attempt in range(30):
        fixed_nodes = _geodesic_patch(surface, fixed_seed, fixed_radius)
        if fixed_nodes.size >= 3:
            centered = surface.vertices[fixed_nodes] - surface.vertices[fixed_nodes].mean(axis=0)
            if np.linalg.matrix_rank(centered, tol=1e-9) >= 2:
                break
        fixed_radius *= 1.3
    else:
        raise RuntimeError("could not build a rotation-pinning fixed patch")
    dirichlet = {int(i): np.zeros(3) for i in fixed_nodes}

    normals0 = vertex_normals(surface)
    forces: dict[int, np.ndarray] = {}
    n_forces = int(rng.integers(spec.force_count[0], spec.force_count[1] + 1))
    for _ in range(n_forces):
        for _attempt in range(20):
            fseed = int(rng.integers(n))
            patch = _geodesic_patch(surface, fseed, rng.uniform(*spec.force_radius))
            patch = np.setdiff1d(patch, fixed_nodes)
            if patch.size:
                break
        else:
            raise RuntimeError("force patch entirely overlaps the fixed patch")
        # Mostly pressing (instrument-like indentation gives deformation-rich
        # fields); the bias blends the inward normal with a random direction.
        direction = (1.0 - spec.inward_force_bias) * _sample_unit(rng)
        direction -= spec.inward_force_bias * normals0[fseed]
        direction /= np.linalg.norm(direction)
        magnitude = rng.uniform(0.2, 1.0) * spec.max_force
        per_node = direction * (magnitude / patch.size)
        for i in patch:
            forces[int(i)] = forces.get(int(i), np.zeros(3)) + per_node

    if forces and spec.max_force > 0:
        bc = BcSpec(dirichlet=dirichlet, forces=forces)
        u = solve_forward(mesh, k, bc, tol=1e-10).reshape(mesh.n_nodes, 3)
        peak = np.linalg.norm(u[:n], axis=1).max()
        target = rng.uniform(*spec.displacement_band)
        if peak > 0:
            gain = target / peak
            forces = {i: f * gain for i, f in forces.items()}
            u = u * gain
        bc = BcSpec(dirichlet=dirichlet, forces=forces)
    else:
        bc = BcSpec(dirichlet=dirichlet, forces={})
        u = np.zeros((mesh.n_nodes, 3))

    deformed_surface = surface.vertices + u[:n]
    normals = vertex_normals(
        type(surface)(vertices=deformed_surface, triangles=surface.triangles)
    )

    target_fraction = rng.uniform(*spec.visibility)
    for _attempt in range(50):
        view = _sample_unit(rng)
        front = np.flatnonzero(normals @ view > 0.0)
        if front.size >= target_fraction * n:
            break
    else:
        raise RuntimeError("no view direction exposes enough surface")
    disk_seed = int(front[rng.integers(front.size)])
    dist = geodesic_distance(surface, [disk_seed])
    order = np.argsort(dist[front], kind="stable")
    visible = front[order[: max(1, round(target_fraction * n))]]
    visible = np.sort(visible)

    points = deformed_surface[visible]
    if spec.max_perturbation > 0:
        direction = rng.normal(size=points.shape)
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        radius = spec.max_perturbation * rng.random(len(points)) ** (1.0 / 3.0)
        points = points + direction * radius[:, None]

    corr = CorrespondenceSet(
        pairs=np.column_stack([visible, np.arange(len(visible))]),
        n_source=n,
        n_target=len(visible),
    )
    return SynthCase(
        mesh=mesh,
        u_true=u,
        cloud=PointCloud(points),
        corr=corr,
        material=material,
        bc=bc,
        seed=seed,
        spec=spec,
        visibility=len(visible) / n,
        view_direction=view,
    )


# Case bundle directory layout: mesh.node / mesh.ele, true_field.txt,
# cloud.xyz, corr.txt, case.json (everything non-array).
def save_case(case: SynthCase, directory) -> None:
    tio.ensure_dir(directory)
    tio.save_tet_mesh(case.mesh, os.path.join(directory, "mesh.node"), os.path.join(directory, "mesh.ele"))
    tio.save_field(case.u_true, os.path.join(directory, "true_field.txt"))
    tio.save_cloud(case.cloud, os.path.join(directory, "cloud.xyz"))
    case.corr.save(os.path.join(directory, "corr.txt"))
    meta = {
        "schema": SCHEMA_VERSION,
        "seed": case.seed,
        "visibility": case.visibility,
        "view_direction": list(case.view_direction) if case.view_direction is not None else None,
        "material": {
            "young_modulus": case.material.young_modulus,
            "poisson_ratio": case.material.poisson_ratio,
        },
        "spec": asdict(case.spec),
        "bc": {
            "dirichlet": {str(i): list(v) for i, v in case.bc.dirichlet.items()},
            "forces": {str(i): list(v) for i, v in case.bc.forces.items()},
        },
    }
    with open(os.path.join(directory, "case.json"), "w") as fh:
        json.dump(meta, fh, indent=1)


def _spec_from_dict(d: dict) -> SynthSpec:
    d = dict(d)
    for key, value in d.items():
        if isinstance(value, list):
            d[key] = tuple(value)
    return SynthSpec(**d)


def load_case(directory) -> SynthCase:
    meta_path = os.path.join(directory, "case.json")
    if not os.path.exists(meta_path):
        raise FileNotFoundError(f"{meta_path}: not a case bundle")
    with open(meta_path) as fh:
        meta = json.load(fh)
    if meta.get("schema") != SCHEMA_VERSION:
        raise ValueError(f"{meta_path}: unsupported schema {meta.get('schema')}")
    mesh = tio.load_tet_mesh(
        os.path.join(directory, "mesh.node"), os.path.join(directory, "mesh.ele")
    )
    u_true = tio.load_field(os.path.join(directory, "true_field.txt"), n_nodes=mesh.n_nodes)
    cloud = tio.load_cloud(os.path.join(directory, "cloud.xyz"))
    corr = CorrespondenceSet.load(os.path.join(directory, "corr.txt"))
    material = Material(**meta["material"])
    bc = BcSpec(
        dirichlet={int(i): np.array(v) for i, v in meta["bc"]["dirichlet"].items()},
        forces={int(i): np.array(v) for i, v in meta["bc"]["forces"].items()},
    )
    view = meta.get("view_direction")
    return SynthCase(
        mesh=mesh,
        u_true=u_true,
        cloud=cloud,
        corr=corr,
        material=material,
        bc=bc,
        seed=meta["seed"],
        spec=_spec_from_dict(meta["spec"]),
        visibility=meta["visibility"],
        view_direction=None if view is None else np.array(view),
    )
