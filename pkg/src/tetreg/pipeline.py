"""End-to-end registration pipelines over a tet mesh and a partial cloud.

Modes mirror the ablation ladder used in evaluation:

* ``rigid``          best rigid (ICP) motion only
* ``nofem``          pyramid fit without the elastic term
* ``biompinn``       pyramid fit with the elastic term
* ``biompinn-pbm``   pyramid fit followed by the one-pass volumetric solve

Surface-only modes extend their boundary field into the volume by solving
the forward elastic problem with the boundary displacements prescribed, so
every mode yields a full volumetric field for target propagation and
Jacobian analysis.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np

from .correspond import CorrespondenceSet, fit_rigid, icp_rigid
from .fem import BcSpec, Material, StiffnessMatrix, assemble_stiffness
from .mesh import PointCloud, TetMesh
from .pyramid import PyramidConfig, PyramidResult, optimize
from .volume_fit import PbmConfig, PbmResult, solve_pbm

MODES = ("rigid", "nofem", "biompinn", "biompinn-pbm")


@dataclass
class RegistrationResult:
    mode: str
    u_vol: np.ndarray  # (n_nodes, 3) volumetric displacement, mm
    u_boundary: np.ndarray  # (n_boundary, 3)
    deformed_boundary: np.ndarray
    sigma2: float | None = None
    timings: dict = field(default_factory=dict)
    pyramid: PyramidResult | None = None
    pbm: PbmResult | None = None


def volumetric_from_boundary(
    mesh: TetMesh, k: StiffnessMatrix, u_boundary: np.ndarray, tol: float = 1e-8
) -> np.ndarray:
    """Extend a boundary field into the volume via a forward Dirichlet solve."""
    from .fem import solve_forward

    bc = BcSpec(dirichlet={i: u_boundary[i] for i in range(mesh.boundary_count)})
    return solve_forward(mesh, k, bc, tol=tol).reshape(mesh.n_nodes, 3)


def register(
    mesh: TetMesh,
    y: PointCloud,
    corr: CorrespondenceSet,
    mode: str = "biompinn-pbm",
    material: Material | None = None,
    pyramid_cfg: PyramidConfig | None = None,
    pbm_cfg: PbmConfig | None = None,
    k: StiffnessMatrix | None = None,
    on_step=None,
) -> RegistrationResult:
    """Run one registration mode; inputs are assumed rigidly pre-aligned."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}, got {mode!r}")
    pyramid_cfg = pyramid_cfg or PyramidConfig()
    pbm_cfg = pbm_cfg or PbmConfig()
    timings: dict[str, float] = {}

    t0 = time.perf_counter()
    if k is None:
        k = assemble_stiffness(mesh, material or Material())
    timings["assembly_s"] = time.perf_counter() - t0
    x_surf = mesh.nodes[: mesh.boundary_count]
    phi = mesh.interpolation_op()

    if mode == "rigid":
        # Best proper rigid motion of the matched pairs; with no matches fall
        # back to ICP against the whole cloud (unreliable under partial overlap).
        t0 = time.perf_counter()
        if len(corr) >= 3:
            transform = fit_rigid(x_surf[corr.source_indices], y.points[corr.target_indices])
        else:
            transform = icp_rigid(PointCloud(x_surf), y).transform
        u_vol = transform.apply(mesh.nodes) - mesh.nodes
        timings["fit_s"] = time.perf_counter() - t0
        timings["total_s"] = sum(timings.values())
        ub = u_vol[: mesh.boundary_count]
        return RegistrationResult(
            mode=mode, u_vol=u_vol, u_boundary=ub, deformed_boundary=x_surf + ub,
            timings=timings,
        )

    cfg = replace(pyramid_cfg, lambda_strain=0.0) if mode == "nofem" else pyramid_cfg
    t0 = time.perf_counter()
    pyr = optimize(x_surf, y, corr, k, phi, cfg, on_step=on_step)
    timings["pyramid_s"] = time.perf_counter() - t0

    pbm_result = None
    sigma2 = None
    if mode == "biompinn-pbm":
        u_init = np.zeros((mesh.n_nodes, 3))
        u_init[: mesh.boundary_count] = pyr.displacement
        pbm_result = solve_pbm(mesh, k, y, corr, u_init, pbm_cfg)
        u_vol = pbm_result.u_vol
        sigma2 = pbm_result.sigma2
        timings["volume_solve_s"] = pbm_result.seconds
    else:
        t0 = time.perf_counter()
        u_vol = volumetric_from_boundary(mesh, k, pyr.displacement)
        timings["volume_solve_s"] = time.perf_counter() - t0

    timings["total_s"] = sum(timings.values())
    ub = u_vol[: mesh.boundary_count]
    return RegistrationResult(
        mode=mode, u_vol=u_vol, u_boundary=ub, deformed_boundary=x_surf + ub,
        sigma2=sigma2, timings=timings, pyramid=pyr, pbm=pbm_result,
    )
