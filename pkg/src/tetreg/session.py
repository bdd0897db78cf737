"""Interactive refinement sessions.

A session owns the mutable registration state for one case: the cumulative
volumetric field, the deformed surface derived from it, the current
correspondence set, and the prompt history. An operator marks a misaligned
region with a pair of polylines, one on the deformed model surface and one
on the observed cloud. The lines are resampled, expanded to local vertex
sets, rigidly pre-aligned by ICP, and used to overwrite the correspondence
rows of the marked region; a reduced-budget re-optimization then produces
an incremental field on top of the current state.

Sessions are replayable: the prompt history plus the seeds fully determine
the state, and a snapshot restores bit-identical fields.
"""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .correspond import CorrespondenceSet, icp_rigid, median_spacing, mutual_nn
from .fem import Material, StiffnessMatrix, assemble_stiffness
from .mesh import PointCloud, TetMesh
from .pyramid import PyramidConfig, halved_budget, optimize
from .volume_fit import PbmConfig, solve_pbm

SNAPSHOT_SCHEMA = 1


class PromptError(ValueError):
    """Prompt cannot be applied (degenerate lines, empty neighborhoods, ...)."""


@dataclass(frozen=True)
class Prompt:
    """A paired annotation: one polyline on the deformed model, one on the cloud."""

    line_on_model: np.ndarray  # (k, 3) mm
    line_on_cloud: np.ndarray  # (k2, 3) mm
    prompt_id: str = ""
    timestamp: float = 0.0

    def __post_init__(self):
        for name in ("line_on_model", "line_on_cloud"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim != 2 or arr.shape[1] != 3 or len(arr) < 2:
                raise PromptError(f"{name} must be a polyline of at least 2 points")
            if not np.all(np.isfinite(arr)):
                raise PromptError(f"{name} contains non-finite coordinates")
            object.__setattr__(self, name, arr)


def resample_polyline(points: np.ndarray, spacing: float) -> np.ndarray:
    """Uniform arc-length resampling; endpoints are always kept."""
    points = np.asarray(points, dtype=np.float64)
    seg = np.linalg.norm(np.diff(points, axis=0), axis=1)
    total = float(seg.sum())
    if total == 0.0 or spacing <= 0:
        return points[[0, -1]].copy()
    n_seg = max(1, int(np.ceil(total / spacing)))
    targets = np.linspace(0.0, total, n_seg + 1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    out = np.empty((len(targets), 3))
    for i, t in enumerate(targets):
        j = min(np.searchsorted(cum, t, side="right") - 1, len(seg) - 1)
        frac = 0.0 if seg[j] == 0 else (t - cum[j]) / seg[j]
        out[i] = points[j] + frac * (points[j + 1] - points[j])
    return out


@dataclass
class Session:
    """Mutable registration state for the human-in-the-loop cycle."""

    mesh: TetMesh
    stiffness: StiffnessMatrix
    cloud: PointCloud
    corr: CorrespondenceSet
    pyramid_cfg: PyramidConfig
    pbm_cfg: PbmConfig
    u_vol: np.ndarray  # (n_nodes, 3), cumulative
    revision: int = 0
    history: list[Prompt] = field(default_factory=list)
    initial_u: np.ndarray = field(default=None, repr=False)
    initial_corr: CorrespondenceSet = field(default=None, repr=False)
    last_prompt_seconds: float = 0.0
    last_sigma2: float | None = None

    @classmethod
    def create(
        cls,
        mesh: TetMesh,
        cloud: PointCloud,
        corr: CorrespondenceSet | None = None,
        material: Material | None = None,
        stiffness: StiffnessMatrix | None = None,
        pyramid_cfg: PyramidConfig | None = None,
        pbm_cfg: PbmConfig | None = None,
        initial_field: np.ndarray | None = None,
    ) -> "Session":
        k = stiffness if stiffness is not None else assemble_stiffness(mesh, material or Material())
        if corr is None:
            corr = mutual_nn(PointCloud(mesh.nodes[: mesh.boundary_count]), cloud)
        u0 = (
            np.zeros((mesh.n_nodes, 3))
            if initial_field is None
            else np.asarray(initial_field, dtype=np.float64).reshape(mesh.n_nodes, 3).copy()
        )
        return cls(
            mesh=mesh,
            stiffness=k,
            cloud=cloud,
            corr=corr,
            pyramid_cfg=pyramid_cfg or PyramidConfig(),
            pbm_cfg=pbm_cfg or PbmConfig(),
            u_vol=u0,
            initial_u=u0.copy(),
            initial_corr=corr,
        )

    # The deformed surface is always derived, never stored, so the
    # bookkeeping identity deformed = rest + selected(u) holds exactly.
    @property
    def deformed_surface(self) -> np.ndarray:
        n = self.mesh.boundary_count
        return self.mesh.nodes[:n] + self.u_vol[:n]

    @property
    def cloud_spacing(self) -> float:
        spacing = median_spacing(self.cloud)
        return spacing if spacing > 0 else 1.0

    def expand_prompt(self, prompt: Prompt) -> tuple[np.ndarray, np.ndarray]:
        """Resample both polylines and expand each sample to its 5 nearest
        vertices/points; returns (model vertex indices, cloud point indices)."""
        spacing = self.cloud_spacing
        surf = self.deformed_surface
        model_idx = self._expand(prompt.line_on_model, surf, spacing, "model line")
        cloud_idx = self._expand(prompt.line_on_cloud, self.cloud.points, spacing, "cloud line")
        return model_idx, cloud_idx

    @staticmethod
    def _expand(line: np.ndarray, geometry: np.ndarray, spacing: float, what: str) -> np.ndarray:
        samples = resample_polyline(line, spacing)
        tree = cKDTree(geometry)
        dist, idx = tree.query(samples, k=min(5, len(geometry)))
        dist, idx = np.atleast_2d(dist), np.atleast_2d(idx)
        if dist[:, 0].min() > 10.0 * spacing:
            raise PromptError(f"{what} lies farther than 10x cloud spacing from the geometry")
        seen: dict[int, None] = {}
        for i in idx.ravel():
            seen.setdefault(int(i))
        return np.fromiter(seen.keys(), dtype=np.int64)

    def apply_prompt(self, prompt: Prompt, on_step=None) -> dict:
        """Run one refinement cycle; returns diagnostics for progress reporting."""
        t0 = time.perf_counter()
        model_idx, cloud_idx = self.expand_prompt(prompt)

        spacing = self.cloud_spacing
        line_x = resample_polyline(prompt.line_on_model, spacing)
        line_y = resample_polyline(prompt.line_on_cloud, spacing)
        rigid = icp_rigid(PointCloud(line_x), PointCloud(line_y)).transform

        surf = self.deformed_surface
        local = mutual_nn(
            PointCloud(surf[model_idx]),
            PointCloud(self.cloud.points[cloud_idx]),
            rigid=rigid,
            radius=np.inf,
        )
        new_pairs = np.column_stack(
            [model_idx[local.source_indices], cloud_idx[local.target_indices]]
        )
        if len(new_pairs) == 0:
            raise PromptError("prompt produced no correspondences")

        marked = set(model_idx.tolist())
        claimed_targets = set(new_pairs[:, 1].tolist())
        kept = [
            (i, j)
            for i, j in self.corr.pairs
            if i not in marked and j not in claimed_targets
        ]
        merged = np.array(kept + new_pairs.tolist(), dtype=np.int64)
        self.corr = CorrespondenceSet(
            pairs=merged, n_source=self.corr.n_source, n_target=self.corr.n_target
        )

        # Re-optimize against the current deformed surface, at reduced budget
        # and a per-revision seed so replay is exact.
        cfg = replace(halved_budget(self.pyramid_cfg), seed=self.pyramid_cfg.seed + self.revision + 1)
        phi = self.mesh.interpolation_op()
        pyr = optimize(surf, self.cloud, self.corr, self.stiffness, phi, cfg, on_step=on_step)

        deformed_mesh = TetMesh(
            nodes=self.mesh.nodes + self.u_vol,
            tets=self.mesh.tets,
            boundary_count=self.mesh.boundary_count,
            boundary_faces=self.mesh.boundary_faces,
            permutation=self.mesh.permutation,
        )
        u_init = np.zeros((self.mesh.n_nodes, 3))
        u_init[: self.mesh.boundary_count] = pyr.displacement
        pbm = solve_pbm(deformed_mesh, self.stiffness, self.cloud, self.corr, u_init, self.pbm_cfg)

        self.u_vol = self.u_vol + pbm.u_vol
        self.revision += 1
        self.history.append(prompt)
        self.last_prompt_seconds = time.perf_counter() - t0
        self.last_sigma2 = pbm.sigma2
        return {
            "revision": self.revision,
            "seconds": self.last_prompt_seconds,
            "sigma2": pbm.sigma2,
            "marked_model_vertices": len(model_idx),
            "marked_cloud_points": len(cloud_idx),
            "new_pairs": len(new_pairs),
            "increment_max_mm": float(np.abs(pbm.u_vol).max()),
        }


def _digest(*arrays: np.ndarray) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def asset_hashes(session: Session) -> dict:
    return {
        "mesh": _digest(session.mesh.nodes, session.mesh.tets),
        "cloud": _digest(session.cloud.points),
    }


def session_snapshot(session: Session) -> dict:
    """Serializable state; immutable assets are referenced by content hash."""
    return {
        "schema": SNAPSHOT_SCHEMA,
        "revision": session.revision,
        "u_vol": session.u_vol.tolist(),
        "initial_u": session.initial_u.tolist(),
        "corr_pairs": session.corr.pairs.tolist(),
        "initial_corr_pairs": session.initial_corr.pairs.tolist(),
        "corr_shape": [session.corr.n_source, session.corr.n_target],
        "history": [
            {
                "line_on_model": p.line_on_model.tolist(),
                "line_on_cloud": p.line_on_cloud.tolist(),
                "prompt_id": p.prompt_id,
                "timestamp": p.timestamp,
            }
            for p in session.history
        ],
        "pyramid_seed": session.pyramid_cfg.seed,
        "assets": asset_hashes(session),
    }


def session_restore(
    blob: dict,
    mesh: TetMesh,
    cloud: PointCloud,
    stiffness: StiffnessMatrix,
    pyramid_cfg: PyramidConfig,
    pbm_cfg: PbmConfig,
) -> Session:
    if blob.get("schema") != SNAPSHOT_SCHEMA:
        raise ValueError(f"unsupported snapshot schema {blob.get('schema')}")
    expected = blob["assets"]
    actual = {"mesh": _digest(mesh.nodes, mesh.tets), "cloud": _digest(cloud.points)}
    for key, value in expected.items():
        if actual.get(key) != value:
            raise ValueError(f"asset {key!r} does not match the snapshot hash")
    n, m = blob["corr_shape"]
    session = Session(
        mesh=mesh,
        stiffness=stiffness,
        cloud=cloud,
        corr=CorrespondenceSet(np.array(blob["corr_pairs"], dtype=np.int64), n, m),
        pyramid_cfg=replace(pyramid_cfg, seed=blob["pyramid_seed"]),
        pbm_cfg=pbm_cfg,
        u_vol=np.array(blob["u_vol"], dtype=np.float64),
        revision=blob["revision"],
        initial_u=np.array(blob["initial_u"], dtype=np.float64),
        initial_corr=CorrespondenceSet(np.array(blob["initial_corr_pairs"], dtype=np.int64), n, m),
    )
    session.history = [
        Prompt(
            line_on_model=np.array(p["line_on_model"]),
            line_on_cloud=np.array(p["line_on_cloud"]),
            prompt_id=p["prompt_id"],
            timestamp=p["timestamp"],
        )
        for p in blob["history"]
    ]
    return session


def replay(snapshot: dict, mesh, cloud, stiffness, pyramid_cfg, pbm_cfg) -> Session:
    """Rebuild a session from revision 0 by re-applying the prompt history."""
    base = session_restore(snapshot, mesh, cloud, stiffness, pyramid_cfg, pbm_cfg)
    n, m = snapshot["corr_shape"]
    fresh = Session(
        mesh=mesh,
        stiffness=stiffness,
        cloud=cloud,
        corr=base.initial_corr,
        pyramid_cfg=replace(pyramid_cfg, seed=snapshot["pyramid_seed"]),
        pbm_cfg=pbm_cfg,
        u_vol=base.initial_u.copy(),
        initial_u=base.initial_u.copy(),
        initial_corr=base.initial_corr,
    )
    for prompt in base.history:
        fresh.apply_prompt(prompt)
    return fresh
