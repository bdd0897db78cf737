"""Linear-elastic FEM on tetrahedral meshes.

Four-node constant-strain elements, so each element integral reduces to
V_e * B^T D B with a constant strain-displacement matrix B. The assembled
stiffness matrix is exactly symmetric, positive semidefinite, and its null
space is spanned by the six rigid-body modes of the unconstrained mesh.

Units: millimeters and kilopascals throughout; nodal forces are in the
consistent kPa*mm^2.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse import coo_matrix, csr_matrix
from scipy.sparse.linalg import LinearOperator, aslinearoperator

from . import kernels
from .mesh import TetMesh

DEFAULT_YOUNG_KPA = 5.0
DEFAULT_POISSON = 0.35
DEFAULT_CG_TOL = 1e-5


class SolverError(RuntimeError):
    """Singular or non-converging linear solve."""


@dataclass(frozen=True)
class Material:
    """Isotropic linear-elastic material."""

    young_modulus: float = DEFAULT_YOUNG_KPA  # kPa
    poisson_ratio: float = DEFAULT_POISSON

    def __post_init__(self):
        if self.young_modulus <= 0:
            raise ValueError("Young's modulus must be positive")
        if not 0 <= self.poisson_ratio < 0.5:
            raise ValueError("Poisson's ratio must lie in [0, 0.5)")

    @property
    def lame_lambda(self) -> float:
        e, nu = self.young_modulus, self.poisson_ratio
        return e * nu / ((1 + nu) * (1 - 2 * nu))

    @property
    def lame_mu(self) -> float:
        return self.young_modulus / (2 * (1 + self.poisson_ratio))


def material_matrix(mat: Material) -> np.ndarray:
    """6x6 isotropic stiffness in Voigt order (xx, yy, zz, xy, yz, zx)."""
    lam, mu = mat.lame_lambda, mat.lame_mu
    d = np.zeros((6, 6))
    d[:3, :3] = lam
    d[np.arange(3), np.arange(3)] = lam + 2 * mu
    d[np.arange(3, 6), np.arange(3, 6)] = mu
    return d


def shape_gradients(tet_nodes: np.ndarray) -> tuple[np.ndarray, float]:
    """Constant shape-function gradients (4, 3) and signed volume of one tet."""
    edges = tet_nodes[1:] - tet_nodes[0]
    det = np.linalg.det(edges)
    grads = np.empty((4, 3))
    grads[1:] = np.linalg.inv(edges).T
    grads[0] = -grads[1:].sum(axis=0)
    return grads, det / 6.0


def strain_displacement_matrix(grads: np.ndarray) -> np.ndarray:
    """6x12 matrix mapping nodal displacements to Voigt strain (engineering shear)."""
    b = np.zeros((6, 12))
    for a in range(4):
        gx, gy, gz = grads[a]
        c = 3 * a
        b[0, c] = gx
        b[1, c + 1] = gy
        b[2, c + 2] = gz
        b[3, c], b[3, c + 1] = gy, gx
        b[4, c + 1], b[4, c + 2] = gz, gy
        b[5, c], b[5, c + 2] = gz, gx
    return b


def element_stiffness(tet_nodes: np.ndarray, mat: Material) -> np.ndarray:
    """12x12 stiffness V * B^T D B of a single tet; exactly symmetric."""
    tet_nodes = np.asarray(tet_nodes, dtype=np.float64)
    grads, vol = shape_gradients(tet_nodes)
    if vol <= 0:
        raise ValueError(f"degenerate or inverted tet (volume {vol:.3e} mm^3)")
    b = strain_displacement_matrix(grads)
    ke = vol * (b.T @ material_matrix(mat) @ b)
    return 0.5 * (ke + ke.T)


@dataclass(frozen=True)
class StiffnessMatrix:
    """Assembled global stiffness: CSR storage with an explicit symmetry flag."""

    csr: csr_matrix
    n_nodes: int
    symmetric: bool = True

    @property
    def shape(self):
        return self.csr.shape

    def matvec(self, u: np.ndarray) -> np.ndarray:
        return self.csr @ u

    def energy(self, u: np.ndarray) -> float:
        return float(u @ (self.csr @ u))


def assemble_stiffness(mesh: TetMesh, mat: Material | None = None) -> StiffnessMatrix:
    """Scatter-add all element blocks; result is independent of tet order.

    The CSR conversion sums duplicates in a fixed sorted-index order and a
    final (K + K^T)/2 pass makes the matrix bitwise symmetric.
    """
    mat = mat or Material()
    rows, cols, vals = kernels.assembly_triplets(
        mesh.nodes, mesh.tets, mat.lame_lambda, mat.lame_mu
    )
    n = 3 * mesh.n_nodes
    k = coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    k = (k + k.T) * 0.5
    k.sum_duplicates()
    return StiffnessMatrix(csr=k.tocsr(), n_nodes=mesh.n_nodes)


def strain_energy(k: StiffnessMatrix, u_vol: np.ndarray) -> float:
    """Quadratic form u^T K u (callers apply any 1/2 factor they need)."""
    u_vol = np.asarray(u_vol, dtype=np.float64).ravel()
    if u_vol.shape != (k.shape[0],):
        raise ValueError(f"expected field of length {k.shape[0]}, got {u_vol.shape}")
    return k.energy(u_vol)


def rigid_body_modes(nodes: np.ndarray) -> np.ndarray:
    """Six translation/linearized-rotation fields, shape (6, 3 * n_nodes)."""
    n = len(nodes)
    modes = np.zeros((6, n, 3))
    for k in range(3):
        modes[k, :, k] = 1.0
    centered = nodes - nodes.mean(axis=0)
    axes = np.eye(3)
    for k in range(3):
        modes[3 + k] = np.cross(axes[k], centered)
    return modes.reshape(6, -1)


@dataclass(frozen=True)
class BcSpec:
    """Prescribed nodal displacements and applied nodal forces.

    The Dirichlet and force node sets must be disjoint; prescribing a node
    fixes all three of its components.
    """

    dirichlet: dict[int, np.ndarray] = field(default_factory=dict)
    forces: dict[int, np.ndarray] = field(default_factory=dict)

    def validate(self, n_nodes: int) -> None:
        overlap = set(self.dirichlet) & set(self.forces)
        if overlap:
            raise ValueError(f"nodes {sorted(overlap)[:5]} have both a displacement and a force")
        for idx in list(self.dirichlet) + list(self.forces):
            if not 0 <= idx < n_nodes:
                raise ValueError(f"boundary-condition node {idx} out of range")


@dataclass
class CgResult:
    x: np.ndarray
    converged: bool
    iterations: int
    relative_residual: float


def _as_operator(a) -> LinearOperator:
    if callable(a) and not hasattr(a, "matvec"):
        raise TypeError("wrap plain callables in scipy LinearOperator")
    if isinstance(a, StiffnessMatrix):
        return aslinearoperator(a.csr)
    return aslinearoperator(a)


def cg_solve(
    a,
    b: np.ndarray,
    tol: float = DEFAULT_CG_TOL,
    max_iter: int | None = None,
    x0: np.ndarray | None = None,
    jacobi: np.ndarray | None = None,
) -> CgResult:
    """Conjugate gradients for a symmetric positive (semi)definite operator.

    Terminates when ||A x - b|| / ||b|| <= tol. On hitting ``max_iter`` the
    best iterate seen (smallest residual) is returned with ``converged``
    False. ``jacobi`` optionally supplies the operator diagonal for a Jacobi
    preconditioner.
    """
    op = _as_operator(a)
    b = np.asarray(b, dtype=np.float64).ravel()
    n = b.shape[0]
    if max_iter is None:
        max_iter = 10 * max(n, 1)
    b_norm = np.linalg.norm(b)
    if b_norm == 0.0:
        return CgResult(x=np.zeros(n), converged=True, iterations=0, relative_residual=0.0)

    x = np.zeros(n) if x0 is None else np.array(x0, dtype=np.float64).ravel().copy()
    r = b - op.matvec(x)
    inv_diag = None
    if jacobi is not None:
        inv_diag = np.where(jacobi != 0, 1.0 / np.where(jacobi == 0, 1.0, jacobi), 1.0)
    z = r * inv_diag if inv_diag is not None else r
    p = z.copy()
    rz = float(r @ z)
    best_x, best_res = x.copy(), float(np.linalg.norm(r))

    for it in range(1, max_iter + 1):
        ap = op.matvec(p)
        pap = float(p @ ap)
        if pap <= 0.0:
            # Lost positive-definiteness (numerically singular system).
            break
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        res = float(np.linalg.norm(r))
        if res < best_res:
            best_res, best_x = res, x.copy()
        if res <= tol * b_norm:
            return CgResult(x=x, converged=True, iterations=it, relative_residual=res / b_norm)
        z = r * inv_diag if inv_diag is not None else r
        rz_next = float(r @ z)
        p = z + (rz_next / rz) * p
        rz = rz_next
    return CgResult(
        x=best_x, converged=False, iterations=max_iter, relative_residual=best_res / b_norm
    )


def solve_forward(
    mesh: TetMesh,
    k: StiffnessMatrix,
    bc: BcSpec,
    tol: float = DEFAULT_CG_TOL,
    max_iter: int | None = None,
) -> np.ndarray:
    """Displacements of the free nodes given prescribed displacements and forces.

    Solves the reduced SPD system K_ff u_f = f_f - K_fc u_c by conjugate
    gradients and returns the full length 3*n vector with the prescribed
    entries set exactly. Without any Dirichlet node the system is singular
    under rigid-body motion and is rejected unless the load vanishes.
    """
    bc.validate(mesh.n_nodes)
    n_dof = 3 * mesh.n_nodes
    f = np.zeros(n_dof)
    for idx, vec in bc.forces.items():
        f[3 * idx : 3 * idx + 3] = np.asarray(vec, dtype=np.float64)

    if not bc.dirichlet:
        if np.linalg.norm(f) == 0.0:
            return np.zeros(n_dof)
        raise SolverError("no Dirichlet constraints: system is singular under rigid modes")

    cons_nodes = np.array(sorted(bc.dirichlet), dtype=np.int64)
    cons = (3 * cons_nodes[:, None] + np.arange(3)).ravel()
    u_c = np.concatenate([np.asarray(bc.dirichlet[i], dtype=np.float64) for i in cons_nodes])
    free = np.setdiff1d(np.arange(n_dof), cons, assume_unique=True)

    u = np.zeros(n_dof)
    u[cons] = u_c
    if free.size == 0:
        return u

    kff = k.csr[free][:, free]
    rhs = f[free] - k.csr[free][:, cons] @ u_c
    if max_iter is None:
        max_iter = 10 * mesh.n_nodes
    result = cg_solve(kff, rhs, tol=tol, max_iter=max_iter)
    if not result.converged:
        raise SolverError(
            f"conjugate gradients stalled at relative residual {result.relative_residual:.3e} "
            f"after {result.iterations} iterations"
        )
    u[free] = result.x
    return u


def jacobian_determinants(mesh: TetMesh, u_vol: np.ndarray) -> np.ndarray:
    """Per-tet det(I + grad u): local volume-change ratio of the deformation."""
    u = np.asarray(u_vol, dtype=np.float64).reshape(mesh.n_nodes, 3)
    return kernels.jacobian_dets(mesh.nodes, mesh.tets, u)
