import numpy as np
import pytest

from tetreg import kernels
from tetreg.fem import (
    BcSpec,
    Material,
    SolverError,
    assemble_stiffness,
    cg_solve,
    element_stiffness,
    jacobian_determinants,
    material_matrix,
    rigid_body_modes,
    solve_forward,
    strain_energy,
)
from tetreg.mesh import build_tet_mesh, make_beam_mesh

UNIT_TET = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]], dtype=float)


# --- material law ------------------------------------------------------------

def test_material_constants_hand_values():
    mat = Material(young_modulus=5.0, poisson_ratio=0.35)
    assert mat.lame_lambda == pytest.approx(4.320988, abs=1e-6)
    assert mat.lame_mu == pytest.approx(1.851852, abs=1e-6)
    d = material_matrix(mat)
    assert d[0, 0] == pytest.approx(8.024691, abs=1e-6)


def test_material_matrix_zero_poisson():
    d = material_matrix(Material(young_modulus=2.0, poisson_ratio=0.0))
    assert d[0, 1] == 0.0
    assert d[3, 3] == pytest.approx(1.0)  # E / 2


def test_material_matrix_structure():
    d = material_matrix(Material())
    assert np.array_equal(d, d.T)
    assert d[3, 3] == d[4, 4] == d[5, 5]
    assert np.all(d[:3, 3:] == 0.0)


def test_material_validation():
    with pytest.raises(ValueError):
        Material(young_modulus=-1.0)
    with pytest.raises(ValueError):
        Material(poisson_ratio=0.5)


# --- element stiffness -------------------------------------------------------

def quadrature_element_stiffness(tet_nodes, mat):
    """Independent oracle: quadrature of B^T D B with shape functions evaluated
    by barycentric solves and gradients by central finite differences."""
    d = material_matrix(mat)
    a = np.vstack([np.ones(4), tet_nodes.T])

    def shape(x):
        return np.linalg.solve(a, np.concatenate([[1.0], x]))

    def b_matrix(x, eps=1e-6):
        grads = np.zeros((4, 3))
        for k in range(3):
            step = np.zeros(3)
            step[k] = eps
            grads[:, k] = (shape(x + step) - shape(x - step)) / (2 * eps)
        b = np.zeros((6, 12))
        for node in range(4):
            gx, gy, gz = grads[node]
            c = 3 * node
            b[0, c] = gx
            b[1, c + 1] = gy
            b[2, c + 2] = gz
            b[3, c], b[3, c + 1] = gy, gx
            b[4, c + 1], b[4, c + 2] = gz, gy
            b[5, c], b[5, c + 2] = gz, gx
        return b

    vol = abs(np.linalg.det(tet_nodes[1:] - tet_nodes[0])) / 6.0
    # degree-2 Gauss rule: 4 symmetric interior points, equal weights
    a1, b1 = 0.5854101966249685, 0.1381966011250105
    bary = np.full((4, 4), b1)
    np.fill_diagonal(bary, a1)
    k = np.zeros((12, 12))
    for w in bary:
        x = w @ tet_nodes
        b = b_matrix(x)
        k += (vol / 4.0) * (b.T @ d @ b)
    return k


def test_element_stiffness_rigid_translation_null():
    ke = element_stiffness(UNIT_TET, Material())
    for axis in range(3):
        mode = np.tile(np.eye(3)[axis], 4)
        assert np.abs(ke @ mode).max() <= 1e-10 * np.abs(ke).max()


@pytest.mark.parametrize(
    "nodes,mat",
    [
        (UNIT_TET, Material(young_modulus=1.0, poisson_ratio=0.0)),
        (UNIT_TET, Material(young_modulus=3.0, poisson_ratio=0.3)),
        (
            np.array([[0.2, 0.1, 0.0], [1.3, 0.2, 0.1], [0.1, 1.1, -0.2], [0.3, 0.2, 1.4]]),
            Material(young_modulus=5.0, poisson_ratio=0.35),
        ),
    ],
)
def test_element_stiffness_matches_quadrature_oracle(nodes, mat):
    ke = element_stiffness(nodes, mat)
    oracle = quadrature_element_stiffness(nodes, mat)
    assert np.abs(ke - oracle).max() <= 1e-6 * np.abs(oracle).max()


def test_element_stiffness_scales_linearly_with_size():
    mat = Material()
    base = element_stiffness(UNIT_TET, mat)
    scaled = element_stiffness(2.5 * UNIT_TET, mat)
    assert np.allclose(scaled, 2.5 * base, rtol=1e-12)


def test_element_stiffness_degenerate():
    flat = UNIT_TET.copy()
    flat[3] = [1.0, 1.0, 0.0]
    with pytest.raises((ValueError, np.linalg.LinAlgError)):
        element_stiffness(flat, Material())


# --- assembly ----------------------------------------------------------------

def test_assemble_single_tet_equals_element():
    mesh = build_tet_mesh(UNIT_TET, [[0, 1, 2, 3]])
    mat = Material()
    k = assemble_stiffness(mesh, mat).csr.toarray()
    # The loader may permute nodes; map element dofs through it.
    ke = element_stiffness(mesh.nodes, mat)
    perm = np.concatenate([3 * mesh.tets[0] + c for c in range(3)])
    order = np.argsort(np.repeat(mesh.tets[0], 1))
    dof = np.ravel([[3 * v, 3 * v + 1, 3 * v + 2] for v in mesh.tets[0]])
    dense = np.zeros_like(k)
    dense[np.ix_(dof, dof)] = element_stiffness(mesh.nodes[mesh.tets[0]], mat)
    assert np.allclose(k, dense, atol=1e-12)


def test_assemble_disjoint_tets_block_diagonal():
    nodes = np.vstack([UNIT_TET, UNIT_TET + 10.0])
    mesh = build_tet_mesh(nodes, [[0, 1, 2, 3], [4, 5, 6, 7]])
    k = assemble_stiffness(mesh, Material()).csr.toarray()
    t0, t1 = mesh.tets
    dof0 = np.ravel([[3 * v + c for c in range(3)] for v in t0])
    dof1 = np.ravel([[3 * v + c for c in range(3)] for v in t1])
    assert np.all(k[np.ix_(dof0, dof1)] == 0.0)


def test_assembled_symmetry_exact(beam633_stiffness):
    diff = beam633_stiffness.csr - beam633_stiffness.csr.T
    assert diff.nnz == 0 or np.abs(diff.data).max() == 0.0


def test_assembled_psd(beam633_stiffness):
    k = beam633_stiffness
    norm = np.abs(k.csr.data).max()
    rng = np.random.default_rng(11)
    for _ in range(100):
        u = rng.normal(size=k.shape[0])
        assert u @ (k.csr @ u) >= -1e-9 * norm * (u @ u)


def test_assembled_rigid_modes(beam633, beam633_stiffness):
    k = beam633_stiffness
    norm = np.abs(k.csr.data).max()
    for mode in rigid_body_modes(beam633.nodes):
        energy = mode @ (k.csr @ mode)
        assert abs(energy) <= 1e-9 * norm * (mode @ mode)


def test_translation_null_beam222(beam222):
    k = assemble_stiffness(beam222, Material())
    u = np.tile([1.0, -2.0, 0.5], beam222.n_nodes)
    assert np.abs(k.csr @ u).max() <= 1e-9 * np.abs(k.csr.data).max()


# --- strain energy -----------------------------------------------------------

def test_strain_energy_zero_and_translation(beam222):
    k = assemble_stiffness(beam222, Material())
    assert strain_energy(k, np.zeros(k.shape[0])) == 0.0
    u = np.tile([1.0, 2.0, 3.0], beam222.n_nodes)
    assert abs(strain_energy(k, u)) <= 1e-9 * np.abs(k.csr.data).max() * (u @ u)


def test_strain_energy_boundary_only_translation_positive(beam222):
    # Boundary translated, interior pinned at zero: the spring coupling to the
    # interior stores positive energy.
    k = assemble_stiffness(beam222, Material())
    op = beam222.interpolation_op()
    u = op.apply_transpose(np.tile([1.0, 0.0, 0.0], beam222.boundary_count))
    assert beam222.boundary_count < beam222.n_nodes
    assert strain_energy(k, u) > 0.1


def test_strain_energy_length_check(beam222):
    k = assemble_stiffness(beam222, Material())
    with pytest.raises(ValueError):
        strain_energy(k, np.zeros(5))


# --- forward solves ----------------------------------------------------------

def test_forward_uniform_translation(beam222):
    k = assemble_stiffness(beam222, Material())
    t = np.array([1.5, -0.5, 2.0])
    bc = BcSpec(dirichlet={i: t for i in range(beam222.boundary_count)})
    u = solve_forward(beam222, k, bc, tol=1e-10)
    assert np.abs(u.reshape(-1, 3) - t).max() <= 1e-8


def test_forward_zero_everything(beam222):
    k = assemble_stiffness(beam222, Material())
    bc = BcSpec(dirichlet={0: np.zeros(3)})
    assert np.array_equal(solve_forward(beam222, k, bc), np.zeros(3 * beam222.n_nodes))


def dense_reduced_solve(mesh, k, bc):
    n_dof = 3 * mesh.n_nodes
    kd = k.csr.toarray()
    f = np.zeros(n_dof)
    for i, vec in bc.forces.items():
        f[3 * i : 3 * i + 3] = vec
    cons = np.ravel([[3 * i, 3 * i + 1, 3 * i + 2] for i in sorted(bc.dirichlet)])
    u_c = np.concatenate([bc.dirichlet[i] for i in sorted(bc.dirichlet)])
    free = np.setdiff1d(np.arange(n_dof), cons)
    u = np.zeros(n_dof)
    u[cons] = u_c
    u[free] = np.linalg.solve(kd[np.ix_(free, free)], f[free] - kd[np.ix_(free, cons)] @ u_c)
    return u


def test_forward_matches_dense_oracle():
    mesh = make_beam_mesh(4, 1, 1, 10.0)  # 20 nodes, well under the dense limit
    k = assemble_stiffness(mesh, Material())
    left = [i for i in range(mesh.boundary_count) if mesh.nodes[i, 0] == 0.0]
    right = [i for i in range(mesh.boundary_count) if mesh.nodes[i, 0] == 40.0]
    bc = BcSpec(
        dirichlet={i: np.zeros(3) for i in left},
        forces={i: np.array([1.0, 0.0, 0.0]) for i in right},
    )
    u = solve_forward(mesh, k, bc, tol=1e-12)
    assert np.abs(u - dense_reduced_solve(mesh, k, bc)).max() <= 1e-6


def test_forward_superposition(beam222):
    k = assemble_stiffness(beam222, Material())
    rng = np.random.default_rng(3)
    d1 = {i: rng.normal(size=3) for i in range(6)}
    d2 = {i: rng.normal(size=3) for i in range(6)}
    f1 = {20: rng.normal(size=3)}
    f2 = {20: rng.normal(size=3)}
    u1 = solve_forward(beam222, k, BcSpec(dirichlet=d1, forces=f1), tol=1e-12)
    u2 = solve_forward(beam222, k, BcSpec(dirichlet=d2, forces=f2), tol=1e-12)
    u12 = solve_forward(
        beam222,
        k,
        BcSpec(
            dirichlet={i: d1[i] + d2[i] for i in d1},
            forces={20: f1[20] + f2[20]},
        ),
        tol=1e-12,
    )
    assert np.abs(u12 - (u1 + u2)).max() <= 1e-6


def test_forward_requires_constraints(beam222):
    k = assemble_stiffness(beam222, Material())
    with pytest.raises(SolverError):
        solve_forward(beam222, k, BcSpec(forces={0: np.array([1.0, 0, 0])}))
    # zero load without constraints is fine
    u = solve_forward(beam222, k, BcSpec())
    assert np.array_equal(u, np.zeros(3 * beam222.n_nodes))


def test_bcspec_validation():
    with pytest.raises(ValueError):
        BcSpec(dirichlet={0: np.zeros(3)}, forces={0: np.ones(3)}).validate(n_nodes=4)
    with pytest.raises(ValueError):
        BcSpec(dirichlet={9: np.zeros(3)}).validate(n_nodes=4)


# --- conjugate gradients -----------------------------------------------------

def test_cg_identity_one_iteration():
    b = np.array([1.0, -2.0, 3.0])
    result = cg_solve(np.eye(3), b, tol=1e-12)
    assert result.converged and result.iterations == 1
    assert np.allclose(result.x, b, atol=1e-12)


def test_cg_diagonal_hand_case():
    a = np.diag([1.0, 2.0, 4.0])
    result = cg_solve(a, np.array([1.0, 2.0, 4.0]), tol=1e-12)
    assert np.allclose(result.x, np.ones(3), atol=1e-10)


def test_cg_random_spd_matches_dense():
    rng = np.random.default_rng(20)
    m = rng.normal(size=(20, 20))
    a = m @ m.T + 20 * np.eye(20)
    b = rng.normal(size=20)
    result = cg_solve(a, b, tol=1e-12, max_iter=500)
    assert result.converged
    assert np.abs(result.x - np.linalg.solve(a, b)).max() <= 1e-6


def test_cg_zero_rhs_immediate():
    result = cg_solve(np.eye(4), np.zeros(4))
    assert result.converged and result.iterations == 0
    assert np.array_equal(result.x, np.zeros(4))


def test_cg_max_iter_returns_best_iterate():
    rng = np.random.default_rng(4)
    m = rng.normal(size=(30, 30))
    a = m @ m.T + 0.1 * np.eye(30)
    b = rng.normal(size=30)
    result = cg_solve(a, b, tol=1e-14, max_iter=3)
    assert not result.converged
    assert result.relative_residual > 0
    # best iterate is no worse than the starting residual
    assert np.linalg.norm(b - a @ result.x) <= np.linalg.norm(b)


def test_cg_jacobi_preconditioner():
    a = np.diag([1.0, 10.0, 100.0, 1000.0])
    b = np.ones(4)
    plain = cg_solve(a, b, tol=1e-12)
    pre = cg_solve(a, b, tol=1e-12, jacobi=np.diag(a))
    assert pre.converged and pre.iterations <= plain.iterations
    assert np.allclose(pre.x, np.linalg.solve(a, b), atol=1e-9)


# --- deformation Jacobians ---------------------------------------------------

def test_jacobian_identity(beam222):
    dets = jacobian_determinants(beam222, np.zeros((beam222.n_nodes, 3)))
    assert np.allclose(dets, 1.0, atol=1e-14)


def test_jacobian_uniform_dilation(beam222):
    u = 0.1 * beam222.nodes
    dets = jacobian_determinants(beam222, u)
    assert np.allclose(dets, 1.1**3, rtol=1e-12)


def test_jacobian_small_rotation(beam222):
    theta = np.deg2rad(1.0)
    r = np.array(
        [[np.cos(theta), -np.sin(theta), 0], [np.sin(theta), np.cos(theta), 0], [0, 0, 1]]
    )
    u = beam222.nodes @ r.T - beam222.nodes
    dets = jacobian_determinants(beam222, u)
    # Exact rotations keep |J| = 1; only tests the linear-shape-function path.
    assert np.abs(dets - 1.0).max() < 5e-4


# --- kernel backends ---------------------------------------------------------

@pytest.mark.skipif(not kernels.HAVE_COMPILED, reason="compiled kernels unavailable")
def test_kernel_backends_agree(beam633):
    compiled = kernels.get_backend("compiled")
    fallback = kernels.get_backend("numpy")
    nodes = np.ascontiguousarray(beam633.nodes)
    tets = np.ascontiguousarray(beam633.tets)
    r1 = compiled.assembly_triplets(nodes, tets, 1.7, 0.9)
    r2 = fallback.assembly_triplets(nodes, tets, 1.7, 0.9)
    for a, b in zip(r1, r2):
        assert np.abs(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)).max() <= 1e-12
    rng = np.random.default_rng(0)
    u = rng.normal(size=(beam633.n_nodes, 3))
    assert np.abs(compiled.jacobian_dets(nodes, tets, u) - fallback.jacobian_dets(nodes, tets, u)).max() <= 1e-12
    assert np.abs(compiled.tet_volumes(nodes, tets) - fallback.tet_volumes(nodes, tets)).max() <= 1e-12
