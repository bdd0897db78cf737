"""Acceptance gate: one test per exit criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s`. The synthetic regression
criteria run on a fixed 10-case suite (liver-beam preset, seeds 0..9)
computed once per session by the `suite` fixture in conftest.py. The rigid
baseline for the trend criteria is the pre-aligned input itself, the state
a navigation system would display with no deformable step.
"""

import itertools
import os
import time
import warnings

import numpy as np
import pytest

from tetreg import autodiff as ad
from tetreg.correspond import CorrespondenceSet, lap_binarize
from tetreg.fem import (
    BcSpec,
    Material,
    assemble_stiffness,
    rigid_body_modes,
    solve_forward,
)
from tetreg.mesh import PointCloud, geodesic_distance, make_beam_mesh
from tetreg.pipeline import register
from tetreg.pyramid import PyramidConfig
from tetreg.session import Prompt, Session, replay, session_snapshot
from tetreg.synth import PRESETS, generate_case
from tetreg.volume_fit import estimate_sigma2

PASS = "ACCEPTANCE {}: PASS"


# --- 1. FEM correctness ------------------------------------------------------

def test_fem_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)

    for dims, spacing in [((2, 2, 2), 10.0), ((4, 2, 2), 8.0), ((4, 3, 3), 6.0)]:
        mesh = make_beam_mesh(*dims, spacing)
        assert mesh.n_nodes <= 300
        k = assemble_stiffness(mesh, Material())

        diff = k.csr - k.csr.T
        assert diff.nnz == 0 or np.abs(diff.data).max() == 0.0

        norm = np.abs(k.csr.data).max()
        for _ in range(100):
            u = rng.normal(size=k.shape[0])
            assert u @ (k.csr @ u) >= -1e-9 * norm * (u @ u)

        for mode in rigid_body_modes(mesh.nodes):
            assert abs(mode @ (k.csr @ mode)) <= 1e-9 * norm * (mode @ mode)

        # dense direct oracle on the reduced system
        fixed = [i for i in range(mesh.boundary_count) if mesh.nodes[i, 0] == 0.0]
        loaded = [i for i in range(mesh.boundary_count) if mesh.nodes[i, 0] == mesh.nodes[:, 0].max()]
        bc = BcSpec(
            dirichlet={i: np.zeros(3) for i in fixed},
            forces={i: np.array([0.5, 0.2, -0.1]) for i in loaded},
        )
        u_cg = solve_forward(mesh, k, bc, tol=1e-12)
        kd = k.csr.toarray()
        n_dof = 3 * mesh.n_nodes
        cons = np.ravel([[3 * i, 3 * i + 1, 3 * i + 2] for i in sorted(bc.dirichlet)])
        free = np.setdiff1d(np.arange(n_dof), cons)
        f = np.zeros(n_dof)
        for i, vec in bc.forces.items():
            f[3 * i : 3 * i + 3] = vec
        u_dense = np.zeros(n_dof)
        u_dense[free] = np.linalg.solve(kd[np.ix_(free, free)], f[free])
        assert np.abs(u_cg - u_dense).max() <= 1e-6

        # uniform-translation Dirichlet reproduces the translation
        t = np.array([1.0, 2.0, -3.0])
        bc_t = BcSpec(dirichlet={i: t for i in range(mesh.boundary_count)})
        u_t = solve_forward(mesh, k, bc_t, tol=1e-10).reshape(-1, 3)
        assert np.abs(u_t - t).max() <= 1e-8

    elapsed = time.perf_counter() - t0
    assert elapsed < 60.0
    print(PASS.format(f"fem-correctness ({elapsed:.1f}s)"))


# --- 2. gradient engine -------------------------------------------------------

def test_gradient_engine():
    from tetreg.pyramid import (
        NormFrame,
        boundary_strain_matvec,
        encode,
        fem_level_weight,
        init_mlp,
        level_loss,
    )

    mesh = make_beam_mesh(3, 2, 2, 10.0)
    k = assemble_stiffness(mesh, Material())
    phi = mesh.interpolation_op()
    x = mesh.nodes[: mesh.boundary_count]
    rng = np.random.default_rng(1)
    y = x[:25] + rng.normal(0, 1.5, (25, 3))
    frame = NormFrame.from_points(x, y)
    xn = frame.normalize(x)
    cfg = PyramidConfig(lambda_strain=3e-4, lambda_rigid=1e-3)
    params = init_mlp(cfg, np.random.default_rng(2))
    params.weights[-1].data[:] = rng.normal(0, 0.3, params.weights[-1].data.shape)
    sm = boundary_strain_matvec(k, phi)
    gamma = encode(xn, 2)

    def loss():
        total, _ = level_loss(
            params, gamma, xn, x, np.zeros_like(x), y, np.arange(25), frame,
            alpha=fem_level_weight(2, 4), cfg=cfg, strain_matvec=sm,
        )
        return total

    res = ad.grad_check(loss, params.tensors, eps=1e-4, n_coords=60,
                        rng=np.random.default_rng(3))
    assert len(res.rel_errors) >= 50
    assert res.max_rel_error <= 1e-4

    res_half = ad.grad_check(loss, params.tensors, eps=5e-5, n_coords=60,
                             rng=np.random.default_rng(3))
    meaningful = res_half.abs_errors > 1e-13
    ratios = res.abs_errors[meaningful] / res_half.abs_errors[meaningful]
    median_ratio = float(np.median(ratios))
    assert 2.5 <= median_ratio <= 6.0
    print(PASS.format(
        f"gradient-engine (max rel {res.max_rel_error:.2e}, eps ratio {median_ratio:.2f})"
    ))


# --- 3. assignment oracle -----------------------------------------------------

def brute_force_best_score(soft):
    n, m = soft.shape
    best = -np.inf
    if n <= m:
        for perm in itertools.permutations(range(m), n):
            best = max(best, sum(soft[i, j] for i, j in enumerate(perm)))
    else:
        for perm in itertools.permutations(range(n), m):
            best = max(best, sum(soft[i, j] for j, i in enumerate(perm)))
    return best


def test_lap_matches_brute_force_200_seeds():
    for seed in range(200):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(1, 9))
        m = int(rng.integers(1, 9))
        soft = rng.random((n, m))
        corr = lap_binarize(soft)
        achieved = soft[corr.pairs[:, 0], corr.pairs[:, 1]].sum()
        assert achieved == pytest.approx(brute_force_best_score(soft), abs=1e-12), seed
    print(PASS.format("lap-oracle (200 seeds)"))


# --- 4. sigma^2 and the one-pass solve ----------------------------------------

def test_sigma2_and_volume_solve_energy(suite):
    mesh = make_beam_mesh(1, 1, 1, 10.0)
    y = PointCloud(mesh.nodes[:1] + np.array([1.0, 0.0, 0.0]))
    corr = CorrespondenceSet(np.array([[0, 0]]), mesh.boundary_count, 1)
    s2 = estimate_sigma2(mesh.nodes, np.zeros((mesh.n_nodes, 3)), y, corr)
    assert s2 == pytest.approx(1.0 / 3.0, abs=1e-15)
    aligned = PointCloud(mesh.nodes[:2].copy())
    corr2 = CorrespondenceSet(np.column_stack([np.arange(2)] * 2), mesh.boundary_count, 2)
    assert estimate_sigma2(mesh.nodes, np.zeros((mesh.n_nodes, 3)), aligned, corr2) == 0.0

    for sc in suite:
        pbm = sc.results["biompinn-pbm"].pbm
        assert pbm is not None and pbm.sigma2 > 0
        assert pbm.energy_final <= pbm.energy_init + 1e-9
    print(PASS.format("sigma2-and-volume-solve (10 cases)"))


# --- 5. error-vs-geodesic trend -------------------------------------------------

def test_trend_ordering_and_improvement(suite):
    def mean_tre(mode, unobserved_only):
        values = []
        for sc in suite:
            err = sc.errors(mode)
            values.append(err[sc.unobserved].mean() if unobserved_only else err.mean())
        return float(np.mean(values))

    for sc in suite:
        assert sc.case.visibility >= 0.30

    rigid_u = mean_tre("rigid-input", True)
    nofem_u = mean_tre("nofem", True)
    biom_u = mean_tre("biompinn", True)
    pbm_u = mean_tre("biompinn-pbm", True)
    assert rigid_u > nofem_u
    assert nofem_u >= biom_u
    assert biom_u >= pbm_u

    rigid_all = mean_tre("rigid-input", False)
    pbm_all = mean_tre("biompinn-pbm", False)
    assert pbm_all <= 0.5 * rigid_all

    slowest = max(max(sc.runtimes.values()) for sc in suite)
    assert slowest <= 60.0
    print(PASS.format(
        "error-vs-geodesic-trend "
        f"(unobserved TRE {rigid_u:.2f} > {nofem_u:.2f} >= {biom_u:.2f} >= {pbm_u:.2f} mm; "
        f"full {pbm_all:.2f} <= 0.5 * {rigid_all:.2f}; slowest case {slowest:.1f}s)"
    ))


# --- 6. deformation-field consistency -------------------------------------------

def test_field_consistency(suite):
    from tetreg.fem import jacobian_determinants

    pooled = {}
    for mode in ("nofem", "biompinn", "biompinn-pbm"):
        dets = [jacobian_determinants(sc.mesh, sc.results[mode].u_vol) for sc in suite]
        pooled[mode] = np.concatenate(dets)

    for mode in ("biompinn", "biompinn-pbm"):
        frac = ((pooled[mode] >= 0.8) & (pooled[mode] <= 1.2)).mean()
        assert frac >= 0.99, (mode, frac)

    def iqr(x):
        q = np.quantile(x, [0.25, 0.75])
        return q[1] - q[0]

    assert iqr(pooled["nofem"]) > iqr(pooled["biompinn"])
    print(PASS.format(
        "field-consistency "
        f"(in-band biompinn {((pooled['biompinn'] >= 0.8) & (pooled['biompinn'] <= 1.2)).mean():.4f}, "
        f"IQR unconstrained {iqr(pooled['nofem']):.4f} > constrained {iqr(pooled['biompinn']):.4f})"
    ))


# --- 7 + 8. interactive refinement and latency -----------------------------------

@pytest.fixture(scope="module")
def corrupted_prompt_run():
    case = generate_case(PRESETS["liver-beam"], 3)
    mesh = case.mesh
    n = mesh.boundary_count
    k = assemble_stiffness(mesh, case.material)
    surf = mesh.boundary_surface()
    true_pos = mesh.nodes[:n] + case.u_true[:n]

    # corrupt the correspondence rows inside one surface patch
    pairs = case.corr.pairs.copy()
    seed_vertex = int(pairs[len(pairs) // 3, 0])
    dist = geodesic_distance(surf, [seed_vertex])
    patch_rows = np.flatnonzero(dist[pairs[:, 0]] <= 16.0)
    pairs[patch_rows, 1] = pairs[patch_rows[::-1], 1]
    bad_corr = CorrespondenceSet(pairs, case.corr.n_source, case.corr.n_target)
    patch_vertices = pairs[patch_rows, 0]

    cfg = PyramidConfig(lambda_strain=case.spec.lambda_strain)
    auto = register(mesh, case.cloud, bad_corr, mode="biompinn-pbm", k=k,
                    material=case.material, pyramid_cfg=cfg)
    session = Session.create(mesh, case.cloud, corr=bad_corr, stiffness=k,
                             pyramid_cfg=cfg, initial_field=auto.u_vol)

    err_before = np.linalg.norm((mesh.nodes[:n] + session.u_vol[:n]) - true_pos, axis=1)

    # scripted prompt: a bent path through the patch paired with its true
    # counterpart points on the cloud
    order = np.argsort(mesh.nodes[patch_vertices, 0] + 0.3 * mesh.nodes[patch_vertices, 1])
    path = patch_vertices[order][np.linspace(0, len(patch_vertices) - 1, 5).astype(int)]
    true_target = {i: j for i, j in case.corr.pairs}
    prompt = Prompt(
        line_on_model=session.deformed_surface[path],
        line_on_cloud=case.cloud.points[[true_target[i] for i in path]],
        prompt_id="scripted",
    )
    info = session.apply_prompt(prompt)
    err_after = np.linalg.norm((mesh.nodes[:n] + session.u_vol[:n]) - true_pos, axis=1)
    return case, k, session, patch_vertices, err_before, err_after, info


def test_interactive_refinement(corrupted_prompt_run):
    case, k, session, patch, err_before, err_after, info = corrupted_prompt_run
    mesh = case.mesh
    n = mesh.boundary_count

    assert err_after[patch].mean() < err_before[patch].mean()
    assert err_after.mean() <= 1.05 * err_before.mean()

    # exact bookkeeping at the current revision
    assert np.array_equal(session.deformed_surface, mesh.nodes[:n] + session.u_vol[:n])

    # bitwise-deterministic replay of the prompt history
    snap = session_snapshot(session)
    replayed = replay(snap, mesh, case.cloud, k, session.pyramid_cfg, session.pbm_cfg)
    assert np.array_equal(replayed.u_vol, session.u_vol)
    print(PASS.format(
        "interactive-refinement "
        f"(patch TRE {err_before[patch].mean():.2f} -> {err_after[patch].mean():.2f} mm, "
        f"global {err_before.mean():.2f} -> {err_after.mean():.2f} mm)"
    ))


def test_prompt_latency(corrupted_prompt_run):
    *_, info = corrupted_prompt_run
    seconds = info["seconds"]
    if seconds > 10.0:
        warnings.warn(f"prompt processing took {seconds:.1f}s (> 10s soft budget)")
    assert seconds <= 30.0
    print(PASS.format(f"prompt-latency ({seconds:.2f}s)"))


# --- 9. optional dataset-gated check ---------------------------------------------

@pytest.mark.skipif(
    "TETREG_SPARSE_CHALLENGE_DIR" not in os.environ,
    reason="sparse-data-challenge bundle not supplied (set TETREG_SPARSE_CHALLENGE_DIR)",
)
def test_sparse_challenge_informational():
    from tetreg.synth import load_case

    root = os.environ["TETREG_SPARSE_CHALLENGE_DIR"]
    bundles = sorted(
        d for d in os.listdir(root) if os.path.exists(os.path.join(root, d, "case.json"))
    )
    assert bundles, f"{root} holds no case bundles"
    tres = []
    for name in bundles:
        case = load_case(os.path.join(root, name))
        cfg = PyramidConfig(lambda_strain=case.spec.lambda_strain)
        result = register(case.mesh, case.cloud, case.corr, mode="biompinn-pbm",
                          material=case.material, pyramid_cfg=cfg)
        n = case.mesh.boundary_count
        err = np.linalg.norm(result.u_boundary - case.u_true[:n], axis=1)
        tres.append(err.mean())
    mean_tre = float(np.mean(tres))
    print(f"ACCEPTANCE sparse-challenge: mean TRE {mean_tre:.2f} mm over {len(tres)} cases "
          f"(informational target <= 4.5 mm)")
    if mean_tre > 4.5:
        warnings.warn(f"informational target missed: {mean_tre:.2f} mm > 4.5 mm")
