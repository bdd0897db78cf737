import numpy as np
import pytest

from tetreg.fem import Material, assemble_stiffness
from tetreg.mesh import geodesic_distance, make_beam_mesh
from tetreg.pipeline import register
from tetreg.pyramid import PyramidConfig
from tetreg.synth import PRESETS, generate_case

SUITE_SEEDS = range(10)
SUITE_PRESET = "liver-beam"
PIPELINE_MODES = ("nofem", "biompinn", "biompinn-pbm")


@pytest.fixture(scope="session")
def beam222():
    return make_beam_mesh(2, 2, 2, 10.0)


@pytest.fixture(scope="session")
def beam633():
    return make_beam_mesh(6, 3, 3, 10.0)


@pytest.fixture(scope="session")
def beam633_stiffness(beam633):
    return assemble_stiffness(beam633, Material())


class SuiteCase:
    """One synthetic case with registration results for every mode."""

    def __init__(self, seed):
        self.case = generate_case(PRESETS[SUITE_PRESET], seed)
        mesh = self.case.mesh
        self.mesh = mesh
        self.n = mesh.boundary_count
        self.stiffness = assemble_stiffness(mesh, self.case.material)
        self.geodesic = geodesic_distance(
            mesh.boundary_surface(), self.case.visible_vertices, normalized=True
        )
        self.unobserved = self.geodesic > 0
        self.true_surface = mesh.nodes[: self.n] + self.case.u_true[: self.n]
        cfg = PyramidConfig(
            lambda_strain=self.case.spec.lambda_strain,
            lambda_rigid=self.case.spec.lambda_rigid,
        )
        self.results = {}
        self.runtimes = {}
        for mode in PIPELINE_MODES:
            result = register(
                mesh, self.case.cloud, self.case.corr, mode=mode,
                k=self.stiffness, material=self.case.material, pyramid_cfg=cfg,
            )
            self.results[mode] = result
            self.runtimes[mode] = result.timings["total_s"]

    def errors(self, mode):
        if mode == "rigid-input":
            # The pre-aligned input itself: the no-deformable-registration baseline.
            return np.linalg.norm(self.case.u_true[: self.n], axis=1)
        u = self.results[mode].u_vol
        return np.linalg.norm((self.mesh.nodes[: self.n] + u[: self.n]) - self.true_surface, axis=1)


@pytest.fixture(scope="session")
def suite():
    return [SuiteCase(seed) for seed in SUITE_SEEDS]
