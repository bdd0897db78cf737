"""Interactive biomechanical registration of tetrahedral organ models.

Deforms a preoperative tetrahedral model so its boundary aligns with a
partial intraoperative surface point cloud: a per-case-optimized sinusoidal
deformation pyramid proposes boundary displacements, a linear-elastic FEM
regularizes them, and a one-pass regularized solve produces the volumetric
field. An interactive session layer lets an operator correct residual
misalignments with paired line prompts.
"""

__version__ = "0.1.0"

from .fem import BcSpec, Material, StiffnessMatrix, assemble_stiffness, solve_forward
from .mesh import InterpolationOp, PointCloud, SurfaceMesh, TetMesh, make_beam_mesh

__all__ = [
    "BcSpec",
    "InterpolationOp",
    "Material",
    "PointCloud",
    "StiffnessMatrix",
    "SurfaceMesh",
    "TetMesh",
    "assemble_stiffness",
    "make_beam_mesh",
    "solve_forward",
    "__version__",
]
