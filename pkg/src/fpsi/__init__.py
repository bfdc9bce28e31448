"""Finite elements for non-Newtonian Stokes flow coupled to a Biot poroelastic medium."""

import os as _os

# thread cap for BLAS-backed kernels; only effective before numpy is loaded
if _os.environ.get("FPSI_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["FPSI_THREADS"])

from .mesh import BoundaryLabel, SubMesh, build_structured_mesh, example1_meshes, pair_interface  # noqa: E402
from .viscosity import Law, ViscosityModel, newtonian  # noqa: E402
from .forms import Assembler, ProblemConfig, SolutionState, build_discretization  # noqa: E402
from .solver import PicardSettings, TimeSettings, picard_solve, time_loop  # noqa: E402
from .analysis import NormSpec, compute_norm, convergence_orders, relative_error  # noqa: E402

__version__ = "0.1.0"
