"""Component reduced-order models for steady incompressible flow over arrays of obstacles.

Reference components are meshed once, discretized with Taylor-Hood elements and
coupled across shared faces by interior-penalty terms.  Reduced bases trained
on small arrays are assembled into reduced systems of arbitrary array size.
"""

from .errors import CromError
from .fem import ComponentLibrary
from .geometry import ComponentGeometry, build_component_mesh, default_library
from .pod import generate_training_configs, collect_snapshots, pod, supremize
from .rom import RomLibrary, build_advection_tensor, train_eqp
from .solvers import build_topology, relative_error, reconstruct, solve_fom, solve_rom

__all__ = [
    "CromError",
    "ComponentGeometry",
    "ComponentLibrary",
    "RomLibrary",
    "build_advection_tensor",
    "build_component_mesh",
    "build_topology",
    "collect_snapshots",
    "default_library",
    "generate_training_configs",
    "pod",
    "reconstruct",
    "relative_error",
    "solve_fom",
    "solve_rom",
    "supremize",
    "train_eqp",
]

__version__ = "0.1.0"
