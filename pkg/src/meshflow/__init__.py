"""Template-mesh flow onto target surfaces through stationary velocity fields."""

from .errors import MeshflowError
from .fit import FitConfig, StageSpec, fit_recurrent, fit_stage
from .flow import IntegrationConfig, deform_mesh, run_pipeline
from .mesh import TriangleMesh, VertexField, icosphere
from .metrics import compare_surfaces, self_intersection_fraction
from .svf import VelocityField

__version__ = "0.1.0"
