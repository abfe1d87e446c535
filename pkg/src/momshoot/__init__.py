"""momshoot: predictive diffeomorphic image registration.

Optimizes LDDMM-style initial momenta as ground truth, trains a patch-wise
encoder-decoder to predict momenta from image appearance, and reconstructs
diffeomorphic deformations (with MC-dropout uncertainty) by geodesic
shooting.
"""

from .fields import (CLAMP, PERIODIC, DeformationMap, GridGeometry,
                     ScalarField, VectorField, gradient, identity_map,
                     interpolate, invert_map, jacobian_determinant, warp)
from .kernel import KernelParams, KernelPlan, apply_K, apply_L, make_plan
from .shooting import GeodesicState, ShootingConfig, ad_star, shoot, step
from .optimizer import (RegistrationConfig, RegistrationResult, energy,
                        energy_gradient, register)
from .patches import PatchBatch, PatchGrid, PatchSpec, assemble, extract, \
    plan_grid, prune
from .network import (NetConfig, NetworkWeights, TrainConfig, forward,
                      init_weights, predict_image, train)
from .uncertainty import (UncertaintyConfig, UncertaintyResult,
                          sample_predictions, summarize)
from .evaluation import (ErrorReport, build_atlas, deformation_error, report,
                         speed_accounting)

__version__ = "0.1.0"
