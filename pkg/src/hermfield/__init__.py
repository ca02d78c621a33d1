"""C1 neural fields from hash-grid Hermite tables, with analytic derivatives
and a physics-informed training loop."""

from .basis import eval_tangent_basis, eval_tensor_basis, eval_value_basis
from .encoding import (
    EncodingConfig,
    EncodingJet,
    HashEncoding,
    OutOfDomainError,
    hash_index,
    level_resolutions,
)
from .field import FieldModel, ParamLayout, make_model
from .losses import (
    CollocationBatch,
    DivergenceError,
    LossBreakdown,
    LossWeights,
    loss_and_grad,
)
from .mlp import Jet2, JetMlp, MlpConfig, laplacian
from .problems import (
    PdeProblem,
    convection1p1d,
    flow_mixing,
    helmholtz2d,
    helmholtz3d,
    make_problem,
    relative_l2,
    taylor_green,
)

__version__ = "0.1.0"
