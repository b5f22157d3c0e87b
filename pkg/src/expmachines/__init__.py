"""Exponential Machines: all-order feature interactions with a TT weight tensor."""

from .data import (
    Dataset,
    DataError,
    SynthSpec,
    accuracy,
    auc,
    car_like,
    load_csv,
    load_sparse,
    one_hot_encode,
    synth_generate,
    write_csv,
)
from .model import (
    Categorical,
    FeatureSchema,
    LossSpec,
    Numeric,
    SchemaError,
    build_object_tensor,
    linear_init,
    predict,
    predict_batch,
)
from .optim import TrainConfig, TrainTrace, train, train_core_sgd, train_linear, train_riemannian
from .riemannian import TangentVector, project_tangent, retract, riemannian_gradient
from .tt import TTTensor, tt_add, tt_decompose, tt_dot, tt_element, tt_materialize, tt_norm, tt_round

__version__ = "0.1.0"
