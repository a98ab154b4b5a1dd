
from .checkpoint import load_checkpoint, save_checkpoint, tensors_digest
from .layers import (AftLayer, AftLayerSpec, Mlp, MlpSpec, ShapeError, aft_layer_forward,
                     make_generator, mlp_forward)
from .ops import (ZeroVectorError, batchnorm_forward, l2_normalize, layer_norm, relu, sigmoid,
                  softmax)
from .optim import (LrSchedule, NonFiniteError, OptimizerState, adam, adamw, grad, lr_at,
                    optimizer_step)

__all__ = [
    "AftLayer", "AftLayerSpec", "LrSchedule", "Mlp", "MlpSpec", "NonFiniteError", "OptimizerState", "ShapeError",
    "ZeroVectorError", "adam", "adamw", "aft_layer_forward", "batchnorm_forward", "grad", "l2_normalize", "layer_norm",
    "load_checkpoint", "lr_at", "make_generator", "mlp_forward", "optimizer_step", "relu", "save_checkpoint", "sigmoid",
    "softmax", "tensors_digest",
]
