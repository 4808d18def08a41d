"""Semantic segmentation with temporal scene priors, on a small numpy autodiff core."""

__version__ = "0.1.0"

from pfseg.tensor import (  # noqa: E402
    IndexMap,
    Tape,
    Tensor,
    add,
    backward,
    concat_channels,
    conv2d,
    max_pool2d,
    max_unpool2d,
    relu,
    softmax_cross_entropy,
    tanh,
)
from pfseg.gradcheck import grad_check  # noqa: E402
from pfseg.optim import sgd_step  # noqa: E402
from pfseg.models import ModelSpec, build_model, count_params, forward  # noqa: E402
from pfseg.metrics import ConfusionMatrix, MetricsReport  # noqa: E402
from pfseg.dataset import LabeledFramePair, default_class_table, generate_synthetic  # noqa: E402
from pfseg.train import TrainConfig, evaluate, finetune_from, train  # noqa: E402
from pfseg.checkpoint import load_checkpoint, save_checkpoint  # noqa: E402

__all__ = [
    "IndexMap",
    "Tape",
    "Tensor",
    "add",
    "backward",
    "concat_channels",
    "conv2d",
    "max_pool2d",
    "max_unpool2d",
    "relu",
    "softmax_cross_entropy",
    "tanh",
    "grad_check",
    "sgd_step",
    "ModelSpec",
    "build_model",
    "count_params",
    "forward",
    "ConfusionMatrix",
    "MetricsReport",
    "LabeledFramePair",
    "default_class_table",
    "generate_synthetic",
    "TrainConfig",
    "evaluate",
    "finetune_from",
    "train",
    "load_checkpoint",
    "save_checkpoint",
]
