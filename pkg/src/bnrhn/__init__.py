"""Recurrent highway network caption decoders with batch-normalized loop inputs."""

from .batchnorm import BnLayer, bn_backward, bn_forward_infer, bn_forward_train, make_bn_layer
from .cells import HighwayDepthParams, LstmParams, RhnParams, Variant, init_params
from .estimator import BatchNormalizer, RHNCaptioner
from .training import TrainConfig, greedy_decode, train
from .vocab import Vocab

__version__ = "0.1.0"

__all__ = [
    "BnLayer",
    "bn_backward",
    "bn_forward_infer",
    "bn_forward_train",
    "make_bn_layer",
    "HighwayDepthParams",
    "LstmParams",
    "RhnParams",
    "Variant",
    "init_params",
    "BatchNormalizer",
    "RHNCaptioner",
    "TrainConfig",
    "greedy_decode",
    "train",
    "Vocab",
]
