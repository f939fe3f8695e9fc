"""Desk-scale federated learning for a conversational model.

Clients train a small encoder-decoder transformer on private
conversation silos, a combiner averages the weights by pair count and
folds rounds into a running global mean, and a chat service answers
messages with the current global model while feeding corrections back
into training.
"""

from .errors import (
    AggregationError,
    ConfigError,
    ContractError,
    DataError,
    Disconnected,
    FedbotError,
    FormatError,
    NumericError,
    ProtocolError,
    SchemaError,
    ShapeError,
    TruncationError,
)
from .model import TransformerConfig, count_parameters, forward, greedy_decode, init_weights
from .tensor import GradGraph, Tensor
from .tokenizer import Vocabulary, decode, encode, normalize, train_vocab
from .weights import ModelWeights

__version__ = "0.1.0"

__all__ = [
    "AggregationError",
    "ConfigError",
    "ContractError",
    "DataError",
    "Disconnected",
    "FedbotError",
    "FormatError",
    "GradGraph",
    "ModelWeights",
    "NumericError",
    "ProtocolError",
    "SchemaError",
    "ShapeError",
    "Tensor",
    "TransformerConfig",
    "TruncationError",
    "Vocabulary",
    "__version__",
    "count_parameters",
    "decode",
    "encode",
    "forward",
    "greedy_decode",
    "init_weights",
    "normalize",
    "train_vocab",
]
