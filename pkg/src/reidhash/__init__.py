"""Deep hashing for cross-camera person re-identification at desk scale.

A small from-scratch CNN maps person crops to binary codes through a
sigmoid hash layer. Training uses contrastive, triplet, or structured
comparison losses over hard-negative-mined mini-batches; retrieval ranks
a gallery by Hamming distance over bit-packed codes.
"""

from .estimator import DeepHashEncoder
from .tensornet import NetConfig, LayerSpec, ConfigError
from .hashhead import HashParams
from .batcher import DatasetIndex, MiningConfig
from .codebank import CodeBank
from .synthgen import SynthConfig

__version__ = "0.1.0"

__all__ = [
    "DeepHashEncoder",
    "NetConfig",
    "LayerSpec",
    "ConfigError",
    "HashParams",
    "DatasetIndex",
    "MiningConfig",
    "CodeBank",
    "SynthConfig",
    "__version__",
]
