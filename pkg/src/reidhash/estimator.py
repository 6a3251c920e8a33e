"""Scikit-learn style front end: DeepHashEncoder.

fit() trains the net + hash head on a dataset index (or a manifest
path), transform() maps images to soft embeddings, encode() to packed
binary codes, and score() runs the cross-camera retrieval protocol and
returns MAP. Hyperparameters follow sklearn conventions (constructor
args stored verbatim, learned state in trailing-underscore attributes),
so get_params/set_params/clone work.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from . import batcher, codebank, hashhead, metrics, tensornet, training
from .batcher import DatasetIndex, MiningConfig
from .tensornet import NetConfig
from .training import TrainSettings, TrainedModel


def default_net_config(input_shape, fc1_dim: int = 96, fc2_dim: int = 48) -> NetConfig:
    """Small conv stack scaled to the input: 3x3 conv + 2x2 pool blocks
    until the spatial extent is small, then the two fc layers."""
    h, w, _ = input_shape
    layers = []
    channels = 8
    while h >= 12 and w >= 6 and len(layers) < 8:
        layers.append(tensornet.conv(3, 3, 1, channels))
        h, w = h - 2, w - 2
        if h >= 4 and w >= 4:
            layers.append(tensornet.pool(2, 2, 2))
            h, w = (h - 2) // 2 + 1, (w - 2) // 2 + 1
        channels = min(channels * 2, 32)
    if not layers:
        layers.append(tensornet.conv(2, 2, 1, 8))
    layers.append(tensornet.fc(fc1_dim))
    layers.append(tensornet.fc(fc2_dim))
    return NetConfig(tuple(input_shape), tuple(layers))


def as_index(data, query_cams=None) -> DatasetIndex:
    """Accept a DatasetIndex or a manifest path."""
    if isinstance(data, DatasetIndex):
        return data
    return batcher.load_index(data, query_cams=query_cams)


class DeepHashEncoder(BaseEstimator, TransformerMixin):
    """Learns binary person re-id codes from cross-camera image pairs.

    Parameters mirror the training settings; see TrainSettings and
    MiningConfig for semantics. net_config may be a NetConfig, a path to
    a net config text file, or None for a size-appropriate default.
    """

    def __init__(self, bits=48, loss="structured", grad_mode="exact",
                 epochs=100, lr=0.1, momentum=0.0, margin=1.0,
                 batch_size=128, negatives_per_side=2, refresh_interval=50,
                 descriptor_source="raw-pixels", mining_rule="semi-hard",
                 use_fc1=True, net_config=None, seed=0):
        self.bits = bits
        self.loss = loss
        self.grad_mode = grad_mode
        self.epochs = epochs
        self.lr = lr
        self.momentum = momentum
        self.margin = margin
        self.batch_size = batch_size
        self.negatives_per_side = negatives_per_side
        self.refresh_interval = refresh_interval
        self.descriptor_source = descriptor_source
        self.mining_rule = mining_rule
        self.use_fc1 = use_fc1
        self.net_config = net_config
        self.seed = seed

    # -- fitting ------------------------------------------------------

    def _settings(self) -> TrainSettings:
        mining = MiningConfig(self.batch_size, self.negatives_per_side,
                              self.refresh_interval, self.descriptor_source,
                              self.mining_rule)
        return TrainSettings(self.loss, self.grad_mode, self.bits,
                             self.epochs, self.lr, self.momentum, self.margin,
                             self.use_fc1, self.seed, mining)

    def _net_config(self, input_shape) -> NetConfig:
        if self.net_config is None:
            return default_net_config(input_shape)
        if isinstance(self.net_config, NetConfig):
            return self.net_config
        return tensornet.read_net_config(self.net_config)

    def fit(self, X, y=None, loss_log_path=None, checkpoint_path=None):
        """Train on a DatasetIndex or manifest path; y is ignored."""
        index = as_index(X)
        if index.images is None:
            raise ValueError("fit needs an index with images")
        config = self._net_config(index.images.shape[1:])
        model = training.train(index, config, self._settings(),
                               loss_log_path, checkpoint_path)
        self.model_ = model
        self.net_config_ = model.net_config
        self.loss_curve_ = list(model.epoch_losses)
        self.n_iter_ = len(model.epoch_losses)
        return self

    def _fitted(self) -> TrainedModel:
        if not hasattr(self, "model_"):
            raise ValueError("DeepHashEncoder is not fitted yet; call fit first")
        return self.model_

    # -- inference ----------------------------------------------------

    @staticmethod
    def _images_of(X) -> np.ndarray:
        if isinstance(X, DatasetIndex):
            if X.images is None:
                raise ValueError("index has no images")
            return X.images
        return np.asarray(X)

    def transform(self, X) -> np.ndarray:
        """Soft embeddings in (0, 1)^bits, one row per image."""
        return self._fitted().embed_images(self._images_of(X))

    def encode(self, X) -> np.ndarray:
        """Packed binary codes, one row of uint64 words per image."""
        return self._fitted().encode_images(self._images_of(X))

    def score(self, X, y=None) -> float:
        """Cross-camera retrieval MAP on the given index."""
        return evaluate_index(self._fitted(), as_index(X)).map

    # -- persistence --------------------------------------------------

    def save(self, path) -> None:
        training.save_model(path, self._fitted())

    @classmethod
    def from_checkpoint(cls, path) -> "DeepHashEncoder":
        model = training.load_model(path)
        enc = cls(bits=model.bits, use_fc1=model.use_fc1,
                  net_config=model.net_config)
        enc.model_ = model
        enc.net_config_ = model.net_config
        enc.loss_curve_ = []
        enc.n_iter_ = 0
        return enc


def evaluate_index(model: TrainedModel, index: DatasetIndex,
                   radius: int = 2, radius_top_n=None,
                   top_ns=(1, 5, 10), single_shot_seed=None,
                   denominator: str = "top-n") -> metrics.MetricsReport:
    """Encode the index and run the full retrieval metric suite."""
    codes = model.encode_images(index.images)
    g_rows = index.gallery_rows()
    bank = codebank.CodeBank(model.bits, codes[g_rows],
                             index.identity_ids[g_rows],
                             index.camera_ids[g_rows],
                             index.image_ids[g_rows])
    judgments = []
    for qr in index.query_rows():
        ranked = bank.rank(codes[qr], int(index.identity_ids[qr]),
                           int(index.camera_ids[qr]),
                           int(index.image_ids[qr]))
        rel = frozenset(
            index.image_ids[g_rows][
                index.identity_ids[g_rows] == index.identity_ids[qr]].tolist())
        judgments.append(metrics.QueryJudgment(ranked, rel))
    if single_shot_seed is not None:
        judgments = metrics.single_shot(judgments, single_shot_seed)
    return metrics.compute_report(judgments, model.bits, radius,
                                  radius_top_n, top_ns,
                                  denominator=denominator)
