"""SGD training loop tying net, hash head, losses, and batcher together.

Plain SGD with a constant learning rate (optional momentum, off by
default), seeded shuffling, a checkpoint overwritten every epoch, and
per-batch loss rows streamed to CSV. Contrastive and triplet losses are
optimized as per-term means so one learning rate works across all three
losses; the structured loss is already a mean over its pairs.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from . import batcher, hashhead, losses, tensornet
from .batcher import DatasetIndex, MiningConfig
from .tensornet import NetConfig, NetParams
from .hashhead import HashParams


class TrainingDiverged(RuntimeError):
    """Loss became NaN/Inf; training aborted."""


LOSS_NAMES = ("contrastive", "triplet", "structured")
GRAD_MODES = ("exact", "shared-indicator")


@dataclass
class TrainSettings:
    loss: str = "structured"
    grad_mode: str = "exact"
    bits: int = 48
    epochs: int = 100
    lr: float = 0.1
    momentum: float = 0.0
    margin: float = 1.0
    use_fc1: bool = True           # False = hash from FC2 only
    seed: int = 0
    mining: MiningConfig = field(default_factory=MiningConfig)

    def __post_init__(self):
        if self.loss not in LOSS_NAMES:
            raise ValueError(f"unknown loss {self.loss!r}")
        if self.grad_mode not in GRAD_MODES:
            raise ValueError(f"unknown grad_mode {self.grad_mode!r}")
        if self.bits < 1:
            raise ValueError(f"bits must be >= 1, got {self.bits}")
        if self.epochs < 0 or self.lr <= 0 or self.momentum < 0:
            raise ValueError("need epochs >= 0, lr > 0, momentum >= 0")


@dataclass
class TrainedModel:
    net_config: NetConfig
    net_params: NetParams
    hash_params: HashParams
    bits: int
    use_fc1: bool
    epoch_losses: list = field(default_factory=list)

    def embed_images(self, images: np.ndarray, chunk: int = 256) -> np.ndarray:
        """Soft embeddings for a uint8/[0,255] image batch."""
        images = np.asarray(images)
        if images.ndim == 3:
            return self.embed_images(images[None], chunk)[0]
        out = np.empty((len(images), self.bits))
        for s in range(0, len(images), chunk):
            x = tensornet.normalize_images(images[s:s + chunk])
            g1, g2, _ = tensornet.forward(self.net_config, self.net_params, x)
            out[s:s + len(x)] = hashhead.embed(self.hash_params, g1, g2)
        return out

    def encode_images(self, images: np.ndarray) -> np.ndarray:
        return hashhead.quantize(self.embed_images(images))


def _batch_plan(index: DatasetIndex, settings: TrainSettings, epoch: int):
    seed = settings.seed * 100003 + epoch
    m = settings.mining
    if settings.loss == "structured":
        return batcher.iter_structured_batches(index, m, seed, settings.margin)
    if settings.loss == "contrastive":
        return batcher.iter_pair_batches(index, m.batch_size, seed)
    return batcher.iter_triplet_batches(index, m.batch_size, seed)


def _batch_loss(settings: TrainSettings, embeddings: np.ndarray, batch):
    if settings.loss == "structured":
        return losses.structured_loss(embeddings, batch.pairs, batch.margin,
                                      settings.grad_mode)
    if settings.loss == "contrastive":
        val, grad = losses.contrastive_loss(embeddings, batch.pairs,
                                            batch.labels, settings.margin)
        n = len(batch.labels)
    else:
        val, grad = losses.triplet_loss(embeddings, batch.triplets,
                                        settings.margin)
        n = len(batch.triplets)
    return val / n, grad / n


def train(index: DatasetIndex, net_config: NetConfig, settings: TrainSettings,
          loss_log_path=None, checkpoint_path=None) -> TrainedModel:
    """Train a model on the index; returns it with per-epoch mean losses.

    When paths are given, per-batch losses stream to a CSV with columns
    epoch,batch-index,loss-name,value (epoch 1-based) and a checkpoint
    is written after initialization and again after every epoch.
    """
    if index.images is None:
        raise ValueError("training needs an index with images")
    net_params = tensornet.init_params(net_config, settings.seed)
    g1_dim = net_config.fc1_dim if settings.use_fc1 else 0
    hash_params = hashhead.init_hash_params(settings.bits, g1_dim,
                                            net_config.fc2_dim,
                                            settings.seed + 1)
    model = TrainedModel(net_config, net_params, hash_params,
                         settings.bits, settings.use_fc1)

    log_f = open(loss_log_path, "w", newline="") if loss_log_path else None
    log = csv.writer(log_f) if log_f else None
    if log:
        log.writerow(["epoch", "batch-index", "loss-name", "value"])
    if checkpoint_path:
        save_model(checkpoint_path, model)

    vel_w = [None if w is None else np.zeros_like(w) for w in net_params.weights]
    vel_b = [None if b is None else np.zeros_like(b) for b in net_params.biases]
    vel_hw = np.zeros_like(hash_params.weights)
    vel_hb = np.zeros_like(hash_params.bias)
    mu, lr = settings.momentum, settings.lr

    work = index
    try:
        for epoch in range(settings.epochs):
            batch_losses = []
            for bi, batch in enumerate(_batch_plan(work, settings, epoch)):
                rows = [work.row(i) for i in batch.image_ids]
                x = tensornet.normalize_images(work.images[rows])
                g1, g2, cache = tensornet.forward(net_config, net_params, x)
                emb = hashhead.embed(hash_params, g1, g2)
                val, grad_e = _batch_loss(settings, emb, batch)
                if not np.isfinite(val):
                    raise TrainingDiverged(
                        f"loss {val} at epoch {epoch + 1} batch {bi} "
                        f"({settings.loss}, lr={lr})")
                batch_losses.append(val)
                if log:
                    log.writerow([epoch + 1, bi, settings.loss, repr(val)])

                ghw, ghb, gg1, gg2 = hashhead.embed_backward(
                    hash_params, g1, g2, grad_e, embedding=emb)
                gw, gb, _ = tensornet.backward(net_config, net_params, cache,
                                               gg1, gg2)
                if mu > 0:
                    vel_hw = mu * vel_hw + ghw
                    vel_hb = mu * vel_hb + ghb
                    hash_params.weights -= lr * vel_hw
                    hash_params.bias -= lr * vel_hb
                    for li in range(len(gw)):
                        if gw[li] is not None:
                            vel_w[li] = mu * vel_w[li] + gw[li]
                            net_params.weights[li] -= lr * vel_w[li]
                        if gb[li] is not None:
                            vel_b[li] = mu * vel_b[li] + gb[li]
                            net_params.biases[li] -= lr * vel_b[li]
                else:
                    hash_params.weights -= lr * ghw
                    hash_params.bias -= lr * ghb
                    for li in range(len(gw)):
                        if gw[li] is not None:
                            net_params.weights[li] -= lr * gw[li]
                        if gb[li] is not None:
                            net_params.biases[li] -= lr * gb[li]

            model.epoch_losses.append(float(np.mean(batch_losses)))
            if (settings.mining.descriptor_source == "current-embedding"
                    and (epoch + 1) % settings.mining.refresh_interval == 0):
                work = batcher.refresh_descriptors(
                    work, model.embed_images, settings.mining)
            if checkpoint_path:
                save_model(checkpoint_path, model)
    finally:
        if log_f:
            log_f.close()
    return model


# ---------------------------------------------------------------------------
# checkpoint I/O


def _config_meta(config: NetConfig) -> dict:
    layers = []
    for s in config.layers:
        if s.kind == "conv":
            layers.append(["conv", s.filter_size[0], s.filter_size[1],
                           s.stride, s.out_channels])
        elif s.kind == "pool":
            layers.append(["pool", s.filter_size[0], s.filter_size[1], s.stride])
        else:
            layers.append(["fc", s.out_dim])
    return {"input_shape": list(config.input_shape), "layers": layers,
            "conv_bias": config.conv_bias}


def _config_from_meta(meta: dict) -> NetConfig:
    layers = []
    for entry in meta["layers"]:
        if entry[0] == "conv":
            layers.append(tensornet.conv(*entry[1:]))
        elif entry[0] == "pool":
            layers.append(tensornet.pool(*entry[1:]))
        else:
            layers.append(tensornet.fc(entry[1]))
    return NetConfig(tuple(meta["input_shape"]), tuple(layers),
                     meta["conv_bias"])


def save_model(path, model: TrainedModel) -> None:
    """Checkpoint: config in the JSON header, float64 tensors after it."""
    tensors = {"hash/weights": model.hash_params.weights,
               "hash/bias": model.hash_params.bias}
    for i, (w, b) in enumerate(zip(model.net_params.weights,
                                   model.net_params.biases)):
        if w is not None:
            tensors[f"net/w{i:02d}"] = w
        if b is not None:
            tensors[f"net/b{i:02d}"] = b
    meta = {"kind": "reidhash-checkpoint",
            "net_config": _config_meta(model.net_config),
            "bits": model.bits,
            "use_fc1": model.use_fc1,
            "seed": model.net_params.seed}
    tensornet.write_blob(path, meta, tensors)


def load_model(path) -> TrainedModel:
    meta, tensors = tensornet.read_blob(path)
    if meta.get("kind") != "reidhash-checkpoint":
        raise ValueError(f"{path}: not a model checkpoint")
    config = _config_from_meta(meta["net_config"])
    weights, biases = [], []
    for i, spec in enumerate(config.layers):
        weights.append(tensors.get(f"net/w{i:02d}"))
        biases.append(tensors.get(f"net/b{i:02d}"))
    params = NetParams(weights, biases, meta.get("seed", 0))
    g1_dim = config.fc1_dim if meta["use_fc1"] else 0
    hp = HashParams(tensors["hash/weights"], tensors["hash/bias"],
                    g1_dim, config.fc2_dim)
    if hp.weights.shape != (meta["bits"], g1_dim + config.fc2_dim):
        raise ValueError(f"{path}: hash weights do not match config dims")
    return TrainedModel(config, params, hp, meta["bits"], meta["use_fc1"])


# ---------------------------------------------------------------------------
# loss comparison harness


def epochs_to_fraction(epoch_means, fraction: float = 0.5):
    """First 1-based epoch whose mean loss <= fraction * first epoch's.

    Returns None when the threshold is never reached.
    """
    if not epoch_means:
        return None
    target = fraction * epoch_means[0]
    for e, v in enumerate(epoch_means, 1):
        if v <= target:
            return e
    return None


def compare_losses(index: DatasetIndex, net_config: NetConfig,
                   base: TrainSettings, triplet_batch_size: int = 120):
    """Train one model per loss under shared settings.

    Batch sizes follow the training protocol: 128 for contrastive and
    structured, 120 for triplet (overridable). Returns
    {loss-name: (epoch_losses or None, error-string or None)}; a
    diverging run yields (None, message) instead of aborting the rest.
    """
    out = {}
    for name in LOSS_NAMES:
        mining = base.mining
        if name == "triplet" and triplet_batch_size != mining.batch_size:
            mining = replace(mining, batch_size=triplet_batch_size)
        settings = replace(base, loss=name, mining=mining)
        try:
            model = train(index, net_config, settings)
            out[name] = (model.epoch_losses, None)
        except TrainingDiverged as e:
            out[name] = (None, str(e))
    return out
