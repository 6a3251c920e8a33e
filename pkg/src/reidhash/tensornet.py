"""Minimal feed-forward conv net with explicit backprop, numpy only.

Supported layers: valid 2-D convolution, max pooling, fully connected.
Convolution and fully-connected layers are followed by tanh; pooling has
no activation. The net ends in exactly two fully-connected layers and
exposes both of their activations (g1 from the first, g2 from the second)
so a downstream head can tap the penultimate features as well as the
final ones.

Everything is float64 and deterministic: parameter init is driven by a
single integer seed, and forward/backward use no unordered reductions.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class ConfigError(ValueError):
    """A network or head configuration is structurally invalid."""


# ---------------------------------------------------------------------------
# layer / net configuration


@dataclass(frozen=True)
class LayerSpec:
    kind: str                 # "conv" | "pool" | "fc"
    filter_size: tuple[int, int] = (1, 1)
    stride: int = 1
    out_channels: int = 0     # conv only
    out_dim: int = 0          # fc only
    activation: str = "tanh"  # "tanh" | "none"

    def __post_init__(self):
        if self.kind not in ("conv", "pool", "fc"):
            raise ConfigError(f"unknown layer kind {self.kind!r}")
        if self.stride < 1:
            raise ConfigError(f"stride must be >= 1, got {self.stride}")
        fh, fw = self.filter_size
        if fh < 1 or fw < 1:
            raise ConfigError(f"filter size must be >= 1, got {self.filter_size}")
        if self.kind == "conv":
            if self.out_channels < 1:
                raise ConfigError("conv layer needs out_channels >= 1")
            if self.activation != "tanh":
                raise ConfigError("conv layers use tanh activation")
        elif self.kind == "fc":
            if self.out_dim < 1:
                raise ConfigError("fc layer needs out_dim >= 1")
            if self.activation != "tanh":
                raise ConfigError("fc layers use tanh activation")
        elif self.kind == "pool":
            if self.activation != "none":
                raise ConfigError("pool layers have no activation")


def conv(fh: int, fw: int, stride: int, out_channels: int) -> LayerSpec:
    return LayerSpec("conv", (fh, fw), stride, out_channels=out_channels)


def pool(fh: int, fw: int, stride: int) -> LayerSpec:
    return LayerSpec("pool", (fh, fw), stride, activation="none")


def fc(out_dim: int) -> LayerSpec:
    return LayerSpec("fc", out_dim=out_dim)


@dataclass(frozen=True)
class NetConfig:
    """Layer stack plus input geometry.

    The stack must be conv/pool layers in any order followed by exactly
    two fc layers. Spatial sizes follow valid convolution arithmetic,
    out = (in - filter) // stride + 1, so filters that do not tile the
    input exactly simply drop the trailing rows/columns.
    """

    input_shape: tuple[int, int, int]   # (H, W, C)
    layers: tuple[LayerSpec, ...] = field(default_factory=tuple)
    conv_bias: bool = True

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))
        h, w, c = self.input_shape
        if h < 1 or w < 1 or c < 1:
            raise ConfigError(f"bad input shape {self.input_shape}")
        fcs = [l for l in self.layers if l.kind == "fc"]
        if len(fcs) != 2 or self.layers[-2:] != tuple(fcs):
            raise ConfigError("net must end in exactly two fc layers")
        self.feature_shapes()  # validates spatial arithmetic

    def feature_shapes(self) -> list[tuple]:
        """Output shape after each layer; (H, W, C) or (dim,) tuples."""
        shapes = []
        cur: tuple = self.input_shape
        for i, spec in enumerate(self.layers):
            if spec.kind in ("conv", "pool"):
                if len(cur) != 3:
                    raise ConfigError(f"layer {i}: {spec.kind} after fc")
                h, w, c = cur
                fh, fw = spec.filter_size
                if fh > h or fw > w:
                    raise ConfigError(
                        f"layer {i}: filter {spec.filter_size} larger than input {h}x{w}")
                oh = (h - fh) // spec.stride + 1
                ow = (w - fw) // spec.stride + 1
                oc = spec.out_channels if spec.kind == "conv" else c
                cur = (oh, ow, oc)
            else:
                cur = (spec.out_dim,)
            shapes.append(cur)
        return shapes

    @property
    def fc1_dim(self) -> int:
        return self.layers[-2].out_dim

    @property
    def fc2_dim(self) -> int:
        return self.layers[-1].out_dim


# ---------------------------------------------------------------------------
# parameters


@dataclass
class NetParams:
    """Per-layer weights/biases, entries are None for pooling layers."""

    weights: list
    biases: list
    seed: int = 0

    def copy(self) -> "NetParams":
        return NetParams([None if w is None else w.copy() for w in self.weights],
                         [None if b is None else b.copy() for b in self.biases],
                         self.seed)


def init_params(config: NetConfig, seed: int) -> NetParams:
    """Glorot-uniform weights, zero biases, seeded.

    Bound a = sqrt(6 / (fan_in + fan_out)); conv fans count filter area
    times channels on each side.
    """
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    cur: tuple = config.input_shape
    for spec in config.layers:
        if spec.kind == "conv":
            h, w, cin = cur
            fh, fw = spec.filter_size
            fan_in = fh * fw * cin
            fan_out = fh * fw * spec.out_channels
            a = np.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-a, a, size=(fh, fw, cin, spec.out_channels)))
            biases.append(np.zeros(spec.out_channels) if config.conv_bias else None)
            cur = ((h - fh) // spec.stride + 1, (w - fw) // spec.stride + 1,
                   spec.out_channels)
        elif spec.kind == "pool":
            h, w, c = cur
            fh, fw = spec.filter_size
            weights.append(None)
            biases.append(None)
            cur = ((h - fh) // spec.stride + 1, (w - fw) // spec.stride + 1, c)
        else:
            din = int(np.prod(cur))
            a = np.sqrt(6.0 / (din + spec.out_dim))
            weights.append(rng.uniform(-a, a, size=(din, spec.out_dim)))
            biases.append(np.zeros(spec.out_dim))
            cur = (spec.out_dim,)
    return NetParams(weights, biases, seed)


def count_params(params: NetParams) -> int:
    n = 0
    for arr in params.weights + params.biases:
        if arr is not None:
            n += arr.size
    return n


def normalize_images(images: np.ndarray) -> np.ndarray:
    """Map pixel values in [0, 255] to [-1, 1] float64."""
    return images.astype(np.float64) / 127.5 - 1.0


# ---------------------------------------------------------------------------
# forward / backward


def _windows(x: np.ndarray, fh: int, fw: int, stride: int) -> np.ndarray:
    # x (N,H,W,C) -> (N,oh,ow,C,fh,fw)
    v = np.lib.stride_tricks.sliding_window_view(x, (fh, fw), axis=(1, 2))
    return v[:, ::stride, ::stride]


def forward(config: NetConfig, params: NetParams, images: np.ndarray):
    """Run the net; returns (g1, g2, cache).

    Accepts a single (H, W, C) image or a batch (N, H, W, C). g1 is the
    activation of the first fc layer, g2 of the second; for a single
    image they come back 1-D. The cache feeds backward().
    """
    single = images.ndim == 3
    x = images[None] if single else images
    x = np.asarray(x, dtype=np.float64)
    if x.shape[1:] != config.input_shape:
        raise ConfigError(
            f"input shape {x.shape[1:]} does not match config {config.input_shape}")

    layer_caches = []
    fc_outputs = []
    for spec, W, b in zip(config.layers, params.weights, params.biases):
        if spec.kind == "conv":
            fh, fw = spec.filter_size
            n, h, w_, cin = x.shape
            win = _windows(x, fh, fw, spec.stride)
            oh, ow = win.shape[1], win.shape[2]
            # flatten windows to rows ordered (fh, fw, cin) to match W layout
            cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * oh * ow, fh * fw * cin)
            z = cols @ W.reshape(-1, spec.out_channels)
            if b is not None:
                z = z + b
            a = np.tanh(z).reshape(n, oh, ow, spec.out_channels)
            layer_caches.append({"cols": cols, "a": a, "x_shape": x.shape})
            x = a
        elif spec.kind == "pool":
            fh, fw = spec.filter_size
            win = _windows(x, fh, fw, spec.stride)
            n, oh, ow, c = win.shape[:4]
            flat = win.reshape(n, oh, ow, c, fh * fw)
            idx = np.argmax(flat, axis=-1)
            a = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
            layer_caches.append({"argmax": idx, "x_shape": x.shape})
            x = a
        else:
            xf = x.reshape(x.shape[0], -1)
            a = np.tanh(xf @ W + b)
            layer_caches.append({"x_flat": xf, "a": a, "x_shape": x.shape})
            x = a
            fc_outputs.append(a)

    g1, g2 = fc_outputs
    cache = {"layers": layer_caches, "single": single, "n": g1.shape[0],
             "n_layers": len(config.layers)}
    if single:
        return g1[0], g2[0], cache
    return g1, g2, cache


def backward(config: NetConfig, params: NetParams, cache: dict,
             grad_g1: np.ndarray, grad_g2: np.ndarray):
    """Backprop loss gradients on (g1, g2) through the whole stack.

    grad_g1 covers only the direct (bypass) use of g1; its indirect use
    through the second fc layer is accounted for here. Returns
    (grad_weights, grad_biases, grad_input) shaped like the parameters
    and the forward input.
    """
    if cache.get("n_layers") != len(config.layers):
        raise RuntimeError("forward cache does not match this config")
    single = cache["single"]
    g1_c = cache["layers"][-2]["a"]
    g2_c = cache["layers"][-1]["a"]
    dg1 = np.asarray(grad_g1, dtype=np.float64)
    dg2 = np.asarray(grad_g2, dtype=np.float64)
    if single:
        dg1, dg2 = dg1[None], dg2[None]
    if dg1.shape != g1_c.shape or dg2.shape != g2_c.shape:
        raise RuntimeError("gradient shapes do not match cached activations")

    grad_w: list = [None] * len(config.layers)
    grad_b: list = [None] * len(config.layers)

    # second fc layer
    lc = cache["layers"][-1]
    W = params.weights[-1]
    dz = dg2 * (1.0 - lc["a"] ** 2)
    grad_w[-1] = lc["x_flat"].T @ dz
    grad_b[-1] = dz.sum(axis=0)
    da = dz @ W.T + dg1            # total gradient reaching g1

    # first fc layer
    lc = cache["layers"][-2]
    W = params.weights[-2]
    dz = da * (1.0 - lc["a"] ** 2)
    grad_w[-2] = lc["x_flat"].T @ dz
    grad_b[-2] = dz.sum(axis=0)
    da = (dz @ W.T).reshape(lc["x_shape"])

    for i in range(len(config.layers) - 3, -1, -1):
        spec = config.layers[i]
        lc = cache["layers"][i]
        if spec.kind == "conv":
            fh, fw = spec.filter_size
            s = spec.stride
            n, h, w_, cin = lc["x_shape"]
            a = lc["a"]
            oh, ow, cout = a.shape[1:]
            dz = (da * (1.0 - a ** 2)).reshape(-1, cout)
            W = params.weights[i]
            grad_w[i] = (lc["cols"].T @ dz).reshape(W.shape)
            if params.biases[i] is not None:
                grad_b[i] = dz.sum(axis=0)
            dcols = (dz @ W.reshape(-1, cout).T).reshape(n, oh, ow, fh, fw, cin)
            dx = np.zeros(lc["x_shape"])
            # windows at a fixed in-filter offset never overlap, so plain
            # slice-add is safe here
            for u in range(fh):
                for v in range(fw):
                    dx[:, u:u + s * oh:s, v:v + s * ow:s, :] += dcols[:, :, :, u, v, :]
            da = dx
        else:  # pool
            fh, fw = spec.filter_size
            s = spec.stride
            idx = lc["argmax"]
            n, oh, ow, c = idx.shape
            u, v = idx // fw, idx % fw
            dx = np.zeros(lc["x_shape"])
            ni, oi, oj, ci = np.indices(idx.shape)
            np.add.at(dx, (ni, oi * s + u, oj * s + v, ci), da)
            da = dx

    if single:
        da = da[0]
    return grad_w, grad_b, da


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    n_kinks: int
    worst: str = ""

    def __str__(self):
        return (f"grad check: max rel error {self.max_rel_error:.3e} over "
                f"{self.n_checked} params ({self.n_kinks} kinks skipped)"
                + (f", worst at {self.worst}" if self.worst else ""))


def check_gradients(config: NetConfig, params: NetParams, image: np.ndarray,
                    loss_fn, step: float = 1e-5) -> GradCheckResult:
    """Compare backprop gradients against central finite differences.

    loss_fn(g1, g2) -> (loss, dg1, dg2) defines the objective. Meant for
    toy-sized nets; every scalar parameter is perturbed twice. Parameters
    sitting on a non-differentiable point (detected by one-sided
    differences disagreeing) are skipped and counted, not scored.
    """
    g1, g2, cache = forward(config, params, image)
    _, dg1, dg2 = loss_fn(g1, g2)
    gw, gb, _ = backward(config, params, cache, dg1, dg2)

    def loss_at() -> float:
        a1, a2, _ = forward(config, params, image)
        return float(loss_fn(a1, a2)[0])

    base = loss_at()
    max_rel, n_checked, n_kinks, worst = 0.0, 0, 0, ""
    for kind, plist, glist in (("w", params.weights, gw), ("b", params.biases, gb)):
        for li, (arr, garr) in enumerate(zip(plist, glist)):
            if arr is None:
                continue
            flat = arr.ravel()
            gflat = garr.ravel()
            for j in range(flat.size):
                orig = flat[j]
                flat[j] = orig + step
                lp = loss_at()
                flat[j] = orig - step
                lm = loss_at()
                flat[j] = orig
                d_plus = (lp - base) / step
                d_minus = (base - lm) / step
                if abs(d_plus - d_minus) > 1e-2 * max(1.0, abs(d_plus), abs(d_minus)):
                    n_kinks += 1
                    continue
                numeric = (lp - lm) / (2 * step)
                rel = abs(gflat[j] - numeric) / max(abs(numeric), 1e-8)
                n_checked += 1
                if rel > max_rel:
                    max_rel = rel
                    worst = f"{kind}[{li}][{j}]"
    return GradCheckResult(max_rel, n_checked, n_kinks, worst)


# ---------------------------------------------------------------------------
# config file and array blob I/O


def write_net_config(config: NetConfig, path) -> None:
    """Plain-text layer list, one directive per line."""
    lines = ["# network config",
             f"input {config.input_shape[0]} {config.input_shape[1]} {config.input_shape[2]}"]
    for spec in config.layers:
        if spec.kind == "conv":
            fh, fw = spec.filter_size
            lines.append(f"conv {fh} {fw} {spec.stride} {spec.out_channels}")
        elif spec.kind == "pool":
            fh, fw = spec.filter_size
            lines.append(f"pool {fh} {fw} {spec.stride}")
        else:
            lines.append(f"fc {spec.out_dim}")
    lines.append(f"conv_bias {int(config.conv_bias)}")
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def read_net_config(path) -> NetConfig:
    input_shape = None
    layers: list[LayerSpec] = []
    conv_bias = True
    with open(path) as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tok = line.split()
            try:
                if tok[0] == "input" and len(tok) == 4:
                    input_shape = (int(tok[1]), int(tok[2]), int(tok[3]))
                elif tok[0] == "conv" and len(tok) == 5:
                    layers.append(conv(int(tok[1]), int(tok[2]), int(tok[3]), int(tok[4])))
                elif tok[0] == "pool" and len(tok) == 4:
                    layers.append(pool(int(tok[1]), int(tok[2]), int(tok[3])))
                elif tok[0] == "fc" and len(tok) == 2:
                    layers.append(fc(int(tok[1])))
                elif tok[0] == "conv_bias" and len(tok) == 2:
                    conv_bias = bool(int(tok[1]))
                else:
                    raise ConfigError(f"{path}:{lineno}: bad directive {line!r}")
            except ValueError as e:
                if isinstance(e, ConfigError):
                    raise
                raise ConfigError(f"{path}:{lineno}: bad directive {line!r}") from e
    if input_shape is None:
        raise ConfigError(f"{path}: missing input directive")
    return NetConfig(input_shape, tuple(layers), conv_bias)


_BLOB_MAGIC = b"RHTENSRB"


def write_blob(path, meta: dict, tensors: dict) -> None:
    """Flat binary of float64 arrays with a JSON shape manifest header.

    Layout: 8-byte magic, uint32 little-endian header length, the UTF-8
    JSON header, then each tensor's raveled float64 little-endian bytes
    in header order. Tensor names are written sorted so identical inputs
    produce identical bytes.
    """
    names = sorted(tensors)
    header = json.dumps(
        {"version": 1, "meta": meta,
         "tensors": [{"name": k, "shape": list(tensors[k].shape)} for k in names]},
        sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(_BLOB_MAGIC)
        f.write(np.uint32(len(header)).astype("<u4").tobytes())
        f.write(header)
        for k in names:
            f.write(np.ascontiguousarray(tensors[k], dtype="<f8").tobytes())


def read_blob(path):
    with open(path, "rb") as f:
        if f.read(8) != _BLOB_MAGIC:
            raise ValueError(f"{path}: not a tensor blob")
        hlen = int(np.frombuffer(f.read(4), dtype="<u4")[0])
        header = json.loads(f.read(hlen).decode())
        tensors = {}
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(count * 8), dtype="<f8")
            if data.size != count:
                raise ValueError(f"{path}: truncated tensor {entry['name']}")
            tensors[entry["name"]] = data.reshape(shape).copy()
        if f.read(1):
            raise ValueError(f"{path}: trailing bytes after last tensor")
    return header["meta"], tensors
