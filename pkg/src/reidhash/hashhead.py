"""Sigmoid hash layer: features -> soft embedding -> packed binary code.

Each bit i is sigmoid(w_i . [g1; g2] + b_i) over the concatenated
activations of the last two fc layers, so the penultimate features feed
the code directly instead of only through the final layer. Setting
g1_dim to 0 drops that bypass and hashes g2 alone (the ablation used to
measure what the bypass buys).

Quantization thresholds at 0.5: bit = 1 iff embedding > 0.5, ties to 0.
Packed codes are little-endian uint64 words, bit j of the code at word
j // 64, position j % 64; trailing pad bits are zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensornet import ConfigError


@dataclass
class HashParams:
    weights: np.ndarray   # (bits, g1_dim + g2_dim)
    bias: np.ndarray      # (bits,)
    g1_dim: int           # 0 disables the bypass input
    g2_dim: int

    @property
    def bits(self) -> int:
        return self.weights.shape[0]

    def copy(self) -> "HashParams":
        return HashParams(self.weights.copy(), self.bias.copy(),
                          self.g1_dim, self.g2_dim)


# At plain Glorot scale every pre-activation sits near zero, so all codes
# collapse onto the 0.5... fixed point and the first epochs are spent just
# drifting apart.  Widening the init pushes initial codes off that fixed
# point, which keeps nearby negatives inside the margin from the start.
INIT_SPREAD = 2.5


def init_hash_params(bits: int, g1_dim: int, g2_dim: int, seed: int,
                     spread: float = INIT_SPREAD) -> HashParams:
    if bits < 1:
        raise ConfigError(f"bits must be >= 1, got {bits}")
    if g1_dim < 0 or g2_dim < 1:
        raise ConfigError(f"bad head dims g1={g1_dim} g2={g2_dim}")
    rng = np.random.default_rng(seed)
    din = g1_dim + g2_dim
    a = spread * np.sqrt(6.0 / (din + bits))
    w = rng.uniform(-a, a, size=(bits, din))
    return HashParams(w, np.zeros(bits), g1_dim, g2_dim)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _gather_features(params: HashParams, g1, g2) -> np.ndarray:
    g2 = np.asarray(g2, dtype=np.float64)
    if g2.shape[-1] != params.g2_dim:
        raise ConfigError(f"g2 has dim {g2.shape[-1]}, head expects {params.g2_dim}")
    if params.g1_dim == 0:
        return g2
    if g1 is None:
        raise ConfigError("head expects g1 features but got None")
    g1 = np.asarray(g1, dtype=np.float64)
    if g1.shape[-1] != params.g1_dim:
        raise ConfigError(f"g1 has dim {g1.shape[-1]}, head expects {params.g1_dim}")
    return np.concatenate([g1, g2], axis=-1)


def embed(params: HashParams, g1, g2) -> np.ndarray:
    """Soft code in (0, 1)^bits; batched if g1/g2 are batched.

    With g1_dim == 0 the g1 argument is ignored (may be None).
    """
    feats = _gather_features(params, g1, g2)
    return _sigmoid(feats @ params.weights.T + params.bias)


def embed_backward(params: HashParams, g1, g2, grad_embedding: np.ndarray,
                   embedding: np.ndarray | None = None):
    """Gradients of a loss through embed().

    Returns (grad_weights, grad_bias, grad_g1, grad_g2). grad_g1 is None
    when the bypass is disabled and g1 was None. Pass the forward result
    as `embedding` to skip recomputing it.
    """
    feats = _gather_features(params, g1, g2)
    e = embed(params, g1, g2) if embedding is None else embedding
    dz = np.asarray(grad_embedding) * e * (1.0 - e)
    single = dz.ndim == 1
    dz2 = dz[None] if single else dz
    f2 = feats[None] if single else feats
    gw = dz2.T @ f2
    gb = dz2.sum(axis=0)
    gf = dz2 @ params.weights
    if single:
        gf = gf[0]
    if params.g1_dim == 0:
        gg1 = None if g1 is None else np.zeros_like(np.asarray(g1, dtype=np.float64))
        return gw, gb, gg1, gf
    return gw, gb, gf[..., :params.g1_dim], gf[..., params.g1_dim:]


# ---------------------------------------------------------------------------
# bit packing


def words_per_code(bits: int) -> int:
    return (bits + 63) // 64


def pack_bits(bits_arr: np.ndarray) -> np.ndarray:
    """(…, r) 0/1 array -> (…, ceil(r/64)) uint64, bit j at word j//64."""
    b = np.asarray(bits_arr, dtype=np.uint8)
    r = b.shape[-1]
    nw = words_per_code(r)
    packed = np.packbits(b, axis=-1, bitorder="little")
    pad = nw * 8 - packed.shape[-1]
    if pad:
        packed = np.concatenate(
            [packed, np.zeros(packed.shape[:-1] + (pad,), dtype=np.uint8)], axis=-1)
    return packed.view("<u8").astype(np.uint64)


def unpack_bits(words: np.ndarray, r: int) -> np.ndarray:
    w = np.asarray(words, dtype=np.uint64)
    as_bytes = w.astype("<u8").view(np.uint8)
    bits = np.unpackbits(as_bytes, axis=-1, bitorder="little")
    return bits[..., :r]


def quantize(embedding: np.ndarray) -> np.ndarray:
    """Threshold a soft embedding at 0.5 and pack; ties (exactly 0.5) -> 0."""
    return pack_bits(np.asarray(embedding) > 0.5)


# ---------------------------------------------------------------------------
# gallery code file

_GALLERY_MAGIC = b"RHGALL01"


def write_gallery(path, r: int, codes: np.ndarray, identity_ids, camera_ids) -> None:
    """Binary gallery: magic, uint32 bit width, uint64 record count, then
    per record the packed code (ceil(r/8) bytes, little-endian bit order)
    followed by identity-id and camera-id as int32 little-endian.

    Records are written in input order; a record's position (0-based) is
    its image-id for ranking and evaluation purposes.
    """
    codes = np.asarray(codes, dtype=np.uint64)
    ids = np.asarray(identity_ids, dtype="<i4")
    cams = np.asarray(camera_ids, dtype="<i4")
    n = codes.shape[0]
    if not (len(ids) == len(cams) == n):
        raise ValueError("codes, identity_ids, camera_ids must have equal length")
    nbytes = (r + 7) // 8
    width = codes.shape[1] * 8 if codes.ndim == 2 else 0
    code_bytes = codes.astype("<u8").view(np.uint8).reshape(n, width)[:, :nbytes]
    with open(path, "wb") as f:
        f.write(_GALLERY_MAGIC)
        f.write(np.uint32(r).astype("<u4").tobytes())
        f.write(np.uint64(n).astype("<u8").tobytes())
        for i in range(n):
            f.write(code_bytes[i].tobytes())
            f.write(ids[i].tobytes())
            f.write(cams[i].tobytes())


def read_gallery(path):
    """Returns (r, codes (n, words) uint64, identity_ids, camera_ids)."""
    with open(path, "rb") as f:
        if f.read(8) != _GALLERY_MAGIC:
            raise ValueError(f"{path}: not a gallery file")
        r = int(np.frombuffer(f.read(4), dtype="<u4")[0])
        n = int(np.frombuffer(f.read(8), dtype="<u8")[0])
        nbytes = (r + 7) // 8
        rec = nbytes + 8
        data = f.read(n * rec)
        if len(data) != n * rec or f.read(1):
            raise ValueError(f"{path}: record section has wrong length")
    raw = np.frombuffer(data, dtype=np.uint8).reshape(n, rec)
    nw = words_per_code(r)
    padded = np.zeros((n, nw * 8), dtype=np.uint8)
    padded[:, :nbytes] = raw[:, :nbytes]
    codes = padded.view("<u8").astype(np.uint64)
    ids = raw[:, nbytes:nbytes + 4].copy().view("<i4").ravel().astype(np.int64)
    cams = raw[:, nbytes + 4:].copy().view("<i4").ravel().astype(np.int64)
    return r, codes, ids, cams
