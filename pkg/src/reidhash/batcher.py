"""Mini-batch construction and active hard-negative mining.

The dataset is split into a query view and a gallery view (disjoint
camera sets). Positive pairs are exhaustive same-identity cross-view
combinations. Negatives always come from the gallery view.

Mining uses a descriptor per image (raw downsampled pixels initially,
optionally refreshed to the model's current embeddings every few
epochs). The default "semi-hard" rule admits a cross-identity candidate
n for anchor a with positive p iff ||s_a - s_p||^2 < ||s_a - s_n||^2,
then keeps the K closest admissible candidates; when nothing is
admissible it falls back to the K nearest cross-identity images and
flags the fallback. The "nearest" rule skips the predicate entirely.

Structured batches contain whole identities: every positive pair of each
sampled identity plus K mined negatives per side, bounded by the unique
image slot count. Pair and triplet batches exist for the baseline
losses and keep negatives in 1:1 ratio with positives.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import synthgen
from .losses import StructuredPair


@dataclass
class MiningConfig:
    batch_size: int = 128
    negatives_per_side: int = 2      # K
    refresh_interval: int = 50       # epochs between descriptor refreshes
    descriptor_source: str = "raw-pixels"   # or "current-embedding"
    mining_rule: str = "semi-hard"          # or "nearest"

    def __post_init__(self):
        if self.batch_size < 2 * (1 + self.negatives_per_side):
            raise ValueError(
                f"batch_size {self.batch_size} < 2*(1+K) with K="
                f"{self.negatives_per_side}")
        if self.negatives_per_side < 1 or self.refresh_interval < 1:
            raise ValueError("negatives_per_side and refresh_interval must be >= 1")
        if self.descriptor_source not in ("raw-pixels", "current-embedding"):
            raise ValueError(f"unknown descriptor_source {self.descriptor_source!r}")
        if self.mining_rule not in ("semi-hard", "nearest"):
            raise ValueError(f"unknown mining_rule {self.mining_rule!r}")


@dataclass
class DatasetIndex:
    image_ids: np.ndarray
    identity_ids: np.ndarray
    camera_ids: np.ndarray
    descriptors: np.ndarray          # (n, d)
    query_cams: frozenset
    gallery_cams: frozenset
    images: np.ndarray | None = None  # (n, H, W, C) uint8

    def __post_init__(self):
        n = len(self.image_ids)
        if not (len(self.identity_ids) == len(self.camera_ids) == n
                and self.descriptors.shape[0] == n):
            raise ValueError("index arrays must have equal length")
        if self.descriptors.ndim != 2:
            raise ValueError("descriptors must be a 2-D array")
        if self.query_cams & self.gallery_cams:
            raise ValueError("query and gallery camera sets overlap")
        self._row_of = {int(i): r for r, i in enumerate(self.image_ids)}
        if len(self._row_of) != n:
            raise ValueError("duplicate image ids")

    def __len__(self):
        return len(self.image_ids)

    def row(self, image_id: int) -> int:
        return self._row_of[int(image_id)]

    def gallery_rows(self) -> np.ndarray:
        return np.flatnonzero(np.isin(self.camera_ids, sorted(self.gallery_cams)))

    def query_rows(self) -> np.ndarray:
        return np.flatnonzero(np.isin(self.camera_ids, sorted(self.query_cams)))


def pixel_descriptors(images: np.ndarray, size=(8, 4)) -> np.ndarray:
    """Raw downsampled pixels as mining descriptors, values in [0, 1]."""
    n, h, w = images.shape[:3]
    rows = np.linspace(0, h - 1, size[0]).round().astype(int)
    cols = np.linspace(0, w - 1, size[1]).round().astype(int)
    sub = images[:, rows][:, :, cols]
    return sub.reshape(n, -1).astype(np.float64) / 255.0


def make_index(images, identity_ids, camera_ids, query_cams=None,
               descriptor_size=(8, 4), image_ids=None) -> DatasetIndex:
    """Index in-memory images; by default the lowest camera id is the
    query view and every other camera is gallery."""
    identity_ids = np.asarray(identity_ids, dtype=np.int64)
    camera_ids = np.asarray(camera_ids, dtype=np.int64)
    all_cams = set(np.unique(camera_ids).tolist())
    if len(all_cams) < 2:
        raise ValueError("need >= 2 cameras for cross-view pairing")
    if query_cams is None:
        query_cams = {min(all_cams)}
    query_cams = frozenset(int(c) for c in query_cams)
    gallery = frozenset(all_cams - query_cams)
    if image_ids is None:
        image_ids = np.arange(len(identity_ids))
    return DatasetIndex(
        image_ids=np.asarray(image_ids, dtype=np.int64),
        identity_ids=identity_ids,
        camera_ids=camera_ids,
        descriptors=pixel_descriptors(images, descriptor_size),
        query_cams=query_cams,
        gallery_cams=gallery,
        images=images,
    )


def load_index(manifest_path, query_cams=None, descriptor_size=(8, 4)) -> DatasetIndex:
    """Build an index from a manifest CSV; image-ids are row ordinals."""
    rows = synthgen.read_manifest(manifest_path)
    if not rows:
        raise ValueError(f"{manifest_path}: empty manifest")
    images = synthgen.load_images(manifest_path, rows)
    ids = [r[1] for r in rows]
    cams = [r[2] for r in rows]
    return make_index(images, ids, cams, query_cams, descriptor_size)


# ---------------------------------------------------------------------------
# positive pairs and mining


def positive_pairs(index: DatasetIndex) -> np.ndarray:
    """All same-identity (query-view image, gallery-view image) id pairs.

    Identities missing from either view contribute nothing and trigger a
    warning. Order: identity ascending, then query id, then gallery id.
    """
    out = []
    q_rows = set(index.query_rows().tolist())
    g_rows = set(index.gallery_rows().tolist())
    for ident in np.unique(index.identity_ids):
        rows = np.flatnonzero(index.identity_ids == ident)
        q = sorted(int(index.image_ids[r]) for r in rows if r in q_rows)
        g = sorted(int(index.image_ids[r]) for r in rows if r in g_rows)
        if not q or not g:
            warnings.warn(f"identity {ident} missing from one view, skipped")
            continue
        out.extend((qi, gi) for qi in q for gi in g)
    return np.array(out, dtype=np.int64).reshape(-1, 2)


@dataclass
class MinedNegatives:
    query_side: np.ndarray       # gallery image ids scored against x
    match_side: np.ndarray       # gallery image ids scored against y
    query_fallback: bool = False
    match_fallback: bool = False


def _sqdist(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    d = b - a[None, :]
    return (d * d).sum(axis=1)


def mine_hard_negatives(index: DatasetIndex, pair, k: int,
                        rule: str = "semi-hard") -> MinedNegatives:
    """Mine K gallery-view cross-identity negatives for each pair side."""
    if rule not in ("semi-hard", "nearest"):
        raise ValueError(f"unknown mining rule {rule!r}")
    qid, gid = int(pair[0]), int(pair[1])
    xr, yr = index.row(qid), index.row(gid)
    ident = index.identity_ids[xr]
    if index.identity_ids[yr] != ident:
        raise ValueError(f"pair ({qid}, {gid}) crosses identities")
    cand = index.gallery_rows()
    cand = cand[index.identity_ids[cand] != ident]
    if cand.size == 0:
        raise ValueError("gallery view has no cross-identity images to mine")
    cand_ids = index.image_ids[cand]
    t = float(_sqdist(index.descriptors[xr], index.descriptors[yr][None, :])[0])

    def side(anchor_row):
        d = _sqdist(index.descriptors[anchor_row], index.descriptors[cand])
        order = np.lexsort((cand_ids, d))
        if rule == "nearest":
            return cand_ids[order[:k]], False
        adm = order[d[order] > t]
        if adm.size == 0:
            return cand_ids[order[:k]], True
        return cand_ids[adm[:k]], False

    qs, qf = side(xr)
    ms, mf = side(yr)
    return MinedNegatives(qs, ms, qf, mf)


# ---------------------------------------------------------------------------
# batch plans


@dataclass
class StructuredBatch:
    image_ids: np.ndarray            # unique slots, first-use order
    pairs: list                      # StructuredPair slot indices
    margin: float = 1.0
    split_identity: bool = False
    fallback_count: int = 0          # mined sides that used the fallback

    def __len__(self):
        return len(self.image_ids)


@dataclass
class PairBatch:
    image_ids: np.ndarray
    pairs: np.ndarray                # (n, 2) slot indices
    labels: np.ndarray               # (n,) 1 = same identity


@dataclass
class TripletBatch:
    image_ids: np.ndarray
    triplets: np.ndarray             # (n, 3) slot indices (anchor, pos, neg)


class _SlotMap:
    def __init__(self):
        self.order: list[int] = []
        self.slot: dict[int, int] = {}

    def get(self, image_id: int) -> int:
        image_id = int(image_id)
        if image_id not in self.slot:
            self.slot[image_id] = len(self.order)
            self.order.append(image_id)
        return self.slot[image_id]

    def would_grow_to(self, image_ids) -> int:
        return len(self.order) + len({int(i) for i in image_ids} - self.slot.keys())


def _grouped_pairs(index: DatasetIndex):
    """Positive pairs grouped by identity, identities in ascending order."""
    pp = positive_pairs(index)
    groups: dict[int, list] = {}
    for qi, gi in pp:
        ident = int(index.identity_ids[index.row(qi)])
        groups.setdefault(ident, []).append((int(qi), int(gi)))
    return groups


def iter_structured_batches(index: DatasetIndex, config: MiningConfig,
                            seed: int, margin: float = 1.0):
    """One epoch of structured batches, whole identities greedily packed.

    The batch bound counts unique image slots (shared negatives dedup).
    An identity whose own pairs exceed the bound is split across batches
    and those batches are flagged.
    """
    groups = _grouped_pairs(index)
    if not groups:
        raise ValueError("no positive pairs in index")
    idents = sorted(groups)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(idents))
    k = config.negatives_per_side

    batches = []
    slots = _SlotMap()
    pairs: list[StructuredPair] = []
    fallbacks = 0
    split_flag = False

    def flush():
        nonlocal slots, pairs, fallbacks, split_flag
        if pairs:
            batches.append(StructuredBatch(
                np.array(slots.order, dtype=np.int64), pairs, margin,
                split_flag, fallbacks))
        slots, pairs, fallbacks, split_flag = _SlotMap(), [], 0, False

    for oi in order:
        ident_pairs = groups[idents[oi]]
        mined = [mine_hard_negatives(index, p, k, config.mining_rule)
                 for p in ident_pairs]
        ident_images: set[int] = set()
        for (qi, gi), m in zip(ident_pairs, mined):
            ident_images |= {qi, gi}
            ident_images |= set(m.query_side.tolist())
            ident_images |= set(m.match_side.tolist())
        if slots.would_grow_to(ident_images) > config.batch_size and pairs:
            flush()
        if slots.would_grow_to(ident_images) > config.batch_size:
            # identity alone exceeds the bound: split its pairs
            for (qi, gi), m in zip(ident_pairs, mined):
                need = {qi, gi} | set(m.query_side.tolist()) | set(m.match_side.tolist())
                if slots.would_grow_to(need) > config.batch_size and pairs:
                    split_flag = True
                    flush()
                    split_flag = True
                pairs.append(StructuredPair(
                    slots.get(qi), slots.get(gi),
                    tuple(slots.get(i) for i in m.query_side),
                    tuple(slots.get(i) for i in m.match_side)))
                fallbacks += int(m.query_fallback) + int(m.match_fallback)
            split_flag = True
        else:
            for (qi, gi), m in zip(ident_pairs, mined):
                pairs.append(StructuredPair(
                    slots.get(qi), slots.get(gi),
                    tuple(slots.get(i) for i in m.query_side),
                    tuple(slots.get(i) for i in m.match_side)))
                fallbacks += int(m.query_fallback) + int(m.match_fallback)
    flush()
    return batches


def build_structured_batch(index: DatasetIndex, config: MiningConfig,
                           seed: int, margin: float = 1.0) -> StructuredBatch:
    """First batch of the epoch plan for `seed`."""
    return iter_structured_batches(index, config, seed, margin)[0]


def _random_gallery_negative(index: DatasetIndex, ident: int,
                             rng) -> int:
    cand = index.gallery_rows()
    cand = cand[index.identity_ids[cand] != ident]
    if cand.size == 0:
        raise ValueError("gallery view has no cross-identity images")
    return int(index.image_ids[cand[rng.integers(cand.size)]])


def iter_pair_batches(index: DatasetIndex, batch_size: int, seed: int):
    """Contrastive batches: all positive pairs plus an equal number of
    random cross-identity negative pairs, packed by unique slot count."""
    groups = _grouped_pairs(index)
    if not groups:
        raise ValueError("no positive pairs in index")
    idents = sorted(groups)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(idents))

    batches = []
    slots = _SlotMap()
    plist: list[tuple[int, int]] = []
    labels: list[int] = []

    def flush():
        nonlocal slots, plist, labels
        if plist:
            batches.append(PairBatch(np.array(slots.order, dtype=np.int64),
                                     np.array(plist, dtype=np.intp),
                                     np.array(labels, dtype=np.int8)))
        slots, plist, labels = _SlotMap(), [], []

    for oi in order:
        ident = idents[oi]
        for qi, gi in groups[ident]:
            neg = _random_gallery_negative(index, ident, rng)
            need = {qi, gi, neg}
            if slots.would_grow_to(need) > batch_size and plist:
                flush()
            plist.append((slots.get(qi), slots.get(gi)))
            labels.append(1)
            plist.append((slots.get(qi), slots.get(neg)))
            labels.append(0)
    flush()
    return batches


def iter_triplet_batches(index: DatasetIndex, batch_size: int, seed: int):
    """Triplet batches: one random gallery negative per positive pair."""
    groups = _grouped_pairs(index)
    if not groups:
        raise ValueError("no positive pairs in index")
    idents = sorted(groups)
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(idents))

    batches = []
    slots = _SlotMap()
    tlist: list[tuple[int, int, int]] = []

    def flush():
        nonlocal slots, tlist
        if tlist:
            batches.append(TripletBatch(np.array(slots.order, dtype=np.int64),
                                        np.array(tlist, dtype=np.intp)))
        slots, tlist = _SlotMap(), []

    for oi in order:
        ident = idents[oi]
        for qi, gi in groups[ident]:
            neg = _random_gallery_negative(index, ident, rng)
            need = {qi, gi, neg}
            if slots.would_grow_to(need) > batch_size and tlist:
                flush()
            tlist.append((slots.get(qi), slots.get(gi), slots.get(neg)))
    flush()
    return batches


# ---------------------------------------------------------------------------
# descriptor refresh and augmentation


def refresh_descriptors(index: DatasetIndex, embed_fn,
                        config: MiningConfig) -> DatasetIndex:
    """Swap descriptors for current model embeddings.

    embed_fn maps an image batch to embeddings. A no-op when the config
    pins descriptors to raw pixels.
    """
    if config.descriptor_source == "raw-pixels":
        return index
    if index.images is None:
        raise ValueError("index has no images to embed")
    desc = np.asarray(embed_fn(index.images), dtype=np.float64)
    return DatasetIndex(index.image_ids, index.identity_ids, index.camera_ids,
                        desc, index.query_cams, index.gallery_cams, index.images)


def sample_offsets(h: int, w: int, count: int, rng) -> np.ndarray:
    """(count, 2) float translation offsets, uniform on
    [-0.05h, 0.05h] x [-0.05w, 0.05w]."""
    dy = rng.uniform(-0.05 * h, 0.05 * h, size=count)
    dx = rng.uniform(-0.05 * w, 0.05 * w, size=count)
    return np.stack([dy, dx], axis=1)


def augment(image: np.ndarray, count: int = 5, rng=None):
    """Translated crops around the center, offsets rounded to pixels and
    out-of-frame regions clamped to the nearest edge pixel."""
    if rng is None:
        rng = np.random.default_rng()
    h, w = image.shape[:2]
    offsets = sample_offsets(h, w, count, rng)
    crops = []
    for dy, dx in np.round(offsets).astype(int):
        rows = np.clip(np.arange(h) - dy, 0, h - 1)
        cols = np.clip(np.arange(w) - dx, 0, w - 1)
        crops.append(image[rows][:, cols])
    return crops
