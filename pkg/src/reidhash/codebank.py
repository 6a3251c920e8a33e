"""Hamming-distance ranking over bit-packed gallery codes.

Codes are little-endian uint64 words (see hashhead.pack_bits); distance
is popcount of xor, vectorized over the whole bank. Junk records, same
identity seen by the same camera as the query, are removed before
ranking, as is the query's own record when its image-id is known.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import hashhead


def hamming(a: np.ndarray, b: np.ndarray) -> int:
    """Distance between two packed codes of the same width."""
    a = np.asarray(a, dtype=np.uint64)
    b = np.asarray(b, dtype=np.uint64)
    if a.shape != b.shape:
        raise ValueError(f"code widths differ: {a.shape} vs {b.shape}")
    return int(np.bitwise_count(a ^ b).sum())


def hamming_to_bank(code: np.ndarray, bank: np.ndarray) -> np.ndarray:
    """Distances from one packed code to every row of (n, words) bank."""
    return np.bitwise_count(bank ^ code[None, :]).sum(axis=1).astype(np.int64)


@dataclass
class RankedList:
    """Gallery records in ascending distance order, ties by image-id."""

    image_ids: np.ndarray
    distances: np.ndarray

    def __len__(self):
        return len(self.image_ids)

    def __iter__(self):
        return iter(zip(self.image_ids.tolist(), self.distances.tolist()))


class CodeBank:
    """In-memory gallery of packed codes with identity/camera labels.

    image_ids default to record position, matching the on-disk gallery
    format where a record's ordinal is its id.
    """

    def __init__(self, r: int, codes: np.ndarray, identity_ids, camera_ids,
                 image_ids=None):
        self.r = int(r)
        self.codes = np.asarray(codes, dtype=np.uint64)
        if self.codes.ndim != 2 or self.codes.shape[1] != hashhead.words_per_code(r):
            raise ValueError(
                f"codes must be (n, {hashhead.words_per_code(r)}) for r={r}")
        self.identity_ids = np.asarray(identity_ids, dtype=np.int64)
        self.camera_ids = np.asarray(camera_ids, dtype=np.int64)
        n = len(self.codes)
        if not (len(self.identity_ids) == len(self.camera_ids) == n):
            raise ValueError("label arrays must match code count")
        if image_ids is None:
            image_ids = np.arange(n)
        self.image_ids = np.asarray(image_ids, dtype=np.int64)
        if len(self.image_ids) != n:
            raise ValueError("image_ids must match code count")

    def __len__(self):
        return len(self.codes)

    @classmethod
    def from_gallery_file(cls, path) -> "CodeBank":
        r, codes, ids, cams = hashhead.read_gallery(path)
        return cls(r, codes, ids, cams)

    def _check_query(self, code: np.ndarray) -> np.ndarray:
        code = np.asarray(code, dtype=np.uint64).ravel()
        if code.shape[0] != self.codes.shape[1]:
            raise ValueError(
                f"query code has {code.shape[0]} words, bank has {self.codes.shape[1]}")
        return code

    def _keep_mask(self, identity_id: int, camera_id: int,
                   image_id: int | None) -> np.ndarray:
        junk = (self.identity_ids == identity_id) & (self.camera_ids == camera_id)
        keep = ~junk
        if image_id is not None:
            keep &= self.image_ids != image_id
        return keep

    def rank(self, code: np.ndarray, identity_id: int, camera_id: int,
             image_id: int | None = None) -> RankedList:
        """Rank all non-junk records by distance to `code`.

        identity_id/camera_id describe the query so that junk records
        (same identity, same camera) can be dropped; image_id, when
        given, drops the query's own gallery record as well.
        """
        code = self._check_query(code)
        keep = self._keep_mask(identity_id, camera_id, image_id)
        dists = hamming_to_bank(code, self.codes[keep])
        ids = self.image_ids[keep]
        order = np.lexsort((ids, dists))
        return RankedList(ids[order], dists[order])

    def radius_search(self, code: np.ndarray, identity_id: int, camera_id: int,
                      radius: int, image_id: int | None = None) -> set[int]:
        """Image-ids of non-junk records within `radius` bits of `code`."""
        code = self._check_query(code)
        keep = self._keep_mask(identity_id, camera_id, image_id)
        dists = hamming_to_bank(code, self.codes[keep])
        return set(self.image_ids[keep][dists <= radius].tolist())
