import time

import numpy as np
import pytest

from naive_ref import naive_hamming, naive_rank
from reidhash import codebank as cb
from reidhash import hashhead as hh


def test_hamming_basics():
    a = hh.pack_bits(np.array([1, 0, 1, 0]))
    b = hh.pack_bits(np.array([1, 0, 0, 0]))
    assert cb.hamming(a, a) == 0
    assert cb.hamming(a, b) == 1
    ones = hh.pack_bits(np.ones(48, dtype=np.uint8))
    zeros = hh.pack_bits(np.zeros(48, dtype=np.uint8))
    assert cb.hamming(ones, zeros) == 48


def test_hamming_word_count_mismatch():
    with pytest.raises(ValueError):
        cb.hamming(np.zeros(1, dtype=np.uint64), np.zeros(2, dtype=np.uint64))


def test_hamming_exhaustive_r8_vs_naive():
    all_bits = np.array([[(v >> i) & 1 for i in range(8)] for v in range(256)],
                        dtype=np.uint8)
    packed = hh.pack_bits(all_bits)
    d = np.bitwise_count(packed[:, None, :] ^ packed[None, :, :]).sum(-1)
    for i in range(256):
        for j in range(256):
            assert d[i, j] == naive_hamming(all_bits[i], all_bits[j])


def test_hamming_metric_axioms_r8():
    all_bits = np.array([[(v >> i) & 1 for i in range(8)] for v in range(256)],
                        dtype=np.uint8)
    packed = hh.pack_bits(all_bits)
    d = np.bitwise_count(packed[:, None, :] ^ packed[None, :, :]).sum(-1)
    d = d.astype(np.int16)
    assert np.array_equal(d, d.T)                       # symmetry
    assert np.all(np.diag(d) == 0)
    assert np.all((d == 0) == np.eye(256, dtype=bool))  # identity of indiscernibles
    via = (d[:, :, None] + d[None, :, :]).min(axis=1)   # min_k d(i,k)+d(k,j)
    assert np.all(d <= via)                             # triangle inequality


def _random_bank(rng, n=60, r=8):
    bits = (rng.random((n, r)) > 0.5).astype(np.uint8)
    codes = hh.pack_bits(bits)
    idents = rng.integers(0, 10, n)
    cams = rng.integers(0, 3, n)
    return bits, cb.CodeBank(r, codes, idents, cams)


def test_rank_matches_naive_oracle(rng):
    for _ in range(20):
        bits, bank = _random_bank(rng)
        qbits = (rng.random(8) > 0.5).astype(np.uint8)
        qcode = hh.pack_bits(qbits)
        q_ident, q_cam = int(rng.integers(0, 10)), int(rng.integers(0, 3))
        got = bank.rank(qcode, q_ident, q_cam)
        want = naive_rank(bits, bank.identity_ids, bank.camera_ids,
                          bank.image_ids, qbits, q_ident, q_cam)
        assert list(got) == want


def test_rank_removes_junk_and_own_id(rng):
    bits = np.zeros((4, 8), dtype=np.uint8)
    bank = cb.CodeBank(8, hh.pack_bits(bits),
                       identity_ids=[5, 5, 5, 6],
                       camera_ids=[0, 1, 0, 0])
    ranked = bank.rank(hh.pack_bits(bits[0]), identity_id=5, camera_id=0)
    # records 0 and 2 are junk (identity 5, camera 0)
    assert set(ranked.image_ids.tolist()) == {1, 3}
    ranked2 = bank.rank(hh.pack_bits(bits[0]), 5, 0, image_id=1)
    assert set(ranked2.image_ids.tolist()) == {3}


def test_rank_single_identical_record():
    code = hh.pack_bits(np.array([1, 0, 1, 1, 0, 0, 1, 0]))
    bank = cb.CodeBank(8, code.reshape(1, -1), [3], [1])
    ranked = bank.rank(code, identity_id=3, camera_id=0)
    assert list(ranked) == [(0, 0)]


def test_rank_distance_ties_break_by_image_id(rng):
    bits = np.zeros((5, 8), dtype=np.uint8)   # all identical -> all distance 0
    bank = cb.CodeBank(8, hh.pack_bits(bits), [1, 2, 3, 4, 5], [0] * 5)
    ranked = bank.rank(hh.pack_bits(bits[0]), identity_id=99, camera_id=0)
    assert ranked.image_ids.tolist() == [0, 1, 2, 3, 4]


def test_rank_distances_nondecreasing(rng):
    _, bank = _random_bank(rng, n=40)
    q = hh.pack_bits((rng.random(8) > 0.5).astype(np.uint8))
    ranked = bank.rank(q, 0, 0)
    assert np.all(np.diff(ranked.distances) >= 0)


def test_radius_search_planted_distances():
    base = np.zeros(8, dtype=np.uint8)
    rows = []
    for flips in (1, 2, 3):
        b = base.copy()
        b[:flips] = 1
        rows.append(b)
    bank = cb.CodeBank(8, hh.pack_bits(np.array(rows)), [1, 2, 3], [0, 0, 0])
    got = bank.radius_search(hh.pack_bits(base), 99, 9, radius=2)
    assert got == {0, 1}
    assert bank.radius_search(hh.pack_bits(base), 99, 9, radius=0) == set()
    assert bank.radius_search(hh.pack_bits(base), 99, 9, radius=8) == {0, 1, 2}


def test_radius_search_equals_filtered_rank(rng):
    for _ in range(10):
        _, bank = _random_bank(rng, n=50)
        q = hh.pack_bits((rng.random(8) > 0.5).astype(np.uint8))
        ident, cam = int(rng.integers(0, 10)), int(rng.integers(0, 3))
        ranked = bank.rank(q, ident, cam)
        for radius in (0, 1, 2, 4):
            want = {int(i) for i, d in ranked if d <= radius}
            assert bank.radius_search(q, ident, cam, radius) == want


def test_query_width_checked(rng):
    _, bank = _random_bank(rng)
    with pytest.raises(ValueError, match="words"):
        bank.rank(np.zeros(2, dtype=np.uint64), 0, 0)


def test_bank_construction_validation(rng):
    codes = hh.pack_bits((rng.random((3, 8)) > 0.5).astype(np.uint8))
    with pytest.raises(ValueError):
        cb.CodeBank(8, codes, [1, 2], [0, 0, 0])
    with pytest.raises(ValueError):
        cb.CodeBank(200, codes, [1, 2, 3], [0, 0, 0])   # wrong word count


def test_gallery_file_round_trip_bank(tmp_path, rng):
    bits = (rng.random((12, 48) ) > 0.5).astype(np.uint8)
    codes = hh.pack_bits(bits)
    hh.write_gallery(tmp_path / "g.bin", 48, codes,
                     rng.integers(0, 4, 12), rng.integers(0, 2, 12))
    bank = cb.CodeBank.from_gallery_file(tmp_path / "g.bin")
    assert bank.r == 48
    assert len(bank) == 12
    assert bank.image_ids.tolist() == list(range(12))
    assert np.array_equal(bank.codes, codes)


def test_packed_path_much_faster_than_naive(rng):
    # regression guard: vectorized popcount vs the per-bit reference
    n, r = 100_000, 128
    bits = (rng.random((n, r)) > 0.5).astype(np.uint8)
    codes = hh.pack_bits(bits)
    bank = cb.CodeBank(r, codes, np.zeros(n), np.ones(n))
    qbits = (rng.random(r) > 0.5).astype(np.uint8)
    q = hh.pack_bits(qbits)

    t0 = time.perf_counter()
    fast = cb.hamming_to_bank(q, bank.codes)
    t_fast = time.perf_counter() - t0

    sample = slice(0, 2000)   # time the reference on a slice, then scale
    t0 = time.perf_counter()
    slow = [naive_hamming(qbits, b) for b in bits[sample]]
    t_slow = (time.perf_counter() - t0) * (n / 2000)

    assert fast[sample].tolist() == slow
    assert t_slow > 10 * t_fast, f"packed {t_fast:.4f}s vs naive ~{t_slow:.4f}s"
