"""Synthetic multi-camera identity dataset, desk scale.

Each identity is a colored-blob template over a fixed body-shaped mask
(head, torso, legs get independent random colors). Each camera view
applies a fixed brightness/color-cast/translation transform, and each
image adds per-pixel gaussian noise. With identity-separation well above
noise the instances are learnable by a tiny net; with noise and
view-shift at zero, all images of an identity within a view are
identical and cross-view matching is trivial by construction.

Also owns the manifest format: CSV with header image-path,identity-id,
camera-id, paths relative to the manifest's directory.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image


@dataclass(frozen=True)
class SynthConfig:
    num_identities: int = 30
    images_per_view: int = 4
    views: int = 2
    image_size: tuple[int, int, int] = (32, 16, 3)
    identity_separation: float = 0.9
    view_shift: float = 0.25
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.num_identities < 1 or self.images_per_view < 1:
            raise ValueError("need >= 1 identity and >= 1 image per view")
        if self.views < 2:
            raise ValueError("need >= 2 camera views")
        h, w, c = self.image_size
        if h < 8 or w < 4 or c not in (1, 3):
            raise ValueError(f"unsupported image size {self.image_size}")
        if not (0 < self.identity_separation <= 1) or self.noise < 0:
            raise ValueError("identity_separation in (0,1], noise >= 0")


def body_part_map(h: int, w: int) -> np.ndarray:
    """(h, w) int map: 0 background, 1 head, 2 torso, 3 legs."""
    part = np.zeros((h, w), dtype=np.int64)
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    cy, cx = 0.12 * h, 0.5 * w
    head = ((rows - cy) / (0.08 * h + 1)) ** 2 + ((cols - cx) / (0.18 * w + 1)) ** 2 <= 1.0
    torso = (rows >= 0.20 * h) & (rows < 0.58 * h) & \
        (np.abs(cols - cx) <= 0.32 * w)
    left = (rows >= 0.58 * h) & (rows < 0.96 * h) & \
        (cols >= cx - 0.30 * w) & (cols < cx - 0.04 * w)
    right = (rows >= 0.58 * h) & (rows < 0.96 * h) & \
        (cols > cx + 0.04 * w) & (cols <= cx + 0.30 * w)
    part[torso] = 2
    part[left | right] = 3
    part[head] = 1
    return part


def _shift_clamped(img: np.ndarray, dy: int, dx: int) -> np.ndarray:
    """Translate content by (dy, dx), repeating edge pixels."""
    h, w = img.shape[:2]
    rows = np.clip(np.arange(h) - dy, 0, h - 1)
    cols = np.clip(np.arange(w) - dx, 0, w - 1)
    return img[rows][:, cols]


def render_dataset(config: SynthConfig):
    """Returns (images uint8 (n,H,W,C), identity_ids, camera_ids),
    ordered by (identity, camera, copy). Deterministic from the seed.
    """
    h, w, c = config.image_size
    rng = np.random.default_rng(config.seed)
    part = body_part_map(h, w)

    sep = config.identity_separation
    # part colors per identity, spread around mid-gray by separation
    templates = np.empty((config.num_identities, 4, c))
    for i in range(config.num_identities):
        colors = 0.5 + sep * (rng.random((3, c)) - 0.5)
        templates[i, 0] = 0.45          # background
        templates[i, 1:] = colors

    vs = config.view_shift
    view_brightness = 1.0 + vs * rng.uniform(-0.5, 0.5, size=config.views)
    view_cast = vs * rng.uniform(-0.2, 0.2, size=(config.views, c))
    view_dy = np.round(vs * h * rng.uniform(-0.15, 0.15, size=config.views)).astype(int)
    view_dx = np.round(vs * w * rng.uniform(-0.15, 0.15, size=config.views)).astype(int)

    images, ids, cams = [], [], []
    for i in range(config.num_identities):
        base = templates[i][part]       # (h, w, c)
        for v in range(config.views):
            viewed = base * view_brightness[v] + view_cast[v]
            viewed = _shift_clamped(viewed, view_dy[v], view_dx[v])
            for _ in range(config.images_per_view):
                # draw even at noise 0 to keep the stream position fixed
                jitter = rng.standard_normal((h, w, c))
                img = np.clip(viewed + config.noise * jitter, 0.0, 1.0)
                images.append(np.round(img * 255.0).astype(np.uint8))
                ids.append(i)
                cams.append(v)
    return (np.stack(images), np.array(ids, dtype=np.int64),
            np.array(cams, dtype=np.int64))


def identity_templates(config: SynthConfig) -> np.ndarray:
    """Noise-free view-0-style base images, one per identity (for the
    nearest-template sanity oracle in tests)."""
    h, w, c = config.image_size
    rng = np.random.default_rng(config.seed)
    part = body_part_map(h, w)
    out = np.empty((config.num_identities, h, w, c))
    for i in range(config.num_identities):
        colors = 0.5 + config.identity_separation * (rng.random((3, c)) - 0.5)
        tmpl = np.empty((4, c))
        tmpl[0] = 0.45
        tmpl[1:] = colors
        out[i] = tmpl[part]
    return out


# ---------------------------------------------------------------------------
# manifest files


def write_manifest(path, rows) -> None:
    """rows: iterable of (image-path, identity-id, camera-id)."""
    with open(path, "w", newline="") as f:
        wtr = csv.writer(f)
        wtr.writerow(["image-path", "identity-id", "camera-id"])
        for rel, ident, cam in rows:
            wtr.writerow([rel, int(ident), int(cam)])


def read_manifest(path):
    """Returns rows as (relative-path, identity-id, camera-id) tuples."""
    rows = []
    with open(path, newline="") as f:
        rdr = csv.reader(f)
        header = next(rdr, None)
        if header != ["image-path", "identity-id", "camera-id"]:
            raise ValueError(f"{path}: bad manifest header {header}")
        for lineno, row in enumerate(rdr, 2):
            if not row:
                continue
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 columns")
            rows.append((row[0], int(row[1]), int(row[2])))
    return rows


def load_images(manifest_path, rows=None) -> np.ndarray:
    """Decode every manifest row's image; returns (n, H, W, C) uint8."""
    base = os.path.dirname(os.path.abspath(manifest_path))
    if rows is None:
        rows = read_manifest(manifest_path)
    images = []
    for rel, _, _ in rows:
        with Image.open(os.path.join(base, rel)) as im:
            arr = np.asarray(im)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        images.append(arr)
    out = np.stack(images)
    if out.dtype != np.uint8:
        raise ValueError(f"{manifest_path}: images must be 8-bit")
    return out


def generate(config: SynthConfig, out_dir) -> str:
    """Write images/ and manifest.csv under out_dir; returns manifest path."""
    images, ids, cams = render_dataset(config)
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    counters: dict[tuple, int] = {}
    rows = []
    mode = "RGB" if config.image_size[2] == 3 else "L"
    for img, ident, cam in zip(images, ids, cams):
        k = counters.get((ident, cam), 0)
        counters[(ident, cam)] = k + 1
        rel = os.path.join("images", f"id{ident:04d}_cam{cam}_img{k}.png")
        arr = img if mode == "RGB" else img[:, :, 0]
        Image.fromarray(arr, mode).save(os.path.join(out_dir, rel))
        rows.append((rel, int(ident), int(cam)))
    manifest = os.path.join(out_dir, "manifest.csv")
    write_manifest(manifest, rows)
    return manifest


def split_rows(rows, counts, seed: int):
    """Partition manifest rows into identity-disjoint groups.

    counts is (train, val, test) identity counts; their sum must not
    exceed the number of distinct identities.
    """
    idents = sorted({ident for _, ident, _ in rows})
    if sum(counts) > len(idents):
        raise ValueError(
            f"split counts {tuple(counts)} exceed {len(idents)} identities")
    order = np.random.default_rng(seed).permutation(len(idents))
    shuffled = [idents[i] for i in order]
    groups, start = [], 0
    for cnt in counts:
        chosen = set(shuffled[start:start + cnt])
        groups.append([r for r in rows if r[1] in chosen])
        start += cnt
    return groups


def split(manifest_path, counts, seed: int):
    """Write train/val/test manifests next to the source manifest."""
    rows = read_manifest(manifest_path)
    base = os.path.dirname(os.path.abspath(manifest_path))
    paths = []
    for name, group in zip(("train", "val", "test"),
                           split_rows(rows, counts, seed)):
        p = os.path.join(base, f"{name}.csv")
        write_manifest(p, group)
        paths.append(p)
    return paths
