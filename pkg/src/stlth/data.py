"""Deterministic desk-scale image sources.

Synthetic content images (geometric compositions over smooth backgrounds) and
synthetic style images (procedural textures with per-index color statistics)
are pure functions of (seed, index): each sample runs its own counter-based
random stream, so any image can be regenerated in isolation. Train and test
splits draw from disjoint index ranges — test indices live below
``TRAIN_INDEX_BASE``, train indices at or above it — which makes split
disjointness auditable by construction.

Image-folder ingestion (PPM natively, PNG when Pillow is importable) is
provided for running the models on real images; files are center-cropped,
bilinearly resized, and split into train/test by sorted file list.
"""

import os
import warnings

import numpy as np

TRAIN_INDEX_BASE = 10 ** 6


def _sample_rng(seed, index):
    key = np.array([seed, index], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _coord_grids(size):
    axis = np.linspace(0.0, 1.0, size, dtype=np.float32)
    return np.meshgrid(axis, axis, indexing="ij")


def synth_content(seed, index, size=64):
    """Geometric composition: 3-8 shapes over a smooth gradient background."""
    rng = _sample_rng(np.uint64(seed) ^ np.uint64(0xC0), index)
    yy, xx = _coord_grids(size)
    base = rng.uniform(0.2, 0.8, size=3).astype(np.float32)
    tilt = rng.uniform(-0.5, 0.5, size=(3, 2)).astype(np.float32)
    img = base[:, None, None] + tilt[:, 0, None, None] * xx + tilt[:, 1, None, None] * yy

    for _ in range(int(rng.integers(3, 9))):
        kind = rng.integers(0, 3)
        cy, cx = rng.uniform(0.1, 0.9, size=2)
        hh, hw = rng.uniform(0.05, 0.35, size=2)
        color = rng.uniform(0.0, 1.0, size=3).astype(np.float32)
        alpha = np.float32(rng.uniform(0.6, 1.0))
        if kind == 0:  # rectangle
            mask = (np.abs(yy - cy) < hh) & (np.abs(xx - cx) < hw)
        elif kind == 1:  # ellipse
            mask = ((yy - cy) / hh) ** 2 + ((xx - cx) / hw) ** 2 < 1.0
        else:  # soft radial patch
            d2 = ((yy - cy) / hh) ** 2 + ((xx - cx) / hw) ** 2
            soft = np.exp(-3.0 * d2).astype(np.float32)
            img = img * (1 - alpha * soft) + color[:, None, None] * (alpha * soft)
            continue
        m = mask.astype(np.float32) * alpha
        img = img * (1 - m) + color[:, None, None] * m

    return np.clip(img, 0.0, 1.0).astype(np.float32)


def _box_blur(field, radius):
    if radius < 1:
        return field
    pad = np.pad(field, radius, mode="wrap")
    csum = np.cumsum(np.cumsum(pad, axis=0), axis=1)
    csum = np.pad(csum, ((1, 0), (1, 0)))
    k = 2 * radius + 1
    size = field.shape[0]
    out = (csum[k:k + size, k:k + size] - csum[:size, k:k + size]
           - csum[k:k + size, :size] + csum[:size, :size])
    return out / (k * k)


def synth_style(seed, index, size=64):
    """Procedural texture: stripes, checkers, blurred noise, or palette wash."""
    rng = _sample_rng(np.uint64(seed) ^ np.uint64(0x57), index)
    yy, xx = _coord_grids(size)
    color_a = rng.uniform(0.0, 1.0, size=3).astype(np.float32)
    color_b = rng.uniform(0.0, 1.0, size=3).astype(np.float32)
    family = int(rng.integers(0, 4))

    if family == 0:  # stripes
        theta = rng.uniform(0.0, np.pi)
        freq = rng.uniform(4.0, 24.0)
        phase = rng.uniform(0.0, 2 * np.pi)
        wave = 0.5 + 0.5 * np.sin(freq * (np.cos(theta) * xx + np.sin(theta) * yy)
                                  * 2 * np.pi + phase)
        field = wave.astype(np.float32)
    elif family == 1:  # checkerboard
        cells = int(rng.integers(3, 12))
        field = ((np.floor(yy * cells) + np.floor(xx * cells)) % 2).astype(np.float32)
    elif family == 2:  # blurred noise
        noise = rng.uniform(0.0, 1.0, size=(size, size)).astype(np.float32)
        field = _box_blur(noise, int(rng.integers(1, max(2, size // 16))))
        lo, hi = field.min(), field.max()
        field = (field - lo) / max(hi - lo, 1e-6)
    else:  # smooth palette wash
        noise = rng.uniform(0.0, 1.0, size=(size, size)).astype(np.float32)
        field = _box_blur(noise, max(1, size // 8))
        lo, hi = field.min(), field.max()
        field = (field - lo) / max(hi - lo, 1e-6)

    img = color_a[:, None, None] * field + color_b[:, None, None] * (1.0 - field)
    jitter = rng.normal(0.0, 0.02, size=(3, size, size)).astype(np.float32)
    return np.clip(img + jitter, 0.0, 1.0).astype(np.float32)


class DatasetStream:
    """Cursor-driven batch source over a synthetic or folder-backed dataset."""

    def __init__(self, source="synthetic", split="train", size=64, seed=0, folder=None):
        if split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {split!r}")
        self.source = source
        self.split = split
        self.size = size
        self.seed = seed
        self.cursor = 0
        self._folder = folder
        if source == "folder":
            if folder is None:
                raise ValueError("folder source needs a folder path")
            self._content_files, self._style_files = _split_folder(folder, split, seed)
            self._content_cache = {}
            self._style_cache = {}
        elif source != "synthetic":
            raise ValueError(f"source must be 'synthetic' or 'folder', got {source!r}")

    def _synth_index(self, offset):
        if self.split == "train":
            return TRAIN_INDEX_BASE + self.cursor + offset
        return (self.cursor + offset) % TRAIN_INDEX_BASE

    def _folder_image(self, files, cache, offset):
        while files:
            order_epoch = (self.cursor + offset) // len(files)
            pos = (self.cursor + offset) % len(files)
            order_rng = np.random.Generator(np.random.Philox(
                key=np.array([self.seed, order_epoch], dtype=np.uint64)))
            perm = order_rng.permutation(len(files))
            path = files[perm[pos]]
            if path not in cache:
                try:
                    cache[path] = load_image(path, self.size)
                except (OSError, ValueError) as exc:
                    warnings.warn(f"skipping unreadable image {path}: {exc}")
                    files.remove(path)
                    continue
            return cache[path]
        raise ValueError("image folder has no readable images left")

    def next_batch(self, batch_size):
        """(contents, styles) float32 arrays of shape (B, 3, size, size)."""
        if batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {batch_size}")
        contents = np.empty((batch_size, 3, self.size, self.size), dtype=np.float32)
        styles = np.empty_like(contents)
        for k in range(batch_size):
            if self.source == "synthetic":
                idx = self._synth_index(k)
                contents[k] = synth_content(self.seed, idx, self.size)
                styles[k] = synth_style(self.seed, idx, self.size)
            else:
                contents[k] = self._folder_image(self._content_files, self._content_cache, k)
                styles[k] = self._folder_image(self._style_files, self._style_cache, k)
        self.cursor += batch_size
        return contents, styles

    def state(self):
        return {"cursor": self.cursor}

    def load_state(self, state):
        self.cursor = int(state["cursor"])


def test_pair_indices(seed, n_content=40, n_style=100, n_pairs=200):
    """Deterministic subsample of the content x style evaluation grid."""
    rng = np.random.Generator(np.random.PCG64(seed))
    grid = [(c, s) for c in range(n_content) for s in range(n_style)]
    chosen = rng.choice(len(grid), size=min(n_pairs, len(grid)), replace=False)
    return [grid[i] for i in sorted(chosen)]


def test_pair_images(seed, pairs, size=64):
    """Materialize (content, style) image arrays for the given index pairs."""
    contents = np.stack([synth_content(seed, c, size) for c, _ in pairs])
    styles = np.stack([synth_style(seed, s, size) for _, s in pairs])
    return contents, styles


def _split_folder(folder, split, seed):
    sets = []
    for sub in ("content", "style"):
        root = os.path.join(folder, sub)
        if not os.path.isdir(root):
            raise FileNotFoundError(f"image folder is missing the {sub}/ subdirectory: {root}")
        files = sorted(
            os.path.join(root, f) for f in os.listdir(root)
            if f.lower().endswith((".ppm", ".png"))
        )
        if not files:
            raise ValueError(f"no loadable images (.ppm/.png) in {root}")
        n_test = max(1, len(files) // 10) if len(files) > 1 else 0
        chosen = files[:n_test] if split == "test" else files[n_test:]
        if not chosen:
            raise ValueError(f"the {split} split of {root} is empty "
                             f"({len(files)} files total)")
        sets.append(chosen)
    return sets[0], sets[1]


def load_image_folder(path, size=64, split="train", seed=0):
    """DatasetStream over <path>/content/* and <path>/style/*."""
    return DatasetStream(source="folder", split=split, size=size, seed=seed, folder=path)


def load_image(path, size):
    """One image file -> float32 (3, size, size) in [0,1]; center-crop + resize."""
    if path.lower().endswith(".ppm"):
        arr = _read_ppm(path)
    elif path.lower().endswith(".png"):
        try:
            from PIL import Image
        except ImportError as exc:
            raise ValueError(f"cannot decode {path}: PNG support needs Pillow") from exc
        with Image.open(path) as im:
            arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    else:
        raise ValueError(f"unsupported image format: {path}")

    h, w = arr.shape[:2]
    side = min(h, w)
    top, left = (h - side) // 2, (w - side) // 2
    arr = arr[top:top + side, left:left + side]
    return _resize_bilinear(arr, size).transpose(2, 0, 1).copy()


def _resize_bilinear(arr, size):
    side = arr.shape[0]
    if side == size:
        return arr.astype(np.float32)
    pos = (np.arange(size, dtype=np.float64) + 0.5) * (side / size) - 0.5
    pos = np.clip(pos, 0, side - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, side - 1)
    frac = (pos - lo).astype(np.float32)
    rows = (arr[lo, :, :] * (1 - frac)[:, None, None] + arr[hi, :, :] * frac[:, None, None])
    cols = (rows[:, lo, :] * (1 - frac)[None, :, None] + rows[:, hi, :] * frac[None, :, None])
    return cols.astype(np.float32)


def _read_ppm(path):
    """Binary (P6) or ASCII (P3) PPM -> float32 HxWx3 in [0,1]."""
    with open(path, "rb") as fh:
        data = fh.read()

    tokens = []
    i = 0
    while len(tokens) < 4:
        while i < len(data) and data[i:i + 1].isspace():
            i += 1
        if i < len(data) and data[i:i + 1] == b"#":
            while i < len(data) and data[i:i + 1] != b"\n":
                i += 1
            continue
        start = i
        while i < len(data) and not data[i:i + 1].isspace():
            i += 1
        if start == i:
            raise ValueError(f"truncated PPM header in {path}")
        tokens.append(data[start:i])
    magic, width, height, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval <= 0 or maxval > 255:
        raise ValueError(f"unsupported PPM maxval {maxval} in {path}")

    if magic == b"P6":
        i += 1  # single whitespace byte after maxval
        raw = np.frombuffer(data, dtype=np.uint8, count=width * height * 3, offset=i)
        img = raw.reshape(height, width, 3)
    elif magic == b"P3":
        values = np.array(data[i:].split(), dtype=np.int64)
        if values.size != width * height * 3:
            raise ValueError(f"P3 pixel count mismatch in {path}")
        img = values.reshape(height, width, 3)
    else:
        raise ValueError(f"not a PPM file (magic {magic!r}): {path}")
    return img.astype(np.float32) / float(maxval)


def write_ppm(path, image):
    """float (3,H,W) or (H,W,3) in [0,1] -> binary P6 file."""
    arr = np.asarray(image)
    if arr.ndim != 3:
        raise ValueError(f"write_ppm needs a 3-d image, got shape {arr.shape}")
    if arr.shape[0] == 3 and arr.shape[2] != 3:
        arr = arr.transpose(1, 2, 0)
    pixels = (np.clip(arr, 0.0, 1.0) * 255.0).round().astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{pixels.shape[1]} {pixels.shape[0]}\n255\n".encode())
        fh.write(pixels.tobytes())
