"""Data supply: synthetic in/out image distributions, noise
out-distributions, an IDX reader for user-supplied digit files and seeded
evaluation subsets.

Every generator derives a per-sample RNG from (seed, index), so outputs
are bit-identical across runs and independent of batching or parallelism.
"""

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .seeding import rng_stream


class IdxFormatError(ValueError):
    """Malformed IDX file; message carries the failing byte offset."""


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64, or None for unlabelled sets
    name: str
    split: str = "train"

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        if self.images.ndim != 4:
            raise ValueError("images must be (N, C, H, W)")
        if np.any(self.images < 0) or np.any(self.images > 1):
            raise ValueError("pixel values must lie in [0, 1]")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.images.shape[0],):
                raise ValueError("label count must match image count")

    def __len__(self):
        return self.images.shape[0]


# ---- noise out-distributions ---------------------------------------------------


def smooth_noise(n, shape=(1, 16, 16), seed=0, name="smooth", split="test"):
    """Uniform noise blurred per sample and rescaled to full [0, 1] range.

    The blur width is drawn once per sample (uniform in [1, 2.5] pixels,
    shared across channels); the kernel is truncated at 4 sigma with
    reflection padding.  A degenerate constant sample maps to all zeros.
    """
    if n < 1:
        raise ValueError("need n >= 1")
    c, h, w = shape
    out = np.empty((n, c, h, w), dtype=np.float32)
    for i in range(n):
        rng = rng_stream(seed, "data", i)
        width = rng.uniform(1.0, 2.5)
        u = rng.random((c, h, w))
        blurred = gaussian_filter(u, sigma=(0, width, width), mode="reflect", truncate=4.0)
        lo, hi = blurred.min(), blurred.max()
        if hi - lo < 1e-12:
            out[i] = 0.0
        else:
            out[i] = (blurred - lo) / (hi - lo)
    return Dataset(out, None, name, split)


def uniform_noise(n, shape=(1, 16, 16), seed=0, name="uniform", split="test"):
    """I.i.d. uniform [0, 1] pixels."""
    if n < 1:
        raise ValueError("need n >= 1")
    out = np.empty((n,) + tuple(shape), dtype=np.float32)
    for i in range(n):
        out[i] = rng_stream(seed, "data", i).random(shape)
    return Dataset(out, None, name, split)


# ---- synthetic classification task ----------------------------------------------


@dataclass
class SyntheticSpec:
    num_classes: int = 3
    image_size: int = 16
    channels: int = 1
    n_train_in: int = 2000
    n_test_in: int = 500
    n_train_out: int = 2000
    n_test_out: int = 500
    noise_std: float = 0.03
    freq_halfwidth: float = 0.3  # in-class frequency jitter
    out_gap: float = 2.0         # start of the out-band above the top in-frequency
    out_bandwidth: float = 2.0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need K >= 2")
        if self.image_size < 4:
            raise ValueError("image size too small")

    def class_freq(self, k):
        return 1.5 + float(k)

    def out_band(self):
        top = self.class_freq(self.num_classes - 1) + self.freq_halfwidth
        return top + self.out_gap, top + self.out_gap + self.out_bandwidth

    def check_disjoint(self):
        """Margin between in- and out-frequency bands, by construction."""
        top_in = self.class_freq(self.num_classes - 1) + self.freq_halfwidth
        lo_out, _ = self.out_band()
        margin = lo_out - top_in
        if margin <= 0:
            raise ValueError("in/out frequency bands overlap")
        return margin


def synthetic_task(spec, seed=0):
    """In-distribution: oriented gratings inside a soft blob, one frequency
    band per class.  Out-distribution: gratings from a disjoint higher
    band mixed with flat geometric shapes.

    Returns (in_train, in_test, out_train, out_test).
    """
    spec.check_disjoint()
    in_train = _gen_in(spec, seed, 0, spec.n_train_in, "train")
    in_test = _gen_in(spec, seed, 1_000_000, spec.n_test_in, "test")
    out_train = _gen_out(spec, seed, 2_000_000, spec.n_train_out, "train")
    out_test = _gen_out(spec, seed, 3_000_000, spec.n_test_out, "test")
    return in_train, in_test, out_train, out_test


def _grating_blob(rng, spec, freq):
    s = spec.image_size
    theta = rng.uniform(0, 2 * np.pi)
    phase = rng.uniform(0, 2 * np.pi)
    cy, cx = rng.uniform(0.3 * s, 0.7 * s, size=2)
    sigma_b = rng.uniform(0.15 * s, 0.25 * s)
    r, c = np.mgrid[0:s, 0:s]
    wave = np.sin(2 * np.pi * freq * (r * np.cos(theta) + c * np.sin(theta)) / s + phase)
    envelope = np.exp(-((r - cy) ** 2 + (c - cx) ** 2) / (2 * sigma_b ** 2))
    img = 0.5 + 0.45 * envelope * wave
    img = img + rng.normal(0, spec.noise_std, size=(s, s))
    return np.clip(img, 0.0, 1.0)


def _gen_in(spec, seed, base, n, split):
    s = spec.image_size
    images = np.empty((n, spec.channels, s, s), dtype=np.float32)
    labels = np.empty(n, dtype=np.int64)
    for i in range(n):
        rng = rng_stream(seed, "data", base + i)
        k = int(rng.integers(spec.num_classes))
        freq = spec.class_freq(k) + rng.uniform(-spec.freq_halfwidth, spec.freq_halfwidth)
        img = _grating_blob(rng, spec, freq)
        images[i] = np.broadcast_to(img, (spec.channels, s, s))
        labels[i] = k
    return Dataset(images, labels, "synthetic_in", split)


def _gen_out(spec, seed, base, n, split):
    s = spec.image_size
    lo, hi = spec.out_band()
    images = np.empty((n, spec.channels, s, s), dtype=np.float32)
    for i in range(n):
        rng = rng_stream(seed, "data", base + i)
        if rng.random() < 0.5:
            img = _grating_blob(rng, spec, rng.uniform(lo, hi))
        else:
            img = _shape_image(rng, spec)
        images[i] = np.broadcast_to(img, (spec.channels, s, s))
    return Dataset(images, None, "synthetic_out", split)


def _shape_image(rng, spec):
    s = spec.image_size
    bg = rng.uniform(0.0, 1.0)
    fg = rng.uniform(0.0, 1.0)
    while abs(fg - bg) < 0.25:
        fg = rng.uniform(0.0, 1.0)
    img = np.full((s, s), bg)
    r0, c0 = rng.integers(1, s // 2, size=2)
    dr, dc = rng.integers(s // 4, s // 2, size=2)
    if rng.random() < 0.5:
        img[r0:r0 + dr, c0:c0 + dc] = fg
    else:
        rc, cc = rng.integers(s // 4, 3 * s // 4, size=2)
        width = int(rng.integers(1, max(2, s // 8)))
        img[max(0, rc - width):rc + width, :] = fg
        img[:, max(0, cc - width):cc + width] = fg
    img = img + rng.normal(0, spec.noise_std, size=(s, s))
    return np.clip(img, 0.0, 1.0)


# ---- subsets ---------------------------------------------------------------------


def fixed_subset(ds, n, seed=0):
    """Seeded permutation prefix; stable across runs."""
    if n > len(ds):
        raise ValueError(f"requested {n} of {len(ds)} samples")
    perm = rng_stream(seed, "eval").permutation(len(ds))[:n]
    labels = None if ds.labels is None else ds.labels[perm]
    return Dataset(ds.images[perm], labels, ds.name, ds.split)


# ---- IDX reader ------------------------------------------------------------------

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


def load_idx(images_path, labels_path=None, name=None, split="train"):
    """Read big-endian IDX image (and optional label) files.

    Pixels are scaled to [0, 1] by dividing by 255; malformed or truncated
    files raise IdxFormatError naming the byte offset.
    """
    images_path = Path(images_path)
    raw = images_path.read_bytes()
    magic = _read_u32(raw, 0, images_path)
    if magic != IDX_IMAGES_MAGIC:
        raise IdxFormatError(
            f"{images_path}: bad image magic 0x{magic:08x} at byte 0")
    n = _read_u32(raw, 4, images_path)
    h = _read_u32(raw, 8, images_path)
    w = _read_u32(raw, 12, images_path)
    expected = 16 + n * h * w
    if len(raw) < expected:
        raise IdxFormatError(
            f"{images_path}: truncated at byte {len(raw)}, expected {expected}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=n * h * w, offset=16)
    images = (pixels.reshape(n, 1, h, w).astype(np.float32)) / 255.0

    labels = None
    if labels_path is not None:
        labels_path = Path(labels_path)
        lraw = labels_path.read_bytes()
        lmagic = _read_u32(lraw, 0, labels_path)
        if lmagic != IDX_LABELS_MAGIC:
            raise IdxFormatError(
                f"{labels_path}: bad label magic 0x{lmagic:08x} at byte 0")
        ln = _read_u32(lraw, 4, labels_path)
        if ln != n:
            raise IdxFormatError(
                f"{labels_path}: {ln} labels for {n} images")
        if len(lraw) < 8 + ln:
            raise IdxFormatError(
                f"{labels_path}: truncated at byte {len(lraw)}, expected {8 + ln}")
        labels = np.frombuffer(lraw, dtype=np.uint8, count=ln, offset=8).astype(np.int64)
    return Dataset(images, labels, name or images_path.stem, split)


def _read_u32(raw, offset, path):
    if len(raw) < offset + 4:
        raise IdxFormatError(f"{path}: truncated header at byte {len(raw)}")
    return struct.unpack_from(">I", raw, offset)[0]


# ---- raw cache -------------------------------------------------------------------


def save_cache(ds, directory):
    """Write a dataset as meta.json + images.f32 (+ labels.u8)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {"shape": list(ds.images.shape[1:]), "count": len(ds),
            "dtype": "f32", "name": ds.name, "split": ds.split,
            "labelled": ds.labels is not None}
    (directory / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2) + "\n")
    ds.images.astype("<f4").tofile(directory / "images.f32")
    if ds.labels is not None:
        ds.labels.astype(np.uint8).tofile(directory / "labels.u8")


def load_cache(directory):
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    shape = tuple(meta["shape"])
    images = np.fromfile(directory / "images.f32", dtype="<f4").reshape((meta["count"],) + shape)
    labels = None
    if meta["labelled"]:
        labels = np.fromfile(directory / "labels.u8", dtype=np.uint8).astype(np.int64)
    return Dataset(images, labels, meta["name"], meta["split"])
