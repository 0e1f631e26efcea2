"""Datasets: synthetic 2-D generators, IDX digit files, addition triplets,
and the stochastic augmentation pipeline.

Labels are carried for evaluation only; the training paths never read
them except when building the hidden addition constraint.
"""

from __future__ import annotations

import gzip
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, FormatError
from .objectives import ADMISSIBLE_PAIRS

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801
CACHE_MAGIC = b"GEDIDATA"
CACHE_VERSION = 1


@dataclass
class Dataset:
    points: np.ndarray
    labels: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.points.shape[0] != self.labels.shape[0]:
            raise ContractViolation("points and labels must have equal length")
        if not np.all(np.isfinite(self.points)):
            raise ContractViolation("points must be finite")

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def bounding_box(self, expand: float = 0.0) -> tuple[float, float]:
        lo, hi = float(self.points.min()), float(self.points.max())
        pad = expand * (hi - lo)
        return lo - pad, hi + pad


@dataclass
class TripletBatch:
    """Digit images grouped in consecutive triplets with hidden labels.

    Every record (a, b, c) satisfies a + b = c; image row 3i is the "a"
    digit of triplet i, 3i+1 the "b" digit, 3i+2 the "c" digit.
    """

    images: np.ndarray
    labels: np.ndarray
    records: np.ndarray  # (k, 3) integer triples

    def __post_init__(self):
        if self.images.shape[0] != 3 * self.records.shape[0]:
            raise ContractViolation("images must contain exactly three rows per triplet")
        if not np.all(self.records[:, 0] + self.records[:, 1] == self.records[:, 2]):
            raise ContractViolation("every triplet must satisfy a + b = c")

    @property
    def num_triplets(self) -> int:
        return self.records.shape[0]

    def shuffled(self, rng: np.random.Generator) -> "TripletBatch":
        """Permute triplets as blocks, never individual images."""
        perm = rng.permutation(self.num_triplets)
        rows = (3 * perm[:, None] + np.arange(3)[None, :]).ravel()
        return TripletBatch(self.images[rows], self.labels[rows], self.records[perm])


@dataclass
class AugmentConfig:
    gaussian_noise_std: float = 0.03
    crop: bool = False
    max_shift: int = 4
    jitter_prob: float = 0.0
    grayscale_prob: float = 0.0
    flip: bool = False
    brightness_delta: float = 0.4
    contrast_range: float = 0.4

    def __post_init__(self):
        if self.gaussian_noise_std < 0:
            raise ContractViolation("noise std must be nonnegative")
        for p in (self.jitter_prob, self.grayscale_prob):
            if not 0.0 <= p <= 1.0:
                raise ContractViolation("probabilities must lie in [0, 1]")

    def to_dict(self) -> dict:
        return {
            "gaussian_noise_std": self.gaussian_noise_std,
            "crop": self.crop,
            "max_shift": self.max_shift,
            "jitter_prob": self.jitter_prob,
            "grayscale_prob": self.grayscale_prob,
            "flip": self.flip,
            "brightness_delta": self.brightness_delta,
            "contrast_range": self.contrast_range,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "AugmentConfig":
        return cls(
            gaussian_noise_std=float(d["gaussian_noise_std"]),
            crop=bool(d.get("crop", False)),
            max_shift=int(d.get("max_shift", 4)),
            jitter_prob=float(d.get("jitter_prob", 0.0)),
            grayscale_prob=float(d.get("grayscale_prob", 0.0)),
            flip=bool(d.get("flip", False)),
            brightness_delta=float(d.get("brightness_delta", 0.4)),
            contrast_range=float(d.get("contrast_range", 0.4)),
        )


# -- synthetic generators ----------------------------------------------------------


def gen_moons(n: int, noise_std: float = 0.05, seed: int = 0) -> Dataset:
    """Two interleaved half circles, n/2 points each.

    Class 0 traces (cos t, sin t) and class 1 traces (1 - cos t, 0.5 - sin t)
    for t uniform on [0, pi], plus isotropic Gaussian noise.
    """
    if n < 2:
        raise ContractViolation("n must be >= 2")
    rng = np.random.default_rng(seed)
    half = n // 2
    other = n - half
    t0 = rng.uniform(0.0, np.pi, size=half)
    t1 = rng.uniform(0.0, np.pi, size=other)
    upper = np.stack([np.cos(t0), np.sin(t0)], axis=1)
    lower = np.stack([1.0 - np.cos(t1), 0.5 - np.sin(t1)], axis=1)
    points = np.vstack([upper, lower])
    points += rng.normal(0.0, noise_std, size=points.shape) if noise_std > 0 else 0.0
    labels = np.concatenate([np.zeros(half, dtype=np.int64), np.ones(other, dtype=np.int64)])
    return Dataset(points, labels, {"source": "moons", "seed": seed, "noise_std": noise_std})


def gen_circles(n: int, noise_std: float = 0.03, inner_scale: float = 0.5, seed: int = 0) -> Dataset:
    """Two concentric circles with radii 1 and ``inner_scale``."""
    if n < 2:
        raise ContractViolation("n must be >= 2")
    if not 0.0 < inner_scale < 1.0:
        raise ContractViolation("inner_scale must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    half = n // 2
    other = n - half
    a0 = rng.uniform(0.0, 2 * np.pi, size=half)
    a1 = rng.uniform(0.0, 2 * np.pi, size=other)
    outer = np.stack([np.cos(a0), np.sin(a0)], axis=1)
    inner = inner_scale * np.stack([np.cos(a1), np.sin(a1)], axis=1)
    points = np.vstack([outer, inner])
    points += rng.normal(0.0, noise_std, size=points.shape) if noise_std > 0 else 0.0
    labels = np.concatenate([np.zeros(half, dtype=np.int64), np.ones(other, dtype=np.int64)])
    return Dataset(points, labels, {"source": "circles", "seed": seed, "noise_std": noise_std, "inner_scale": inner_scale})


# -- IDX files -----------------------------------------------------------------------


def _open_maybe_gzip(path, mode="rb"):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, mode)
    return open(path, mode)


def load_mnist_idx(images_path: str, labels_path: str) -> Dataset:
    """Parse big-endian IDX image/label files (optionally gzipped).

    Pixels are rescaled from [0, 255] to [-1, 1] and flattened to (n, rows*cols).
    """
    with _open_maybe_gzip(images_path) as fh:
        header = fh.read(16)
        if len(header) < 16:
            raise FormatError(f"{images_path}: truncated header at offset {len(header)}")
        magic, count, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGE_MAGIC:
            raise FormatError(f"{images_path}: bad magic 0x{magic:08x} at offset 0 (expected 0x{IDX_IMAGE_MAGIC:08x})")
        raw = fh.read(count * rows * cols)
        if len(raw) != count * rows * cols:
            raise FormatError(f"{images_path}: expected {count * rows * cols} pixel bytes, found {len(raw)}")
    pixels = np.frombuffer(raw, dtype=np.uint8).reshape(count, rows * cols)

    with _open_maybe_gzip(labels_path) as fh:
        header = fh.read(8)
        if len(header) < 8:
            raise FormatError(f"{labels_path}: truncated header at offset {len(header)}")
        magic, label_count = struct.unpack(">II", header)
        if magic != IDX_LABEL_MAGIC:
            raise FormatError(f"{labels_path}: bad magic 0x{magic:08x} at offset 0 (expected 0x{IDX_LABEL_MAGIC:08x})")
        raw = fh.read(label_count)
        if len(raw) != label_count:
            raise FormatError(f"{labels_path}: expected {label_count} label bytes, found {len(raw)}")
    labels = np.frombuffer(raw, dtype=np.uint8).astype(np.int64)

    if count != label_count:
        raise FormatError(f"image count {count} does not match label count {label_count}")
    points = pixels.astype(np.float64) / 127.5 - 1.0
    return Dataset(points, labels, {"source": "idx", "images_path": str(images_path), "rows": rows, "cols": cols})


def write_mnist_idx(images: np.ndarray, labels: np.ndarray, images_path: str, labels_path: str, side: int | None = None) -> None:
    """Write images in [-1, 1] (or raw uint8) and labels as IDX files."""
    images = np.asarray(images)
    n = images.shape[0]
    if side is None:
        side = int(round(np.sqrt(images.shape[1])))
    if images.dtype != np.uint8:
        images = np.clip((images + 1.0) * 127.5, 0, 255).round().astype(np.uint8)
    opener = gzip.open if str(images_path).endswith(".gz") else open
    with opener(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGE_MAGIC, n, side, side))
        fh.write(images.tobytes())
    opener = gzip.open if str(labels_path).endswith(".gz") else open
    with opener(labels_path, "wb") as fh:
        fh.write(struct.pack(">II", IDX_LABEL_MAGIC, n))
        fh.write(np.asarray(labels, dtype=np.uint8).tobytes())


# -- addition triplets ----------------------------------------------------------------


def make_addition_triplets(dataset: Dataset, count: int, seed: int = 0) -> TripletBatch:
    """Build ``count`` triplets with a + b = c, digits uniform over the 55
    admissible (a, b) pairs, images assigned by label without replacement."""
    rng = np.random.default_rng(seed)
    pools = {digit: list(np.flatnonzero(dataset.labels == digit)) for digit in range(10)}
    for digit in pools:
        rng.shuffle(pools[digit])
    pair_idx = rng.integers(0, len(ADMISSIBLE_PAIRS), size=count)
    rows: list[int] = []
    records = np.empty((count, 3), dtype=np.int64)
    for i, k in enumerate(pair_idx):
        a, b = ADMISSIBLE_PAIRS[k]
        c = a + b
        records[i] = (a, b, c)
        for digit in (a, b, c):
            if not pools[digit]:
                raise ContractViolation(f"ran out of images with label {digit} while building triplet {i}")
            rows.append(pools[digit].pop())
    rows = np.asarray(rows)
    return TripletBatch(dataset.points[rows].copy(), dataset.labels[rows].copy(), records)


# -- augmentation -----------------------------------------------------------------------


def augment(batch: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Stochastic views: additive noise, and for image data optional
    per-sample brightness/contrast jitter and pad-and-shift cropping."""
    batch = np.asarray(batch, dtype=np.float64)
    out = batch.copy()
    n, d = out.shape

    if cfg.crop or cfg.jitter_prob > 0:
        side = int(round(np.sqrt(d)))
        if side * side != d:
            raise ContractViolation("crop/jitter requested on data that is not a square image")
        if cfg.jitter_prob > 0:
            jitter = rng.uniform(size=n) < cfg.jitter_prob
            brightness = rng.uniform(-cfg.brightness_delta, cfg.brightness_delta, size=n)
            contrast = 1.0 + rng.uniform(-cfg.contrast_range, cfg.contrast_range, size=n)
            means = out.mean(axis=1)
            for i in np.flatnonzero(jitter):
                out[i] = (out[i] - means[i]) * contrast[i] + means[i] + brightness[i]
        if cfg.grayscale_prob > 0:
            # single-channel inputs are already grayscale; draw for stream parity
            rng.uniform(size=n)
        if cfg.crop:
            shifts = rng.integers(-cfg.max_shift, cfg.max_shift + 1, size=(n, 2))
            imgs = out.reshape(n, side, side)
            for i, (dy, dx) in enumerate(shifts):
                if dy or dx:
                    shifted = np.full((side, side), -1.0)
                    ys = slice(max(dy, 0), side + min(dy, 0))
                    xs = slice(max(dx, 0), side + min(dx, 0))
                    ys_src = slice(max(-dy, 0), side + min(-dy, 0))
                    xs_src = slice(max(-dx, 0), side + min(-dx, 0))
                    shifted[ys, xs] = imgs[i][ys_src, xs_src]
                    imgs[i] = shifted
            out = imgs.reshape(n, d)

    if cfg.gaussian_noise_std > 0:
        out = out + rng.normal(0.0, cfg.gaussian_noise_std, size=out.shape)
    return out


# -- dataset cache -------------------------------------------------------------------
#
# Layout: 8-byte magic "GEDIDATA", then little-endian u32 version, u64 n,
# u64 d, i64 seed, then n*d float64 points, n int64 labels, and a trailing
# u32 CRC32 of everything before it.


def save_cache(dataset: Dataset, path: str) -> None:
    body = bytearray()
    body += CACHE_MAGIC
    body += struct.pack("<IQQq", CACHE_VERSION, dataset.n, dataset.dim, int(dataset.metadata.get("seed", 0)))
    body += dataset.points.astype("<f8").tobytes()
    body += dataset.labels.astype("<i8").tobytes()
    crc = zlib.crc32(bytes(body))
    with open(path, "wb") as fh:
        fh.write(bytes(body))
        fh.write(struct.pack("<I", crc))


def load_cache(path: str) -> Dataset:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8 + 28 + 4 or blob[:8] != CACHE_MAGIC:
        raise FormatError(f"{path}: not a dataset cache")
    crc_stored = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) != crc_stored:
        raise FormatError(f"{path}: checksum mismatch (corrupted or truncated)")
    version, n, d, seed = struct.unpack("<IQQq", blob[8:36])
    if version != CACHE_VERSION:
        raise FormatError(f"{path}: unsupported cache version {version}")
    offset = 36
    nbytes = n * d * 8
    points = np.frombuffer(blob, dtype="<f8", count=n * d, offset=offset).reshape(n, d)
    labels = np.frombuffer(blob, dtype="<i8", count=n, offset=offset + nbytes)
    return Dataset(points.copy(), labels.copy(), {"source": "cache", "seed": seed})
