"""Dataset ingestion and generation.

Two sources: the standard CIFAR-10 binary batches (bit-exact reader, for
optional real-data runs) and a seeded synthetic shape/texture set used for
desk-scale experiments and CI. Pixels are always float32 in [0,1], /255 only;
no channel standardization, since the noise scales are calibrated against
[0,1] inputs.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import FormatError, UsageError
from .rng import RngStream

CIFAR_RECORD = 3073  # 1 label byte + 3*32*32 pixel bytes
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass
class Dataset:
    images: np.ndarray   # (N, C, H, W) float32 in [0,1]
    labels: np.ndarray   # (N,) int64 in [0, K)
    classes: int
    split: str = "train"
    provenance: str = ""

    def __post_init__(self):
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise UsageError("images must be (N,C,H,W) aligned with labels")
        if len(self.images) == 0:
            raise UsageError("dataset must be nonempty")
        if self.labels.min() < 0 or self.labels.max() >= self.classes:
            raise UsageError("labels out of range")
        if float(self.images.min()) < 0.0 or float(self.images.max()) > 1.0:
            raise UsageError("pixel values must lie in [0,1]")

    def __len__(self):
        return len(self.images)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.classes,
                       self.split, self.provenance)


# ---------------------------------------------------------------------------
# CIFAR-10 binary format


def parse_cifar_batch(buf: bytes, source: str = "<memory>") -> tuple[np.ndarray, np.ndarray]:
    if len(buf) % CIFAR_RECORD != 0:
        offset = (len(buf) // CIFAR_RECORD) * CIFAR_RECORD
        raise FormatError(
            f"{source}: length {len(buf)} is not a multiple of {CIFAR_RECORD}; "
            f"truncated record starts at byte {offset}")
    n = len(buf) // CIFAR_RECORD
    raw = np.frombuffer(buf, dtype=np.uint8).reshape(n, CIFAR_RECORD)
    labels = raw[:, 0].astype(np.int64)
    bad = np.nonzero(labels > 9)[0]
    if bad.size:
        raise FormatError(
            f"{source}: label byte {labels[bad[0]]} > 9 at byte {int(bad[0]) * CIFAR_RECORD}")
    images = raw[:, 1:].reshape(n, 3, 32, 32).astype(np.float32) / 255.0
    return images, labels


def serialize_cifar_batch(images: np.ndarray, labels: np.ndarray) -> bytes:
    """Inverse of parse_cifar_batch; round-trips source bytes exactly."""
    n = len(images)
    pixels = np.rint(images * 255.0).astype(np.uint8).reshape(n, 3072)
    rec = np.empty((n, CIFAR_RECORD), dtype=np.uint8)
    rec[:, 0] = labels.astype(np.uint8)
    rec[:, 1:] = pixels
    return rec.tobytes()


def load_cifar10(dirpath) -> tuple[Dataset, Dataset]:
    def read(name):
        path = os.path.join(dirpath, name)
        if not os.path.exists(path):
            raise FormatError(f"missing CIFAR-10 batch file: {path}")
        with open(path, "rb") as fh:
            return parse_cifar_batch(fh.read(), source=name)

    train_parts = [read(name) for name in CIFAR_TRAIN_FILES]
    train = Dataset(np.concatenate([p[0] for p in train_parts]),
                    np.concatenate([p[1] for p in train_parts]),
                    classes=10, split="train", provenance=str(dirpath))
    ti, tl = read(CIFAR_TEST_FILE)
    test = Dataset(ti, tl, classes=10, split="test", provenance=str(dirpath))
    return train, test


# ---------------------------------------------------------------------------
# synthetic generator


def _upsample(grid: np.ndarray, size: int) -> np.ndarray:
    reps = -(-size // grid.shape[-1])
    return np.repeat(np.repeat(grid, reps, axis=1), reps, axis=2)[:, :size, :size]


def gen_synthetic(seed: int, n_per_class: int = 200, classes: int = 10,
                  size: int = 16, jitter: bool = True,
                  split: str = "train") -> Dataset:
    """Seeded textured-pattern classification set.

    Classes come in pairs sharing a blocky background texture and a texture
    patch whose sign flips independently per image; the pair members differ in
    the *relative* sign of the patch between the left and right image halves
    (a parity a linear model cannot read) plus a weak per-class texture cue.
    Per-image jitter: translation <= 2 px and pixel noise sigma 0.05, clipped
    to [0,1]. Calibrated so a linear classifier sits around 80% test accuracy
    while a small convnet clears 95%.
    """
    if classes < 2:
        raise UsageError("need at least two classes")
    if size < 8:
        raise UsageError("image size must be >= 8")
    patch_amp, cue_amp, noise_sigma = 0.15, 0.015, 0.05
    base_rng = RngStream(seed, stream_id=101)
    img_rng = RngStream(seed, stream_id=102 if split == "train" else 103)
    groups = (classes + 1) // 2
    backgrounds = [_upsample(base_rng.uniform((3, 4, 4), 0.25, 0.75), size)
                   for _ in range(groups)]
    patches = [_upsample(base_rng.gaussian((3, 8, 8), 1.0), size)
               for _ in range(groups)]
    cues = [_upsample(base_rng.gaussian((3, 8, 8), 1.0), size)
            for _ in range(classes)]
    half = size // 2
    left = np.zeros((1, size, size))
    left[:, :, :half] = 1.0
    right = 1.0 - left
    images = np.empty((classes * n_per_class, 3, size, size), dtype=np.float32)
    labels = np.empty(classes * n_per_class, dtype=np.int64)
    i = 0
    for k in range(classes):
        group, parity = divmod(k, 2)
        for _ in range(n_per_class):
            sign = (1.0 if img_rng.uniform() < 0.5 else -1.0) if jitter else 1.0
            sign_right = sign if parity == 0 else -sign
            img = (backgrounds[group]
                   + patch_amp * (sign * left + sign_right * right) * patches[group]
                   + cue_amp * cues[k])
            if jitter:
                dy, dx = img_rng.integers(-2, 3, (2,))
                img = np.roll(img, (int(dy), int(dx)), axis=(1, 2))
                img = img + img_rng.gaussian((3, size, size), noise_sigma)
            images[i] = np.clip(img, 0.0, 1.0)
            labels[i] = k
            i += 1
    return Dataset(images, labels, classes, split=split,
                   provenance=f"synthetic(seed={seed},n={n_per_class},K={classes},size={size})")


def split_and_shuffle(ds: Dataset, fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Deterministic permutation then a floor(fraction*N) split."""
    if not 0.0 < fraction < 1.0:
        raise UsageError("fraction must lie strictly between 0 and 1")
    perm = RngStream(seed, stream_id=104).permutation(len(ds))
    cut = int(fraction * len(ds))
    if cut == 0 or cut == len(ds):
        raise UsageError("split would leave one side empty")
    return ds.subset(perm[:cut]), ds.subset(perm[cut:])
