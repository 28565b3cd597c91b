"""Datasets: 2-D toy classification tasks, IDX image ingestion, batching.

The three toy generators sample coordinates from isotropic Gaussians and
label them by fixed geometric rules, so labels are always re-derivable from
the coordinates:

* unit ball: radius < 10 is positive, radius > 15 is negative, the annulus
  in between is rejected to leave a margin,
* multi ball: positive inside either radius-10 ball centered at (10, 10) or
  (-10, -10), no margin,
* linear: positive iff x*y >= 0 (quadrant parity, axes included).

The stated spreads ("10" and "15") are used as standard deviations; reading
them as variances would leave the Gaussians almost entirely inside the inner
ball.

IDX files are the big-endian binary container for image/label sets (magic
0x803 for uint8 image stacks, 0x801 for label vectors).  28x28 images are
zero-padded to 32x32, scaled to [0, 1], and normalized by the mean/std of the
unpadded training pixels.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .tensor import RngState, Tensor, rand_permutation, randn_seeded

IDX_MAGIC_IMAGES = 0x00000803
IDX_MAGIC_LABELS = 0x00000801


@dataclass
class LabeledDataset:
    inputs: Tensor          # (N, ...) float64
    labels: np.ndarray      # (N,) int64
    name: str
    n_classes: int
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.inputs) != len(self.labels):
            raise ValueError("inputs/labels length mismatch")
        if len(self.inputs) == 0:
            raise ValueError("dataset must be non-empty")
        if self.labels.min() < 0 or self.labels.max() >= self.n_classes:
            raise ValueError("labels out of range")
        if not np.all(np.isfinite(self.inputs)):
            raise ValueError("non-finite inputs")

    def __len__(self):
        return len(self.labels)


# ---------------------------------------------------------------------------
# toy generators
# ---------------------------------------------------------------------------

def unit_ball_label(x: float, y: float):
    """1 inside radius 10, 0 outside radius 15, None in the rejected margin."""
    r = np.hypot(x, y)
    if r < 10.0:
        return 1
    if r > 15.0:
        return 0
    return None


def multi_ball_label(x: float, y: float) -> int:
    if np.hypot(x - 10.0, y - 10.0) < 10.0:
        return 1
    if np.hypot(x + 10.0, y + 10.0) < 10.0:
        return 1
    return 0


def linear_label(x: float, y: float) -> int:
    return 1 if x * y >= 0.0 else 0


def gen_unit_ball(n: int, rng: RngState) -> LabeledDataset:
    """Rejection-sample until n points land outside the (10, 15) margin."""
    if n < 1:
        raise ValueError("n must be positive")
    pts = np.empty((0, 2))
    while len(pts) < n:
        cand = randn_seeded(rng, (2 * n, 2), mean=0.0, stddev=10.0)
        r = np.hypot(cand[:, 0], cand[:, 1])
        keep = (r < 10.0) | (r > 15.0)
        pts = np.concatenate([pts, cand[keep]])[: n]
    labels = (np.hypot(pts[:, 0], pts[:, 1]) < 10.0).astype(np.int64)
    return LabeledDataset(pts, labels, "unit_ball", 2)


def gen_multi_ball(n: int, rng: RngState) -> LabeledDataset:
    if n < 1:
        raise ValueError("n must be positive")
    pts = randn_seeded(rng, (n, 2), mean=0.0, stddev=15.0)
    inside = ((np.hypot(pts[:, 0] - 10.0, pts[:, 1] - 10.0) < 10.0) |
              (np.hypot(pts[:, 0] + 10.0, pts[:, 1] + 10.0) < 10.0))
    return LabeledDataset(pts, inside.astype(np.int64), "multi_ball", 2)


def gen_linear(n: int, rng: RngState) -> LabeledDataset:
    if n < 1:
        raise ValueError("n must be positive")
    pts = randn_seeded(rng, (n, 2), mean=0.0, stddev=10.0)
    labels = (pts[:, 0] * pts[:, 1] >= 0.0).astype(np.int64)
    return LabeledDataset(pts, labels, "linear", 2)


TOY_TASKS = {"ball": gen_unit_ball, "multiball": gen_multi_ball, "linear": gen_linear}

# plotting/grid domain wide enough to hold essentially all samples per task
TOY_BOUNDS = {"ball": 30.0, "multiball": 45.0, "linear": 30.0}


# ---------------------------------------------------------------------------
# IDX ingestion
# ---------------------------------------------------------------------------

def read_idx(path) -> np.ndarray:
    """Parse one big-endian IDX file of unsigned bytes into an ndarray."""
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 4:
        raise ValueError(f"{path}: truncated IDX header")
    magic = struct.unpack(">I", raw[:4])[0]
    if magic not in (IDX_MAGIC_IMAGES, IDX_MAGIC_LABELS):
        raise ValueError(f"{path}: bad IDX magic 0x{magic:08x}")
    ndim = magic & 0xFF
    header_len = 4 + 4 * ndim
    if len(raw) < header_len:
        raise ValueError(f"{path}: truncated IDX dimension block")
    dims = struct.unpack(f">{ndim}I", raw[4:header_len])
    count = int(np.prod(dims))
    body = raw[header_len:]
    if len(body) != count:
        raise ValueError(f"{path}: expected {count} data bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def write_idx(path, array: np.ndarray):
    """Write an unsigned-byte array as an IDX file (images: 3-D, labels: 1-D)."""
    array = np.asarray(array)
    if array.dtype != np.uint8:
        raise ValueError("IDX writer takes uint8 data")
    magic = IDX_MAGIC_LABELS if array.ndim == 1 else IDX_MAGIC_IMAGES
    if array.ndim not in (1, 3):
        raise ValueError("IDX writer takes 1-D labels or 3-D image stacks")
    with open(path, "wb") as f:
        f.write(struct.pack(">I", (magic & 0xFFFFFF00) | array.ndim))
        for d in array.shape:
            f.write(struct.pack(">I", d))
        f.write(array.tobytes())


def load_mnist_idx(images_path, labels_path, mean: float = None,
                   std: float = None) -> LabeledDataset:
    """Load an IDX image/label pair with the standard digit preprocessing.

    Pixels are scaled to [0, 1]; 28x28 images are zero-padded to 32x32; then
    every pixel is normalized as (v - mean) / std.  When mean/std are not
    supplied they are computed from this file's unpadded scaled pixels (load
    the training set first and pass its statistics in for the test set).
    """
    images = read_idx(images_path)
    labels = read_idx(labels_path)
    if images.ndim != 3:
        raise ValueError(f"{images_path}: expected a 3-D image stack")
    if labels.ndim != 1:
        raise ValueError(f"{labels_path}: expected a 1-D label vector")
    if images.shape[0] != labels.shape[0]:
        raise ValueError(
            f"image count {images.shape[0]} != label count {labels.shape[0]}")
    scaled = images.astype(np.float64) / 255.0
    if mean is None:
        mean = float(scaled.mean())
    if std is None:
        std = float(scaled.std())
    if std <= 0:
        raise ValueError("degenerate pixel distribution (std == 0)")
    n, h, w = scaled.shape
    if (h, w) == (28, 28):
        scaled = np.pad(scaled, ((0, 0), (2, 2), (2, 2)))
        h = w = 32
    x = ((scaled - mean) / std).reshape(n, h, w, 1)
    return LabeledDataset(x, labels.astype(np.int64), "idx", 10,
                          metadata={"mean": mean, "std": std})


def shuffle_batches(n_or_dataset, batch_size: int, rng: RngState):
    """A seeded permutation of all indices cut into batch_size chunks."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = n_or_dataset if isinstance(n_or_dataset, int) else len(n_or_dataset)
    perm = rand_permutation(rng, n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]
