"""Dense float64 arrays, deterministic sampling, and patch/column transforms.

Everything downstream works on plain ``numpy.ndarray`` values in double
precision with channel-last layout.  Images are ``(H, W, C)``, batches are
``(N, H, W, C)``, and im2col rows follow the row-major order of the output
positions so that ``col2im`` is the exact adjoint.

Random sampling goes through :class:`RngState`, a small counter-based
generator (splitmix64 stream) so that identical seeds give bitwise-identical
sample streams on every platform, independently of library versions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

Tensor = np.ndarray

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MASK64 = np.uint64(0xFFFFFFFFFFFFFFFF)


@dataclass
class RngState:
    """Counter-based RNG state: a seed plus the number of draws consumed."""

    seed: int
    counter: int = 0

    def clone(self) -> "RngState":
        return RngState(self.seed, self.counter)


def _mix64(x: np.ndarray) -> np.ndarray:
    # splitmix64 finalizer; input/output uint64 arrays, wrapping arithmetic.
    z = x.copy()
    z ^= z >> np.uint64(30)
    z *= np.uint64(0xBF58476D1CE4E5B9)
    z ^= z >> np.uint64(27)
    z *= np.uint64(0x94D049BB133111EB)
    z ^= z >> np.uint64(31)
    return z


def _raw_u64(rng: RngState, n: int) -> np.ndarray:
    """Next ``n`` raw 64-bit words of the stream; advances the counter."""
    idx = np.arange(rng.counter + 1, rng.counter + n + 1, dtype=np.uint64)
    rng.counter += n
    with np.errstate(over="ignore"):
        state = (np.uint64(rng.seed & 0xFFFFFFFFFFFFFFFF) + idx * _GOLDEN) & _MASK64
        return _mix64(state)


def _uniform_open01(rng: RngState, n: int) -> np.ndarray:
    # Doubles in (0, 1]; the +1 keeps log() finite in Box-Muller.
    bits = _raw_u64(rng, n)
    return ((bits >> np.uint64(11)).astype(np.float64) + 1.0) * (2.0 ** -53)


def _check_shape(shape) -> tuple:
    shape = tuple(int(s) for s in np.atleast_1d(np.asarray(shape, dtype=object)).ravel())
    if len(shape) == 0:
        raise ValueError("shape must have at least one extent")
    for s in shape:
        if s <= 0:
            raise ValueError(f"shape extents must be positive, got {shape}")
    return shape


def randn_seeded(rng: RngState, shape, mean: float = 0.0, stddev: float = 1.0) -> Tensor:
    """Normal samples of the given shape, deterministic per (seed, counter).

    Uses Box-Muller on consecutive stream pairs; ``stddev=0`` degenerates to
    a constant tensor without consuming a different amount of stream.
    """
    shape = _check_shape(shape)
    if stddev < 0:
        raise ValueError("stddev must be >= 0")
    n = int(np.prod(shape))
    pairs = (n + 1) // 2
    u1 = _uniform_open01(rng, pairs)
    u2 = _uniform_open01(rng, pairs)
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    z = np.empty(2 * pairs)
    z[0::2] = r * np.cos(theta)
    z[1::2] = r * np.sin(theta)
    out = mean + stddev * z[:n]
    return out.reshape(shape)


def rand_uniform(rng: RngState, shape, low: float = 0.0, high: float = 1.0) -> Tensor:
    """Uniform samples in [low, high), deterministic per (seed, counter)."""
    shape = _check_shape(shape)
    if high < low:
        raise ValueError("high must be >= low")
    n = int(np.prod(shape))
    bits = _raw_u64(rng, n)
    u = (bits >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
    return (low + (high - low) * u).reshape(shape)


def rand_permutation(rng: RngState, n: int) -> np.ndarray:
    """Fisher-Yates permutation of 0..n-1 driven by the raw stream."""
    if n < 0:
        raise ValueError("n must be >= 0")
    perm = np.arange(n, dtype=np.int64)
    if n < 2:
        return perm
    words = _raw_u64(rng, n - 1)
    for i in range(n - 1, 0, -1):
        j = int(words[n - 1 - i] % np.uint64(i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def conv_output_hw(h: int, w: int, kernel: int, stride: int, padding: int) -> tuple:
    """Spatial output extents of a kernel/stride/padding sweep."""
    if kernel < 1 or stride < 1 or padding < 0:
        raise ValueError("kernel and stride must be >= 1, padding >= 0")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kernel > hp or kernel > wp:
        raise ValueError(
            f"kernel {kernel} larger than padded input {hp}x{wp}"
        )
    return (hp - kernel) // stride + 1, (wp - kernel) // stride + 1


def im2col_batch(x: Tensor, kernel: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Patch matrix for a batch (N, H, W, C) -> (N * H' * W', kernel*kernel*C).

    Row r holds the flattened receptive field (di, dj, c in row-major order,
    channel fastest) of output position r; positions are ordered n-major then
    row-major over (m, n).  Padding is zero-fill.
    """
    n, h, w, c = x.shape
    oh, ow = conv_output_hw(h, w, kernel, stride, padding)
    if padding > 0:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    cols = np.empty((n, oh, ow, kernel, kernel, c))
    for i in range(kernel):
        i_max = i + stride * oh
        for j in range(kernel):
            j_max = j + stride * ow
            cols[:, :, :, i, j, :] = x[:, i:i_max:stride, j:j_max:stride, :]
    return cols.reshape(n * oh * ow, kernel * kernel * c)


def col2im_batch(cols: Tensor, x_shape, kernel: int, stride: int = 1,
                 padding: int = 0) -> Tensor:
    """Adjoint of :func:`im2col_batch`: scatter-add patch rows back to (N,H,W,C)."""
    n, h, w, c = x_shape
    oh, ow = conv_output_hw(h, w, kernel, stride, padding)
    cols = cols.reshape(n, oh, ow, kernel, kernel, c)
    hp, wp = h + 2 * padding, w + 2 * padding
    img = np.zeros((n, hp, wp, c))
    for i in range(kernel):
        i_max = i + stride * oh
        for j in range(kernel):
            j_max = j + stride * ow
            img[:, i:i_max:stride, j:j_max:stride, :] += cols[:, :, :, i, j, :]
    if padding > 0:
        img = img[:, padding:padding + h, padding:padding + w, :]
    return img


def im2col(x: Tensor, kernel: int, stride: int = 1, padding: int = 0) -> Tensor:
    """Single-image (H, W, C) patch matrix; see :func:`im2col_batch`."""
    if x.ndim != 3:
        raise ValueError(f"expected (H, W, C) input, got shape {x.shape}")
    return im2col_batch(x[None], kernel, stride, padding)


def col2im(cols: Tensor, x_shape, kernel: int, stride: int = 1,
           padding: int = 0) -> Tensor:
    """Adjoint of :func:`im2col` for a single (H, W, C) image."""
    if len(x_shape) != 3:
        raise ValueError(f"expected (H, W, C) shape, got {x_shape}")
    return col2im_batch(cols, (1,) + tuple(x_shape), kernel, stride, padding)[0]


def reduce_l2_norm(t: Tensor) -> float:
    """Euclidean norm of all elements; 0 only for the all-zero tensor."""
    flat = np.asarray(t, dtype=np.float64).ravel()
    return float(np.sqrt(np.dot(flat, flat)))
