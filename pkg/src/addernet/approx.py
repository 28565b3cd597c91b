"""Executable universal-approximation constructions for adder networks.

Three constructions, each verified numerically by the test suite:

1. Any weighted sum of ReLU'd l1-distance terms
   g(x) = sum_i a_i ReLU(||W_i - x||_1 + b_i) is realized *exactly* on a box
   by two adder layers: layer one computes |a_i| ||W_i - x||_1 + |a_i| b_i,
   and layer two folds the sign split through |h +- M| offsets with a bound
   M that dominates every first-layer magnitude on the box.

2. A masked linear map x -> A_i * sum_j B_ij x_j (B binary) is realized
   exactly by two adder layers with 2m+2 hidden units: with template entries
   larger than any input coordinate, |W - x| sums collapse to signed linear
   forms, and a fixed +-1 wiring pattern cancels everything but the masked
   row sums (times 4, absorbed into the output scale).

3. A random-center tent-kernel sum phi_N approximates a mollified target in
   expectation: centers are drawn with density |f|/||f||_1 and coefficients
   sgn(f(Z_i)) ||f||_1 / c0, which makes E phi_N(x) equal the tent-smoothed
   target psi_eps(x) exactly.

Bounds everywhere are axis-aligned boxes, [(lo_0, hi_0), ...] per dimension.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .tensor import RngState, rand_uniform


def tent_kernel(x):
    """Triangular bump via three hinges: max(0,x+1) + max(0,x-1) - 2max(0,x).

    Equals 1 - |x| on [-1, 1] and vanishes outside.
    """
    x = np.asarray(x, dtype=np.float64)
    return (np.maximum(0.0, x + 1.0) + np.maximum(0.0, x - 1.0)
            - 2.0 * np.maximum(0.0, x))


def scaled_tent(dist, epsilon: float, dim: int):
    """Bandwidth-epsilon tent in d dimensions: tent(v/eps) / eps**d."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    return tent_kernel(np.asarray(dist) / epsilon) / epsilon ** dim


def _check_bounds(bounds):
    bounds = [(float(lo), float(hi)) for lo, hi in bounds]
    for lo, hi in bounds:
        if hi <= lo:
            raise ValueError(f"degenerate domain bound ({lo}, {hi})")
    return bounds


def _corners(bounds):
    return np.array(list(itertools.product(*bounds)))


def _box_grid(bounds, pts_per_dim: int):
    """Tensor-product trapezoid grid: returns (points (M, d), weights (M,))."""
    axes, wts = [], []
    for lo, hi in bounds:
        axes.append(np.linspace(lo, hi, pts_per_dim))
        w = np.full(pts_per_dim, (hi - lo) / (pts_per_dim - 1))
        w[0] *= 0.5
        w[-1] *= 0.5
        wts.append(w)
    mesh = np.meshgrid(*axes, indexing="ij")
    points = np.stack([m.ravel() for m in mesh], axis=1)
    weight = wts[0]
    for w in wts[1:]:
        weight = np.multiply.outer(weight, w)
    return points, weight.ravel()


def _default_quad_points(dim: int) -> int:
    return {1: 2001, 2: 301, 3: 61}.get(dim, 31)


def box_volume(bounds) -> float:
    return float(np.prod([hi - lo for lo, hi in bounds]))


def tent_normalizer(dim: int, pts_per_dim: int = None) -> float:
    """c0 = integral of tent(||x||_1) over its support, by quadrature."""
    pts = pts_per_dim or {1: 20001, 2: 801, 3: 121}.get(dim, 41)
    points, weights = _box_grid([(-1.0, 1.0)] * dim, pts)
    vals = tent_kernel(np.abs(points).sum(axis=1))
    return float(np.dot(vals, weights))


# ---------------------------------------------------------------------------
# weighted sums of ReLU'd l1 distances, realized by two adder layers
# ---------------------------------------------------------------------------

@dataclass
class DistanceReluSum:
    """g(x) = sum_i coeffs[i] * ReLU(||centers[i] - x||_1 + offsets[i])."""

    coeffs: np.ndarray    # (t,)
    centers: np.ndarray   # (t, d)
    offsets: np.ndarray   # (t,)

    def __post_init__(self):
        self.coeffs = np.atleast_1d(np.asarray(self.coeffs, dtype=np.float64))
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(
            len(self.coeffs), -1)
        self.offsets = np.atleast_1d(np.asarray(self.offsets, dtype=np.float64))

    @property
    def dim(self) -> int:
        return self.centers.shape[1] if len(self.coeffs) else 0

    def evaluate(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if len(self.coeffs) == 0:
            return np.zeros(x.shape[0])
        if x.shape[1] != self.dim:
            raise ValueError(f"points have dim {x.shape[1]}, terms have {self.dim}")
        dist = np.abs(x[:, None, :] - self.centers[None, :, :]).sum(axis=2)
        return np.maximum(dist + self.offsets, 0.0) @ self.coeffs


@dataclass
class TwoLayerAdderNet:
    """Two adder layers (scale * ||W - x||_1 + bias per unit) with a ReLU between."""

    w1: np.ndarray        # (t, d) first-layer templates
    scale1: np.ndarray    # (t,)
    bias1: np.ndarray     # (t,)
    w2: np.ndarray        # (t,) second-layer template (single output)
    bias2: float
    m_bound: float

    def evaluate(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        dist = np.abs(x[:, None, :] - self.w1[None, :, :]).sum(axis=2)
        hidden = np.maximum(self.scale1 * dist + self.bias1, 0.0)
        return np.abs(hidden - self.w2).sum(axis=1) + self.bias2


def realize_two_layer_adder(g: DistanceReluSum, bounds) -> TwoLayerAdderNet:
    """Exact two-adder-layer realization of ``g`` on the given box.

    The offset M must dominate |first layer| everywhere on the box; the
    first layer is convex in x, so corner maxima give a rigorous bound,
    doubled for safety.
    """
    bounds = _check_bounds(bounds)
    if len(g.coeffs) == 0:
        raise ValueError("cannot realize an empty term list")
    if g.dim != len(bounds):
        raise ValueError(f"domain dim {len(bounds)} != term dim {g.dim}")
    corners = _corners(bounds)
    scale1 = np.abs(g.coeffs)
    bias1 = np.abs(g.coeffs) * g.offsets
    dist_c = np.abs(corners[:, None, :] - g.centers[None, :, :]).sum(axis=2)
    upper = (scale1 * dist_c + bias1).max(axis=0)         # corner max of L1_i
    bound = max(float(np.maximum(upper, np.abs(bias1)).max()), 0.0)
    m = 2.0 * bound + 1.0
    w2 = np.where(g.coeffs > 0, -m, m)
    bias2 = -len(g.coeffs) * m
    return TwoLayerAdderNet(g.centers.copy(), scale1, bias1, w2, bias2, m)


# ---------------------------------------------------------------------------
# masked linear maps through two adder layers
# ---------------------------------------------------------------------------

@dataclass
class MaskedLinearAdderPair:
    """Two adder layers computing x -> scales[i] * sum_j mask[i,j] * x[j]."""

    w1: np.ndarray       # (2m+2, d)
    bias1: np.ndarray    # (2m+2,)
    w2: np.ndarray       # (m, 2m+2)
    scale2: np.ndarray   # (m,)
    bias2: np.ndarray    # (m,)

    def evaluate(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        z = np.abs(x[:, None, :] - self.w1[None, :, :]).sum(axis=2) + self.bias1
        z = np.maximum(z, 0.0)  # inactive by construction, kept for structure
        pre = np.abs(z[:, None, :] - self.w2[None, :, :]).sum(axis=2)
        return self.scale2 * pre + self.bias2


def masked_linear_as_adders(mask: np.ndarray, scales: np.ndarray,
                            bounds) -> MaskedLinearAdderPair:
    """Realize A_i * sum_j B_ij x_j exactly with 2m+2 hidden adder units.

    Template magnitudes exceed every |x_j| on the box, so each |W - x| sum
    is an affine function of x with +-1 coordinate signs.  Hidden units come
    in negation pairs; the second layer keeps the target pair, the all-ones
    pair, and cancels the rest into constants folded into its bias.
    """
    bounds = _check_bounds(bounds)
    mask = np.asarray(mask)
    scales = np.atleast_1d(np.asarray(scales, dtype=np.float64))
    if not np.all((mask == 0) | (mask == 1)):
        raise ValueError("mask entries must be 0 or 1")
    m, d = mask.shape
    if scales.shape != (m,):
        raise ValueError(f"scales shape {scales.shape} != ({m},)")
    if d != len(bounds):
        raise ValueError(f"domain dim {len(bounds)} != mask dim {d}")
    corners = _corners(bounds)
    x_bound = float(np.abs(corners).max())
    omega1 = 2.0 * x_bound + 1.0

    # first-layer coordinate signs: +1 picks +x_j (template -omega1)
    c1 = np.empty((2 * m + 2, d))
    c1[:m] = 2.0 * mask - 1.0
    c1[m:2 * m] = -(2.0 * mask - 1.0)
    c1[2 * m] = 1.0
    c1[2 * m + 1] = -1.0
    w1 = -c1 * omega1
    lin_bound = np.abs(corners @ c1.T).max(axis=0)
    bias1 = 2.0 * lin_bound

    # hidden values are z_u = lin_u + const_u with constants known exactly
    const1 = d * omega1 + bias1
    z_bound = lin_bound + const1
    omega2 = 2.0 * float(z_bound.max()) + 1.0

    c2 = np.ones((m, 2 * m + 2))
    for i in range(m):
        c2[i, m + i] = -1.0
        c2[i, 2 * m + 1] = -1.0
    w2 = -c2 * omega2
    scale2 = scales / 4.0
    bias2 = -scale2 * (c2 @ const1 + (2 * m + 2) * omega2)
    return MaskedLinearAdderPair(w1, bias1, w2, scale2, bias2)


# ---------------------------------------------------------------------------
# random tent-kernel approximators
# ---------------------------------------------------------------------------

@dataclass
class TentApproximator:
    """phi(x) = (1/n) sum_i coeffs[i] * tent(||x - centers[i]||_1 / eps) / eps^d."""

    centers: np.ndarray   # (n, d)
    coeffs: np.ndarray    # (n,), sgn(f(Z_i)) * ||f||_1 / c0
    epsilon: float
    c0: float

    @property
    def dim(self) -> int:
        return self.centers.shape[1]

    def evaluate(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        dist = np.abs(x[:, None, :] - self.centers[None, :, :]).sum(axis=2)
        bumps = scaled_tent(dist, self.epsilon, self.dim)
        return bumps @ self.coeffs / len(self.coeffs)


def build_bump_approximator(target, n_terms: int, epsilon: float, rng: RngState,
                            bounds, quad_points: int = None) -> TentApproximator:
    """Draw tent centers from density |f|/||f||_1 by rejection sampling.

    ``target`` maps (S, d) points to (S,) values.  ||f||_1 and the rejection
    envelope come from trapezoid quadrature on the box; raises if the target
    is numerically zero there.
    """
    bounds = _check_bounds(bounds)
    if n_terms < 1:
        raise ValueError("need at least one term")
    dim = len(bounds)
    pts, wts = _box_grid(bounds, quad_points or _default_quad_points(dim))
    vals = np.abs(np.asarray(target(pts), dtype=np.float64))
    l1_norm = float(np.dot(vals, wts))
    if l1_norm < 1e-12:
        raise ValueError("target is numerically zero on the sampling box")
    envelope = 1.05 * float(vals.max())

    centers = np.empty((0, dim))
    while len(centers) < n_terms:
        batch = max(4 * n_terms, 64)
        lo = np.array([b[0] for b in bounds])
        hi = np.array([b[1] for b in bounds])
        cand = lo + (hi - lo) * rand_uniform(rng, (batch, dim))
        u = rand_uniform(rng, (batch,))
        accept = u * envelope < np.abs(np.asarray(target(cand)))
        centers = np.concatenate([centers, cand[accept]])[: n_terms]

    c0 = tent_normalizer(dim)
    coeffs = np.sign(np.asarray(target(centers))) * l1_norm / c0
    return TentApproximator(centers, coeffs, float(epsilon), c0)


def mollified_target(target, x0, epsilon: float, bounds,
                     quad_points: int = None) -> float:
    """psi_eps(x0) = integral f(z) * tent_eps(||x0 - z||_1) / c0 dz by quadrature."""
    bounds = _check_bounds(bounds)
    dim = len(bounds)
    pts, wts = _box_grid(bounds, quad_points or _default_quad_points(dim))
    x0 = np.asarray(x0, dtype=np.float64).reshape(1, dim)
    dist = np.abs(pts - x0).sum(axis=1)
    kern = scaled_tent(dist, epsilon, dim)
    c0 = tent_normalizer(dim)
    vals = np.asarray(target(pts), dtype=np.float64)
    return float(np.dot(vals * kern, wts)) / c0


def measure_l1_error(fn_a, fn_b, bounds, n_samples: int, rng: RngState):
    """Monte Carlo estimate of integral |fn_a - fn_b| over the box.

    Returns (estimate, standard error).
    """
    bounds = _check_bounds(bounds)
    if n_samples < 1:
        raise ValueError("need at least one sample")
    dim = len(bounds)
    lo = np.array([b[0] for b in bounds])
    hi = np.array([b[1] for b in bounds])
    pts = lo + (hi - lo) * rand_uniform(rng, (n_samples, dim))
    gaps = np.abs(np.asarray(fn_a(pts), dtype=np.float64)
                  - np.asarray(fn_b(pts), dtype=np.float64))
    vol = box_volume(bounds)
    est = vol * float(gaps.mean())
    stderr = vol * float(gaps.std(ddof=1)) / np.sqrt(n_samples) if n_samples > 1 else 0.0
    return est, stderr


# ---------------------------------------------------------------------------
# named target functions for the sweep harness
# ---------------------------------------------------------------------------

@dataclass
class ApproxTarget:
    fn: callable
    bounds: list
    epsilon: float  # default bandwidth for sweeps


def _tent_1d(pts):
    return tent_kernel(pts[:, 0])


def _gauss_2d(pts):
    return np.exp(-0.5 * (pts ** 2).sum(axis=1))


def _sine_product_2d(pts):
    return np.sin(np.pi * pts[:, 0]) * np.sin(np.pi * pts[:, 1])


TARGETS = {
    "tent1d": ApproxTarget(_tent_1d, [(-2.0, 2.0)], 0.25),
    "gauss2d": ApproxTarget(_gauss_2d, [(-3.0, 3.0), (-3.0, 3.0)], 0.5),
    "sineprod2d": ApproxTarget(_sine_product_2d, [(-1.0, 1.0), (-1.0, 1.0)], 0.3),
}
