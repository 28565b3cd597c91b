"""Executable checks of the training-dynamics claims, plus the repo-wide
central-difference gradient oracle.

The two descent simulations run the one-dimensionalized problem
min_f ||x - f| - y| in its y < 0 reduction (coordinates decouple there):

* sign descent  f <- f - alpha * sgn(f - x) converges exactly when
  (x_i - f_i) / alpha is an integer for every coordinate, and otherwise ends
  in a two-cycle straddling x with amplitude alpha;
* full-precision descent  f <- f - alpha * (f - x) contracts monotonically
  for alpha < 1 with closed-form iterates x - (x - f0)(1 - alpha)^j.

The variance report compares empirical conv/adder pre-normalization output
variances against d^2 c_in Var[X] Var[F] for conv; for the adder side only
the ordering/ratio claim is asserted, since |X - F| for Gaussians has exact
variance (1 - 2/pi)(Var[X] + Var[F]) per summand.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import layers as L
from . import netgraph as N
from .tensor import RngState, rand_uniform, randn_seeded, reduce_l2_norm

CONVERGED = "converged"
OSCILLATING = "oscillating"


@dataclass
class ConvergenceTrace:
    iterates: list                 # f after each step, f[0] is the start
    objective: list                # | ||x - f||_1 - y | per step
    verdict: str                   # converged | oscillating
    final_gap: float               # ||x - f||_1 at the end
    amplitude: float               # terminal per-coordinate oscillation size


def _trace_from_history(history, x, y, tol=1e-12):
    objective = [float(abs(np.abs(x - f).sum() - y)) for f in history]
    final_gap = float(np.abs(x - history[-1]).sum())
    if final_gap < tol:
        verdict, amplitude = CONVERGED, 0.0
    else:
        verdict = OSCILLATING
        amplitude = (float(np.abs(history[-1] - history[-2]).max())
                     if len(history) >= 2 else 0.0)
    return ConvergenceTrace(history, objective, verdict, final_gap, amplitude)


def simulate_sign_descent(x, f0, y: float, alpha: float,
                          max_iters: int = 200) -> ConvergenceTrace:
    """Gradient descent with the sign surrogate on each |x_i - f_i| term."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    f = np.atleast_1d(np.asarray(f0, dtype=np.float64)).copy()
    history = [f.copy()]
    for _ in range(max_iters):
        step = np.sign(f - x)
        if not step.any():
            break
        f -= alpha * step
        history.append(f.copy())
    return _trace_from_history(history, x, y)


def simulate_full_descent(x, f0, y: float, alpha: float,
                          max_iters: int = 200) -> ConvergenceTrace:
    """Gradient descent with the full-precision surrogate f <- f - a(f - x)."""
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    f = np.atleast_1d(np.asarray(f0, dtype=np.float64)).copy()
    history = [f.copy()]
    for _ in range(max_iters):
        if np.abs(x - f).sum() < 1e-15:
            break
        f = f - alpha * (f - x)
        history.append(f.copy())
    return _trace_from_history(history, x, y)


def sign_convergence_criterion(x: float, f0: float, alpha_num: int,
                               alpha_den: int, scale: int = 8) -> bool:
    """Exact integrality test (x - f0)/alpha in Z on a rational grid.

    x and f0 must be multiples of 1/scale and alpha = alpha_num/alpha_den
    with alpha_den dividing scale, so everything is exact in binary floats.
    """
    diff = round((x - f0) * scale)
    alpha_scaled = round(alpha_num * scale / alpha_den)
    if alpha_scaled == 0:
        raise ValueError("alpha too small for the grid scale")
    return diff % alpha_scaled == 0


# ---------------------------------------------------------------------------
# output-variance comparison
# ---------------------------------------------------------------------------

@dataclass
class VarianceReport:
    conv_empirical: float
    conv_predicted: float       # d^2 c_in Var[X] Var[F]
    adder_empirical: float
    adder_heuristic: float      # sqrt(pi/2) d^2 c_in (Var[X] + Var[F]), not asserted
    ratio: float                # adder / conv empirical

    @property
    def conv_relative_error(self) -> float:
        return abs(self.conv_empirical - self.conv_predicted) / self.conv_predicted


def variance_report(d: int, c_in: int, c_out: int, var_x: float, var_f: float,
                    batch: int, rng: RngState) -> VarianceReport:
    """Empirical pre-normalization output variance of conv vs l1-adder layers.

    Each of ``batch`` samples is a fresh d x d x c_in patch hitting the same
    filter bank once, so output elements pool batch * c_out draws.
    """
    if batch * c_out < 10_000:
        raise ValueError("need at least 10^4 output elements for a stable variance")
    x = randn_seeded(rng, (batch, d, d, c_in), stddev=np.sqrt(var_x))
    filters = randn_seeded(rng, (d, d, c_in, c_out), stddev=np.sqrt(var_f))
    conv_out = L.conv_forward(L.ConvLayerParams(filters, d), x)
    adder_out = L.adder_forward(L.AdderLayerParams(filters, d, p=1.0), x)
    conv_var = float(conv_out.var())
    adder_var = float(adder_out.var())
    k = d * d * c_in
    predicted = k * var_x * var_f
    heuristic = np.sqrt(np.pi / 2.0) * k * (var_x + var_f)
    ratio = adder_var / conv_var if conv_var > 0 else np.inf
    return VarianceReport(conv_var, predicted, adder_var, heuristic, ratio)


# ---------------------------------------------------------------------------
# per-layer gradient norms at initialization
# ---------------------------------------------------------------------------

def layer_gradient_norms(net: N.Network, batch, labels) -> list:
    """l2 norm of each weighted layer's filter gradient on one batch."""
    _, grads = N.loss_and_grads(net, batch, labels, training=True,
                                update_running=False)
    norms = []
    for ref, g in zip(net.param_refs(), grads):
        if ref.kind in ("adder_filter", "conv_filter"):
            norms.append((ref.layer_index, reduce_l2_norm(g)))
    return norms


def grad_norm_table(adder_net: N.Network, conv_net: N.Network, batch, labels):
    """Side-by-side first-iteration filter-gradient norms of a matched pair.

    Returns rows (layer_position, adder_norm, conv_norm); the architectures
    must have the same number of weighted layers.
    """
    a = layer_gradient_norms(adder_net, batch, labels)
    c = layer_gradient_norms(conv_net, batch, labels)
    if len(a) != len(c):
        raise ValueError("network pair has mismatched weighted-layer counts")
    return [(i, an, cn) for i, ((_, an), (_, cn)) in enumerate(zip(a, c))]


# ---------------------------------------------------------------------------
# central-difference gradient oracle
# ---------------------------------------------------------------------------

@dataclass
class FiniteDiffReport:
    max_rel_error: float
    worst_coordinate: tuple        # (param_index, flat_index)
    n_checked: int
    n_skipped: int
    passed: bool
    skipped: list = field(default_factory=list)


def finite_diff_check(loss_fn, params: list, implemented_grads: list,
                      rng: RngState, step: float = 1e-6, tolerance: float = 1e-4,
                      max_coords_per_param: int = 40,
                      skip_predicate=None) -> FiniteDiffReport:
    """Compare implemented gradients against central differences.

    ``loss_fn`` must be a pure function of the arrays in ``params`` (they are
    perturbed in place and restored).  A random subset of coordinates per
    parameter is probed; relative error uses |a - b| / max(|a|, |b|, 1e-8).
    ``skip_predicate(param_index, flat_index)`` can exclude known
    non-differentiable coordinates (reported, not counted as failures).
    """
    if step <= 0:
        raise ValueError("step must be positive")
    max_rel = 0.0
    worst = (-1, -1)
    n_checked = 0
    skipped = []
    for pi, (theta, grad) in enumerate(zip(params, implemented_grads)):
        flat = theta.reshape(-1)
        gflat = np.asarray(grad).reshape(-1)
        size = flat.size
        if size <= max_coords_per_param:
            coords = np.arange(size)
        else:
            u = rand_uniform(rng, (max_coords_per_param,))
            coords = np.unique((u * size).astype(np.int64))
        for ci in coords:
            if skip_predicate is not None and skip_predicate(pi, int(ci)):
                skipped.append((pi, int(ci)))
                continue
            orig = flat[ci]
            flat[ci] = orig + step
            up = loss_fn()
            flat[ci] = orig - step
            down = loss_fn()
            flat[ci] = orig
            if not (np.isfinite(up) and np.isfinite(down)):
                raise FloatingPointError("non-finite loss during finite differences")
            numeric = (up - down) / (2.0 * step)
            rel = abs(numeric - gflat[ci]) / max(abs(numeric), abs(gflat[ci]), 1e-8)
            n_checked += 1
            if rel > max_rel:
                max_rel = rel
                worst = (pi, int(ci))
    return FiniteDiffReport(max_rel, worst, n_checked, len(skipped),
                            max_rel <= tolerance, skipped)


# ---------------------------------------------------------------------------
# layer-by-layer oracle suite
# ---------------------------------------------------------------------------

def _margin_pairs(rng, x_shape, f_shape, kernel, margin=1e-3):
    """Random input/filter pair with no |X - F| term closer than margin to a
    kink, so central differences stay on one linear piece."""
    from .tensor import im2col_batch
    for _ in range(50):
        x = randn_seeded(rng, x_shape)
        f = randn_seeded(rng, f_shape)
        cols = im2col_batch(x, kernel)
        gap = np.abs(cols[:, :, None] - f.reshape(-1, f.shape[-1])[None]).min()
        if gap > margin:
            return x, f
    raise RuntimeError("could not sample a kink-free configuration")


def gradient_oracle_suite(seed: int = 0, coords: int = 100, step: float = 1e-6,
                          tolerance: float = 1e-4):
    """Central-difference checks for every layer with exact gradients, plus
    the factor-two relation of the p=2 adder surrogate.

    Returns rows (component, max_rel_error, n_checked, tolerance, passed).
    """
    rows = []

    def run(name, loss_fn, params, grads, rng, tol=tolerance, skip=None):
        report = finite_diff_check(loss_fn, params, grads, rng, step=step,
                                   tolerance=tol,
                                   max_coords_per_param=max(4, coords // len(params)),
                                   skip_predicate=skip)
        rows.append((name, report.max_rel_error, report.n_checked, tol,
                     report.passed))

    # reference convolution: exact gradients for filters and input
    rng = RngState(seed)
    x = randn_seeded(rng, (2, 6, 6, 3))
    params = L.ConvLayerParams(randn_seeded(rng, (3, 3, 3, 4)), 3)
    up = randn_seeded(rng, (2, 4, 4, 4))
    d_f, dx = L.conv_grad(params, x, up)
    run("conv", lambda: float((L.conv_forward(params, x) * up).sum()),
        [params.filters, x], [d_f, dx], rng)

    # batch normalization through batch statistics
    rng = RngState(seed + 1)
    bx = randn_seeded(rng, (8, 5)) * 2.0 + 0.5
    bn = L.init_bn_params(5)
    bn.gamma[:] = randn_seeded(rng, (5,)) * 0.5 + 1.0
    bn.beta[:] = randn_seeded(rng, (5,)) * 0.3
    bup = randn_seeded(rng, (8, 5))
    dxb, dg, db = L.bn_backward(bn, bx, bup)
    run("batchnorm",
        lambda: float((L.bn_forward(bn, bx, training=True, update_running=False)
                       * bup).sum()),
        [bx, bn.gamma, bn.beta], [dxb, dg, db], rng)

    # ReLU away from the kink at 0
    rng = RngState(seed + 2)
    rx = randn_seeded(rng, (6, 7))
    rx = np.where(np.abs(rx) < 0.05, rx + 0.1, rx)
    rup = randn_seeded(rng, (6, 7))
    run("relu", lambda: float((L.relu(rx) * rup).sum()),
        [rx], [L.relu(rx, rup)], rng)

    # softmax cross entropy
    rng = RngState(seed + 3)
    logits = randn_seeded(rng, (8, 5))
    labels = (rand_uniform(rng, (8,)) * 5).astype(np.int64)
    run("softmax_ce", lambda: L.softmax_cross_entropy(logits, labels)[0],
        [logits], [L.softmax_cross_entropy(logits, labels)[1]], rng, tol=1e-5)

    # sigmoid binary cross entropy
    rng = RngState(seed + 4)
    z = randn_seeded(rng, (12,)) * 2.0
    yb = (rand_uniform(rng, (12,)) > 0.5).astype(np.int64)
    run("sigmoid_bce", lambda: L.sigmoid_bce(z, yb)[0],
        [z], [L.sigmoid_bce(z, yb)[1]], rng, tol=1e-5)

    # p=2 adder: true gradient is exactly twice the training surrogate
    rng = RngState(seed + 5)
    ax = randn_seeded(rng, (2, 5, 5, 2))
    ap = L.AdderLayerParams(randn_seeded(rng, (3, 3, 2, 3)), 3, p=2.0)
    aup = randn_seeded(rng, (2, 3, 3, 3))
    sf = L.adder_grad_filters(ap, ax, aup)
    sx = L.adder_grad_input(ap, ax, aup)
    run("adder_p2_factor2",
        lambda: float((L.adder_forward(ap, ax) * aup).sum()),
        [ap.filters, ax], [2.0 * sf, 2.0 * sx], rng)

    # p=1 adder: input surrogate and sign-mode filter gradient are the true
    # l1 subgradients away from kinks
    rng = RngState(seed + 6)
    lx, lf = _margin_pairs(rng, (1, 5, 5, 2), (3, 3, 2, 3), 3)
    lp = L.AdderLayerParams(lf, 3, p=1.0)
    lup = randn_seeded(rng, (1, 3, 3, 3))
    gin = L.adder_grad_input(lp, lx, lup)
    gfs = L.adder_grad_filters(lp, lx, lup, mode=L.GradientMode.SIGN)
    run("adder_p1_subgradient",
        lambda: float((L.adder_forward(lp, lx) * lup).sum()),
        [lx, lp.filters], [gin, gfs], rng, tol=1e-5)

    return rows
