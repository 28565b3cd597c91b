"""Compute kernels for lp-distance layers.

The hot loops of an adder layer are GEMM-shaped:

    forward        Y[r, t] = -sum_k |X[r, k] - F[k, t]|**p
    filter grad    G[k, t] =  sum_r U[r, t] * (X[r, k] - F[k, t])      (or sgn)
    input grad    Gx[r, k] =  sum_t U[r, t] * sgn(F - X) * |F - X|**(p-1)

where X is the im2col patch matrix, F the flattened filter bank and U the
upstream gradient.  p == 2 reduces to BLAS matmuls, p == 1 needs only
abs/sign, and fractional p in between is dominated by pow().  libm pow is
scalar and too slow for training, so the fractional kernels inline a
branch-free polynomial pow (exp2/log2 range reduction, ~1e-13 relative
accuracy) that LLVM auto-vectorizes under numba.

Every kernel computes each output element with a fixed serial reduction
order, so results are deterministic and independent of thread count.

Set ADDERNET_NO_NUMBA=1 to force the pure-numpy fallbacks (slower, same
results up to float rounding).
"""

from __future__ import annotations

import os

import numpy as np

_USE_NUMBA = os.environ.get("ADDERNET_NO_NUMBA", "") != "1"

if _USE_NUMBA:
    try:
        os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")
        from numba import njit, prange, types
        from numba.extending import intrinsic
        from llvmlite import ir
    except Exception:  # pragma: no cover - environment without numba
        _USE_NUMBA = False

_SIGN_GRAD_BLOCKS = 64  # fixed block count keeps the merge order thread-independent
_FALLBACK_TILE = 8192


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

if _USE_NUMBA:

    @intrinsic
    def _f64_bits(typingctx, val):
        # reinterpret a float64 as int64 (single LLVM bitcast, vectorizes)
        sig = types.int64(types.float64)

        def codegen(context, builder, signature, args):
            return builder.bitcast(args[0], ir.IntType(64))

        return sig, codegen

    @intrinsic
    def _bits_f64(typingctx, val):
        sig = types.float64(types.int64)

        def codegen(context, builder, signature, args):
            return builder.bitcast(args[0], ir.DoubleType())

        return sig, codegen

    _LN2 = 0.6931471805599453
    _INV_LN2 = 1.4426950408889634
    _SQRT2 = 1.4142135623730951

    @njit(inline="always", fastmath=True)
    def _pow_pos(u, q):
        # u**q for u >= 0 and 0 < q <= 2, branch-free so the surrounding
        # loops vectorize.  Range-reduce u = m * 2^e with m in [sqrt(.5),
        # sqrt(2)), take log2 via the atanh series, exp2 via a Taylor
        # polynomial, and rescale through the exponent bits.
        dead = u < 1e-280
        us = max(u, 1e-280)
        bits = _f64_bits(us)
        e = np.float64(((bits >> 52) & 0x7FF) - 1023)
        m = _bits_f64((bits & 0x000FFFFFFFFFFFFF) | 0x3FF0000000000000)
        big = m >= _SQRT2
        m = m * 0.5 if big else m
        e = e + 1.0 if big else e
        t = (m - 1.0) / (m + 1.0)
        t2 = t * t
        s = 1.0 / 21.0
        s = s * t2 + 1.0 / 19.0
        s = s * t2 + 1.0 / 17.0
        s = s * t2 + 1.0 / 15.0
        s = s * t2 + 1.0 / 13.0
        s = s * t2 + 1.0 / 11.0
        s = s * t2 + 1.0 / 9.0
        s = s * t2 + 1.0 / 7.0
        s = s * t2 + 1.0 / 5.0
        s = s * t2 + 1.0 / 3.0
        s = s * t2 + 1.0
        y = q * (e + 2.0 * _INV_LN2 * t * s)
        dead = dead or (y < -1020.0)
        y = max(y, -1020.0)
        n = np.floor(y + 0.5)
        w = (y - n) * _LN2
        pe = 1.0 / 87178291200.0
        pe = pe * w + 1.0 / 6227020800.0
        pe = pe * w + 1.0 / 479001600.0
        pe = pe * w + 1.0 / 39916800.0
        pe = pe * w + 1.0 / 3628800.0
        pe = pe * w + 1.0 / 362880.0
        pe = pe * w + 1.0 / 40320.0
        pe = pe * w + 1.0 / 5040.0
        pe = pe * w + 1.0 / 720.0
        pe = pe * w + 1.0 / 120.0
        pe = pe * w + 1.0 / 24.0
        pe = pe * w + 1.0 / 6.0
        pe = pe * w + 0.5
        pe = pe * w + 1.0
        pe = pe * w + 1.0
        r = pe * _bits_f64((np.int64(n) + 1023) << 52)
        return 0.0 if dead else r

    @njit(parallel=True, fastmath=True, cache=True)
    def _forward_l1(cols, ft, out):
        rows, k_dim = cols.shape
        t_dim = ft.shape[0]
        for r in prange(rows):
            for t in range(t_dim):
                acc = 0.0
                for k in range(k_dim):
                    acc += abs(cols[r, k] - ft[t, k])
                out[r, t] = -acc

    @njit(parallel=True, fastmath=True, cache=True)
    def _forward_frac(cols, ft, p, out):
        rows, k_dim = cols.shape
        t_dim = ft.shape[0]
        for r in prange(rows):
            for t in range(t_dim):
                acc = 0.0
                for k in range(k_dim):
                    acc += _pow_pos(abs(cols[r, k] - ft[t, k]), p)
                out[r, t] = -acc

    @njit(parallel=True, fastmath=True, cache=True)
    def _grad_input_l1(cols, ft, up, out):
        # k innermost: unit-stride access on cols/ft/out rows
        rows, k_dim = cols.shape
        t_dim = ft.shape[0]
        for r in prange(rows):
            for k in range(k_dim):
                out[r, k] = 0.0
            for t in range(t_dim):
                u = up[r, t]
                for k in range(k_dim):
                    d = ft[t, k] - cols[r, k]
                    s = 1.0 if d > 0.0 else (-1.0 if d < 0.0 else 0.0)
                    out[r, k] += u * s

    @njit(parallel=True, fastmath=True, cache=True)
    def _grad_input_frac(cols, ft, up, q, out):
        # q = p - 1 in (0, 1); signed magnitude sgn(d) * |d|**q
        rows, k_dim = cols.shape
        t_dim = ft.shape[0]
        for r in prange(rows):
            for k in range(k_dim):
                out[r, k] = 0.0
            for t in range(t_dim):
                u = up[r, t]
                for k in range(k_dim):
                    d = ft[t, k] - cols[r, k]
                    s = 1.0 if d > 0.0 else (-1.0 if d < 0.0 else 0.0)
                    out[r, k] += u * s * _pow_pos(abs(d), q)

    @njit(parallel=True, fastmath=True, cache=True)
    def _grad_filters_sign(cols, ft, up, blocks):
        rows, k_dim = cols.shape
        t_dim = ft.shape[0]
        n_blocks = blocks.shape[0]
        step = (rows + n_blocks - 1) // n_blocks
        for b in prange(n_blocks):
            lo = b * step
            hi = min(rows, lo + step)
            for r in range(lo, hi):
                for t in range(t_dim):
                    u = up[r, t]
                    if u != 0.0:
                        for k in range(k_dim):
                            d = cols[r, k] - ft[t, k]
                            s = 1.0 if d > 0.0 else (-1.0 if d < 0.0 else 0.0)
                            blocks[b, k, t] += u * s


# ---------------------------------------------------------------------------
# pure-numpy fallbacks (tiled to bound temporary memory)
# ---------------------------------------------------------------------------

def _signed_pow(d: np.ndarray, q: float) -> np.ndarray:
    # sgn(d) * |d|**q, with 0**0-style terms defined as 0
    mag = np.abs(d) ** q if q != 1.0 else np.abs(d)
    return np.sign(d) * mag


def _np_forward(cols, ft, p, out):
    for lo in range(0, cols.shape[0], _FALLBACK_TILE):
        hi = min(cols.shape[0], lo + _FALLBACK_TILE)
        d = np.abs(cols[lo:hi, None, :] - ft[None, :, :])
        if p == 1.0:
            out[lo:hi] = -d.sum(axis=2)
        else:
            out[lo:hi] = -(d ** p).sum(axis=2)


def _np_grad_input(cols, ft, up, p, out):
    for lo in range(0, cols.shape[0], _FALLBACK_TILE):
        hi = min(cols.shape[0], lo + _FALLBACK_TILE)
        d = ft[None, :, :] - cols[lo:hi, None, :]
        w = np.sign(d) if p == 1.0 else _signed_pow(d, p - 1.0)
        out[lo:hi] = np.einsum("rt,rtk->rk", up[lo:hi], w)


def _np_grad_filters_sign(cols, ft, up):
    out = np.zeros((cols.shape[1], ft.shape[0]))
    for lo in range(0, cols.shape[0], _FALLBACK_TILE):
        hi = min(cols.shape[0], lo + _FALLBACK_TILE)
        s = np.sign(cols[lo:hi, :, None] - ft.T[None, :, :])
        out += np.einsum("rt,rkt->kt", up[lo:hi], s)
    return out


# ---------------------------------------------------------------------------
# public dispatch
# ---------------------------------------------------------------------------

def using_numba() -> bool:
    return _USE_NUMBA


def lp_distance_forward(cols: np.ndarray, filters_kt: np.ndarray, p: float) -> np.ndarray:
    """Negated lp distances: out[r, t] = -sum_k |cols[r,k] - filters_kt[k,t]|**p."""
    cols = np.ascontiguousarray(cols)
    if p == 2.0:
        # -(|x|^2 - 2 x.f + |f|^2), all matmuls
        x2 = np.einsum("rk,rk->r", cols, cols)
        f2 = np.einsum("kt,kt->t", filters_kt, filters_kt)
        return 2.0 * (cols @ filters_kt) - x2[:, None] - f2[None, :]
    ft = np.ascontiguousarray(filters_kt.T)
    out = np.empty((cols.shape[0], ft.shape[0]))
    if _USE_NUMBA:
        if p == 1.0:
            _forward_l1(cols, ft, out)
        else:
            _forward_frac(cols, ft, float(p), out)
    else:
        _np_forward(cols, ft, float(p), out)
    return out


def lp_grad_filters(cols: np.ndarray, filters_kt: np.ndarray, upstream: np.ndarray,
                    sign_mode: bool = False) -> np.ndarray:
    """Filter gradient in patch space.

    Full-precision mode returns sum_r U[r,t] * (X[r,k] - F[k,t]); sign mode
    replaces the difference with its sign.
    """
    cols = np.ascontiguousarray(cols)
    upstream = np.ascontiguousarray(upstream)
    if not sign_mode:
        return cols.T @ upstream - filters_kt * upstream.sum(axis=0)[None, :]
    ft = np.ascontiguousarray(filters_kt.T)
    if _USE_NUMBA:
        blocks = np.zeros((_SIGN_GRAD_BLOCKS, cols.shape[1], ft.shape[0]))
        _grad_filters_sign(cols, ft, upstream, blocks)
        return blocks.sum(axis=0)
    return _np_grad_filters_sign(cols, ft, upstream)


def lp_grad_input_cols(cols: np.ndarray, filters_kt: np.ndarray, upstream: np.ndarray,
                       p: float) -> np.ndarray:
    """Input gradient in patch space: sum_t U[r,t] * sgn(F-X) * |F-X|**(p-1)."""
    cols = np.ascontiguousarray(cols)
    upstream = np.ascontiguousarray(upstream)
    if p == 2.0:
        return upstream @ filters_kt.T - cols * upstream.sum(axis=1)[:, None]
    ft = np.ascontiguousarray(filters_kt.T)
    out = np.empty_like(cols)
    if _USE_NUMBA:
        if p == 1.0:
            _grad_input_l1(cols, ft, upstream, out)
        else:
            _grad_input_frac(cols, ft, upstream, float(p) - 1.0, out)
    else:
        _np_grad_input(cols, ft, upstream, float(p), out)
    return out
