"""Selective-scan recurrence and the four-direction 2-D scan.

The per-step recurrence is h_t = exp(delta*A) h_{t-1} + delta*B_t*x_t,
y_t = C_t . h_t + skip * x_t, with A diagonal and strictly negative via
the -exp(a_log) parameterization and delta > 0 via softplus. The
sequential kernels are numba-compiled; a naive unrolled reference
implementation lives alongside for oracle tests.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from numba import njit

from .tensor import (
    Tensor,
    ShapeError,
    _needs_grad,
    _node,
    concat,
    exp,
    matmul,
    narrow,
    reshape,
    scale,
    softplus,
    take_last,
)

DIRECTIONS = ("H-FWD", "V-FWD", "H-BWD", "V-BWD")


@dataclass
class ScanParams:
    """Learnable bundle for one scan direction.

    a_log: (D, N), state matrix is -exp(a_log) elementwise.
    w_b, w_c: (N, D) input-dependent projections for B_t, C_t.
    w_delta: (D, D) and b_delta: (D, 1) pre-softplus step-size projection.
    skip: (D,) per-channel residual gain.
    """

    a_log: Tensor
    w_b: Tensor
    w_c: Tensor
    w_delta: Tensor
    b_delta: Tensor
    skip: Tensor

    @property
    def d_inner(self):
        return self.a_log.shape[0]

    @property
    def state_dim(self):
        return self.a_log.shape[1]

    def tensors(self):
        return {
            "a_log": self.a_log,
            "w_b": self.w_b,
            "w_c": self.w_c,
            "w_delta": self.w_delta,
            "b_delta": self.b_delta,
            "skip": self.skip,
        }


def init_scan_params(d_inner, state_dim, rng):
    """Stable initialization: softplus(b_delta) ~ 0.1, A rows -1..-N."""
    a_log = np.log(np.tile(np.arange(1, state_dim + 1, dtype=np.float64), (d_inner, 1)))
    scale_in = 1.0 / np.sqrt(d_inner)
    return ScanParams(
        a_log=Tensor(a_log, requires_grad=True),
        w_b=Tensor(rng.normal(0, scale_in, (state_dim, d_inner)), requires_grad=True),
        w_c=Tensor(rng.normal(0, scale_in, (state_dim, d_inner)), requires_grad=True),
        w_delta=Tensor(rng.normal(0, scale_in, (d_inner, d_inner)), requires_grad=True),
        b_delta=Tensor(np.full((d_inner, 1), _inv_softplus(0.1)), requires_grad=True),
        skip=Tensor(np.ones(d_inner), requires_grad=True),
    )


def _inv_softplus(y):
    return float(np.log(np.expm1(y)))


def discretize(a_row, delta):
    """Zero-order-hold step: returns (exp(delta*a_row), delta)."""
    if delta <= 0:
        raise ValueError(f"delta must be positive, got {delta}")
    if a_row >= 0:
        raise ValueError(f"state coefficient must be negative, got {a_row}")
    return float(np.exp(delta * a_row)), float(delta)


# -- sequential kernels --------------------------------------------------


@njit(cache=True)
def _scan_fwd(x, delta, a_bar, b, c, skip):
    d_inner, length = x.shape
    n_state = a_bar.shape[1]
    h_all = np.zeros((d_inner, n_state, length))
    y = np.empty((d_inner, length))
    for d in range(d_inner):
        for t in range(length):
            y[d, t] = skip[d] * x[d, t]
        for n in range(n_state):
            h = 0.0
            for t in range(length):
                h = a_bar[d, n, t] * h + delta[d, t] * b[n, t] * x[d, t]
                h_all[d, n, t] = h
                y[d, t] += c[n, t] * h
    return y, h_all


@njit(cache=True)
def _scan_bwd(x, delta, a, a_bar, b, c, skip, h_all, gy):
    d_inner, length = x.shape
    n_state = a.shape[1]
    gx = np.zeros_like(x)
    gdelta = np.zeros_like(delta)
    ga = np.zeros_like(a)
    gb = np.zeros_like(b)
    gc = np.zeros_like(c)
    gskip = np.zeros_like(skip)
    for d in range(d_inner):
        for t in range(length):
            gskip[d] += gy[d, t] * x[d, t]
            gx[d, t] += gy[d, t] * skip[d]
        for n in range(n_state):
            ghn = 0.0
            for t in range(length - 1, -1, -1):
                g = gy[d, t]
                dt = delta[d, t]
                gc[n, t] += g * h_all[d, n, t]
                ghn += g * c[n, t]
                ab = a_bar[d, n, t]
                h_prev = h_all[d, n, t - 1] if t > 0 else 0.0
                # h = a_bar*h_prev + dt*b*x
                ga[d, n] += ghn * h_prev * ab * dt
                gdelta[d, t] += ghn * (h_prev * ab * a[d, n] + b[n, t] * x[d, t])
                gb[n, t] += ghn * dt * x[d, t]
                gx[d, t] += ghn * dt * b[n, t]
                ghn *= ab
    return gx, gdelta, ga, gb, gc, gskip


def _scan_core(x, delta, a, b, c, skip):
    """Autodiff node around the compiled recurrence."""
    # hoist the zero-order-hold decay out of the sequential kernels
    a_bar = np.exp(delta.data[:, None, :] * a.data[:, :, None])
    y, h_all = _scan_fwd(x.data, delta.data, a_bar, b.data, c.data, skip.data)
    parents = (x, delta, a, b, c, skip)

    def bwd(g):
        gx, gdelta, ga, gb, gc, gskip = _scan_bwd(
            x.data, delta.data, a.data, a_bar, b.data, c.data, skip.data, h_all, g
        )
        for t, gt in zip(parents, (gx, gdelta, ga, gb, gc, gskip)):
            if _needs_grad(t):
                t._accum(gt)

    return _node(y, parents, bwd)


def s6_scan(x, params):
    """Run the selective scan over a (D_inner, L) sequence Tensor."""
    if x.data.ndim != 2:
        raise ShapeError(f"s6_scan expects (D, L), got {x.shape}")
    if x.data.shape[1] < 1:
        raise ShapeError("s6_scan: empty sequence")
    a = scale(exp(params.a_log), -1.0)
    delta = softplus(matmul(params.w_delta, x) + params.b_delta)
    b = matmul(params.w_b, x)
    c = matmul(params.w_c, x)
    return _scan_core(x, delta, a, b, c, params.skip)


def s6_scan_reference(x, params):
    """Naive unrolled recurrence on plain arrays; the test oracle."""
    x = np.asarray(x, dtype=np.float64)
    d_inner, length = x.shape
    a = -np.exp(params.a_log.data)
    delta = np.logaddexp(0.0, params.w_delta.data @ x + params.b_delta.data)
    b = params.w_b.data @ x
    c = params.w_c.data @ x
    n_state = a.shape[1]
    y = np.empty_like(x)
    h = np.zeros((d_inner, n_state))
    for t in range(length):
        h = np.exp(delta[:, t : t + 1] * a) * h + (
            delta[:, t : t + 1] * b[:, t][None, :] * x[:, t : t + 1]
        )
        y[:, t] = (h * c[:, t][None, :]).sum(axis=1) + params.skip.data * x[:, t]
    return y


# -- four-direction 2-D scan ---------------------------------------------


def direction_order(direction, h, w):
    """Flat row-major indices visited by the given traversal."""
    if direction == "H-FWD":
        order = np.arange(h * w)
    elif direction == "V-FWD":
        order = (np.arange(h * w) % h) * w + np.arange(h * w) // h
    elif direction == "H-BWD":
        order = np.arange(h * w)[::-1].copy()
    elif direction == "V-BWD":
        order = ((np.arange(h * w) % h) * w + np.arange(h * w) // h)[::-1].copy()
    else:
        raise ValueError(f"unknown direction {direction!r}")
    return order


@dataclass
class DirectionalSequence:
    direction: str
    order: np.ndarray  # sequence index t -> row-major flat position
    values: Tensor  # (D_inner, L)
    grid: tuple  # (h, w)


def ss2d_expand(x):
    """Unfold a 1xDxHxW Tensor into the four directional sequences."""
    if x.data.ndim != 4 or x.data.shape[0] != 1:
        raise ShapeError(f"ss2d_expand expects 1xDxHxW, got {x.shape}")
    _, d, h, w = x.data.shape
    flat = reshape(x, (d, h * w))
    seqs = []
    for direction in DIRECTIONS:
        order = direction_order(direction, h, w)
        seqs.append(
            DirectionalSequence(direction, order, take_last(flat, order), (h, w))
        )
    return seqs


def ss2d_merge(seqs):
    """Scatter each sequence back to its grid and sum the four maps."""
    grids = {s.grid for s in seqs}
    if len(grids) != 1:
        raise ShapeError(f"ss2d_merge: mismatched grids {sorted(grids)}")
    h, w = seqs[0].grid
    total = None
    for s in seqs:
        inv = np.argsort(s.order)
        aligned = take_last(s.values, inv)
        total = aligned if total is None else total + aligned
    d = seqs[0].values.shape[0]
    return reshape(total, (1, d, h, w))


def ss2d(x, params):
    """Four-direction scan over an NxDxHxW Tensor; one ScanParams each."""
    if len(params) != 4:
        raise ValueError("ss2d needs 4 ScanParams, one per direction")
    n = x.data.shape[0]
    outs = []
    for i in range(n):
        sample = narrow(x, 0, i, 1)
        seqs = ss2d_expand(sample)
        scanned = [
            DirectionalSequence(s.direction, s.order, s6_scan(s.values, p), s.grid)
            for s, p in zip(seqs, params)
        ]
        outs.append(ss2d_merge(scanned))
    return outs[0] if n == 1 else concat(outs, axis=0)


# -- benchmark -----------------------------------------------------------


def bench_scan(lengths, d_inner=4, state_dim=8, repeats=3, seed=0):
    """Time the compiled forward scan; returns (rows, loglog_slope).

    Rows are (L, D_inner, N, nanos_per_scan).
    """
    rng = np.random.default_rng(seed)
    params = init_scan_params(d_inner, state_dim, rng)
    # trigger JIT outside the timed region
    warm = Tensor(rng.normal(0, 1, (d_inner, 8)))
    s6_scan(warm, params)
    rows = []
    means = []
    for length in lengths:
        x = Tensor(rng.normal(0, 1, (d_inner, length)))
        times = []
        for _ in range(repeats):
            t0 = time.perf_counter_ns()
            s6_scan(x, params)
            times.append(time.perf_counter_ns() - t0)
            rows.append((length, d_inner, state_dim, times[-1]))
        means.append(np.mean(times))
    slope = float(
        np.polyfit(np.log(np.asarray(lengths, float)), np.log(means), 1)[0]
    )
    return rows, slope
