"""The two feature-enhancement blocks.

DualStreamBlock: channel split into a stacked-conv local branch and a
four-direction scan global branch, each rescaled by a shared channel
attention, then concat + channel shuffle + residual.

MultiScaleContextBlock: four dilated convolutions, channel shuffle,
stochastically pooled channel attention (train) or global-average
attention (inference), residual modulation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .scan import ScanParams, init_scan_params, ss2d


def conv_w(rng, cout, cin, k, gain=2.0):
    """Fan-in-scaled init; gain 2 suits a following ReLU, 1 a linear map."""
    fan_in = cin * k * k
    w = Tensor(
        rng.normal(0, np.sqrt(gain / fan_in), (cout, cin, k, k)), requires_grad=True
    )
    b = Tensor(np.zeros(cout), requires_grad=True)
    return w, b


@dataclass
class DualStreamWeights:
    # local branch (C/2 channels throughout)
    l_conv1_w: Tensor
    l_conv1_b: Tensor
    l_conv2_w: Tensor
    l_conv2_b: Tensor
    l_pw_w: Tensor
    l_pw_b: Tensor
    # global branch
    r_ln1_g: Tensor
    r_ln1_b: Tensor
    r_in_w: Tensor  # C/2 -> C expansion
    r_in_b: Tensor
    r_dw_w: Tensor  # depthwise 3x3 on C channels
    r_dw_b: Tensor
    scans: tuple  # 4x ScanParams
    r_ln2_g: Tensor
    r_ln2_b: Tensor
    r_gate_w: Tensor  # C/2 -> C
    r_gate_b: Tensor
    r_out_w: Tensor  # C -> C/2
    r_out_b: Tensor
    # shared attention bottleneck (applied to both branches)
    att_w1: Tensor
    att_b1: Tensor
    att_w2: Tensor
    att_b2: Tensor

    def tensors(self):
        out = {}
        for k, v in self.__dict__.items():
            if k == "scans":
                for i, sp in enumerate(v):
                    for n, t in sp.tensors().items():
                        out[f"scan{i}.{n}"] = t
            else:
                out[k] = v
        return out


def init_dual_stream(channels, state_dim, rng):
    if channels % 2:
        raise T.ShapeError(f"dual-stream block needs even channels, got {channels}")
    half = channels // 2
    inner = channels  # 2x expansion of the half-width branch
    red = max(1, channels // 8)
    l1w, l1b = conv_w(rng, half, half, 3)
    l2w, l2b = conv_w(rng, half, half, 3)
    lpw, lpb = conv_w(rng, half, half, 1, gain=1.0)
    inw, inb = conv_w(rng, inner, half, 1, gain=1.0)
    dww = Tensor(
        rng.normal(0, np.sqrt(2.0 / 9), (inner, 1, 3, 3)), requires_grad=True
    )
    dwb = Tensor(np.zeros(inner), requires_grad=True)
    gw, gb = conv_w(rng, inner, half, 1)
    ow, ob = conv_w(rng, half, inner, 1, gain=1.0)
    a1w, a1b = conv_w(rng, red, half, 1)
    a2w, a2b = conv_w(rng, half, red, 1, gain=1.0)
    return DualStreamWeights(
        l_conv1_w=l1w, l_conv1_b=l1b,
        l_conv2_w=l2w, l_conv2_b=l2b,
        l_pw_w=lpw, l_pw_b=lpb,
        r_ln1_g=Tensor(np.ones(half), requires_grad=True),
        r_ln1_b=Tensor(np.zeros(half), requires_grad=True),
        r_in_w=inw, r_in_b=inb,
        r_dw_w=dww, r_dw_b=dwb,
        scans=tuple(init_scan_params(inner, state_dim, rng) for _ in range(4)),
        r_ln2_g=Tensor(np.ones(inner), requires_grad=True),
        r_ln2_b=Tensor(np.zeros(inner), requires_grad=True),
        r_gate_w=gw, r_gate_b=gb,
        r_out_w=ow, r_out_b=ob,
        att_w1=a1w, att_b1=a1b,
        att_w2=a2w, att_b2=a2b,
    )


def split_channels(x):
    c = x.data.shape[1]
    if c % 2:
        raise T.ShapeError(f"split_channels needs even channel count, got {c}")
    return T.narrow(x, 1, 0, c // 2), T.narrow(x, 1, c // 2, c // 2)


def local_branch(x, w):
    y = T.conv2d(x, w.l_conv1_w, w.l_conv1_b, padding=1).relu()
    y = T.conv2d(y, w.l_conv2_w, w.l_conv2_b, padding=1)
    return T.linear(y.relu(), w.l_pw_w, w.l_pw_b)


def global_branch(x, w):
    y0 = T.layer_norm(x, w.r_ln1_g, w.r_ln1_b)
    y = T.linear(y0, w.r_in_w, w.r_in_b)
    inner = y.data.shape[1]
    y = T.conv2d(y, w.r_dw_w, w.r_dw_b, padding=1, groups=inner).silu()
    y = ss2d(y, w.scans)
    y2 = T.layer_norm(y, w.r_ln2_g, w.r_ln2_b)
    gate = T.linear(y0, w.r_gate_w, w.r_gate_b).silu()
    return T.linear(y2 * gate, w.r_out_w, w.r_out_b)


def shared_attention(x, w):
    pooled = T.adaptive_avg_pool(x, 1) + T.global_max_pool(x)
    a = T.linear(pooled, w.att_w1, w.att_b1).relu()
    return T.linear(a, w.att_w2, w.att_b2).sigmoid()


def dual_stream_forward(x, w):
    x_l, x_r = split_channels(x)
    y_l = local_branch(x_l, w)
    y_r = global_branch(x_r, w)
    a_l = shared_attention(x_l, w)
    a_r = shared_attention(x_r, w)
    y_c = T.concat([y_l * a_l, y_r * a_r], axis=1)
    return T.channel_shuffle(y_c, 2) + x


# -- multi-scale bottleneck block ----------------------------------------

DILATIONS = (1, 2, 3, 4)
POOL_SIZES = (3, 2, 1)


@dataclass
class MultiScaleWeights:
    branch_w: tuple  # four (C -> C/4) dilated 3x3 kernels
    branch_b: tuple
    att_w1: Tensor
    att_b1: Tensor
    att_w2: Tensor
    att_b2: Tensor

    def tensors(self):
        out = {}
        for i, (wt, bt) in enumerate(zip(self.branch_w, self.branch_b)):
            out[f"branch{i}_w"] = wt
            out[f"branch{i}_b"] = bt
        out.update(
            att_w1=self.att_w1, att_b1=self.att_b1,
            att_w2=self.att_w2, att_b2=self.att_b2,
        )
        return out


def init_multi_scale(channels, rng):
    if channels % 4:
        raise T.ShapeError(f"multi-scale block needs channels % 4 == 0, got {channels}")
    quarter = channels // 4
    red = max(1, channels // 8)
    ws, bs = [], []
    for _ in DILATIONS:
        wt, bt = conv_w(rng, quarter, channels, 3, gain=1.0)
        ws.append(wt)
        bs.append(bt)
    a1w, a1b = conv_w(rng, red, channels, 1)
    a2w, a2b = conv_w(rng, channels, red, 1, gain=1.0)
    return MultiScaleWeights(
        branch_w=tuple(ws), branch_b=tuple(bs),
        att_w1=a1w, att_b1=a1b, att_w2=a2w, att_b2=a2b,
    )


@dataclass
class SampleMode:
    train: bool
    seed: int = 0


def cross_scale(x, w):
    if x.data.shape[1] % 4:
        raise T.ShapeError(f"cross_scale needs channels % 4 == 0, got {x.shape}")
    outs = [
        T.conv2d(x, wt, bt, padding=d, dilation=d)
        for d, wt, bt in zip(DILATIONS, w.branch_w, w.branch_b)
    ]
    return T.concat(outs, axis=1)


def _draw(rng):
    """One (pool size, cell index) draw; always consumes two values."""
    k = POOL_SIZES[int(rng.integers(0, 3))]
    cell = int(rng.integers(0, k * k))
    return k, cell


def random_pool_sample(y_m, mode):
    """Per-sample pooled channel vector, n x C x 1 x 1."""
    n, _, h, w_ = y_m.data.shape
    if not mode.train:
        return T.adaptive_avg_pool(y_m, 1)
    if min(h, w_) < 3:
        raise T.ShapeError(
            f"train-mode pooling needs spatial >= 3x3, got {h}x{w_}"
        )
    outs = []
    for i in range(n):
        rng = np.random.default_rng(np.uint64(mode.seed) ^ np.uint64(i))
        k, cell = _draw(rng)
        sample = T.narrow(y_m, 0, i, 1)
        pooled = T.adaptive_avg_pool(sample, k)
        r, c = divmod(cell, k)
        v = T.narrow(T.narrow(pooled, 2, r, 1), 3, c, 1)
        outs.append(v)
    return outs[0] if n == 1 else T.concat(outs, axis=0)


def attention_weights(v, w):
    a = T.linear(v, w.att_w1, w.att_b1).relu()
    return T.linear(a, w.att_w2, w.att_b2).sigmoid()


def multi_scale_forward(x, w, mode):
    y_m = T.channel_shuffle(cross_scale(x, w), 4)
    v = random_pool_sample(y_m, mode)
    delta = attention_weights(v, w)
    return x + y_m * delta
