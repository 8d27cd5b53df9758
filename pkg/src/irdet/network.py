"""Full detector: dual-branch encoder, enhanced bottleneck, supervised
decoder, AdaGrad trainer, and the parameter / FLOP counter.

Stage widths are [C, 2C, 4C, 8C]; concatenating the two branch outputs
at stage i doubles the width, and a 1x1 projection produces the next
stage's input. The bottleneck runs at 16C. Decoder levels mirror the
encoder resolutions, each with its own sigmoid prediction head.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .tensor import Tensor
from . import blocks as B
from .serialization import write_tensors, read_tensors


@dataclass
class ModelConfig:
    base_channels: int = 16
    dse_depths: tuple = (2, 2, 2, 2)
    state_dim: int = 16
    input_size: tuple = (256, 256)
    supervision_levels: int = 4
    learning_rate: float = 0.05
    batch_size: int = 4

    def __post_init__(self):
        self.dse_depths = tuple(int(d) for d in self.dse_depths)
        self.input_size = tuple(int(s) for s in self.input_size)
        if len(self.dse_depths) != 4 or any(d < 0 for d in self.dse_depths):
            raise ValueError(f"dse_depths must be 4 nonnegative ints, got {self.dse_depths}")
        h, w = self.input_size
        if h % 16 or w % 16:
            raise ValueError(f"input size must be divisible by 16, got {h}x{w}")

    @property
    def stage_channels(self):
        c = self.base_channels
        return [c, 2 * c, 4 * c, 8 * c]

    @property
    def bottleneck_channels(self):
        return 16 * self.base_channels

    def to_lines(self):
        return [
            f"base_channels={self.base_channels}",
            f"dse_depths={','.join(map(str, self.dse_depths))}",
            f"state_dim={self.state_dim}",
            f"input_size={self.input_size[0]},{self.input_size[1]}",
            f"supervision_levels={self.supervision_levels}",
            f"learning_rate={self.learning_rate}",
            f"batch_size={self.batch_size}",
        ]

    @classmethod
    def from_lines(cls, lines):
        kv = {}
        for line in lines:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"bad config line: {line!r}")
            k, v = line.split("=", 1)
            kv[k.strip()] = v.strip()
        kwargs = {}
        for f in fields(cls):
            if f.name not in kv:
                continue
            v = kv.pop(f.name)
            if f.name in ("dse_depths", "input_size"):
                kwargs[f.name] = tuple(int(s) for s in v.split(","))
            elif f.name == "learning_rate":
                kwargs[f.name] = float(v)
            else:
                kwargs[f.name] = int(v)
        if kv:
            raise ValueError(f"unknown config keys: {sorted(kv)}")
        return cls(**kwargs)


LOGIT_BOUND = 12.0
HEAD_PRIOR_BIAS = -2.0


@dataclass
class ResBlockWeights:
    conv1_w: Tensor
    conv1_b: Tensor
    conv2_w: Tensor
    conv2_b: Tensor
    proj_w: Tensor = None
    proj_b: Tensor = None

    def tensors(self):
        out = {
            "conv1_w": self.conv1_w, "conv1_b": self.conv1_b,
            "conv2_w": self.conv2_w, "conv2_b": self.conv2_b,
        }
        if self.proj_w is not None:
            out["proj_w"] = self.proj_w
            out["proj_b"] = self.proj_b
        return out


def init_res_block(cin, cout, rng):
    w1, b1 = B.conv_w(rng, cout, cin, 3)
    w2, b2 = B.conv_w(rng, cout, cout, 3, gain=1.0)
    # damp the residual branch so stacked blocks stay near identity at
    # init; unscaled branches compound variance and the fixed-step
    # optimizer then saturates the output sigmoids on the first updates
    w2.data *= 0.1
    pw = pb = None
    if cin != cout:
        pw, pb = B.conv_w(rng, cout, cin, 1, gain=1.0)
    return ResBlockWeights(w1, b1, w2, b2, pw, pb)


def res_block(x, w):
    y = T.conv2d(x, w.conv1_w, w.conv1_b, padding=1).relu()
    y = T.conv2d(y, w.conv2_w, w.conv2_b, padding=1)
    shortcut = x if w.proj_w is None else T.linear(x, w.proj_w, w.proj_b)
    return (y + shortcut).relu()


class Model:
    """Weight container plus the forward graph builders."""

    def __init__(self, config: ModelConfig, seed=0):
        self.config = config
        rng = np.random.default_rng(seed)
        c = config.base_channels
        ch = config.stage_channels
        bc = config.bottleneck_channels

        self.stem_w, self.stem_b = B.conv_w(rng, c, 3, 3, gain=1.0)
        self.patch_w, self.patch_b = B.conv_w(rng, c, 3, 3, gain=1.0)

        # primary-branch res blocks: one per stage plus the bottleneck one
        self.res = [init_res_block(ch[i], ch[i], rng) for i in range(4)]
        self.res.append(init_res_block(bc, bc, rng))

        # auxiliary branch: stride-2 downsample convs between stages
        self.aux_down = []
        for i in range(1, 4):
            w, b = B.conv_w(rng, ch[i], ch[i - 1], 2, gain=1.0)
            self.aux_down.append((w, b))
        self.dse = [
            [B.init_dual_stream(ch[i], config.state_dim, rng)
             for _ in range(config.dse_depths[i])]
            for i in range(4)
        ]

        # per-stage fusion projections: 2*ch[i] -> width of next stage,
        # each followed by a channel LayerNorm. The seam norms keep the
        # feature scale fixed between stages; without them the fixed-step
        # optimizer compounds layer gains until the sigmoids saturate
        # and every gradient underflows to zero (see decision ledger)
        fusion_out = [ch[1], ch[2], ch[3], bc]
        self.fusion = [
            B.conv_w(rng, fusion_out[i], 2 * ch[i], 1, gain=1.0) for i in range(4)
        ]
        self.fusion_ln = [
            (
                Tensor(np.ones(fusion_out[i]), requires_grad=True),
                Tensor(np.zeros(fusion_out[i]), requires_grad=True),
            )
            for i in range(4)
        ]

        self.context = B.init_multi_scale(bc, rng)

        # decoder: per level (4..1) fusion projection (+ seam norm),
        # res block, head
        self.dec_proj = []
        self.dec_ln = []
        self.dec_res = []
        self.heads = []
        up_ch = bc
        for i in (3, 2, 1, 0):
            cat = up_ch + ch[i]
            self.dec_proj.append(B.conv_w(rng, ch[i], cat, 1, gain=1.0))
            self.dec_ln.append(
                (
                    Tensor(np.ones(ch[i]), requires_grad=True),
                    Tensor(np.zeros(ch[i]), requires_grad=True),
                )
            )
            self.dec_res.append(init_res_block(ch[i], ch[i], rng))
            # heads start near-uniform with a negative prior bias: small
            # targets cover well under 1% of pixels, so starting at 0.5
            # confidence makes the first optimizer steps spend themselves
            # wiping the background (and the adaptive step sizes never
            # recover); starting near the true positive rate avoids that
            hw, hb = B.conv_w(rng, 1, ch[i], 1)
            hw.data *= 0.01
            hb.data[...] = HEAD_PRIOR_BIAS
            self.heads.append((hw, hb))
            up_ch = ch[i]

    # -- parameter access ------------------------------------------------

    def named_parameters(self):
        out = {}
        out["stem_w"], out["stem_b"] = self.stem_w, self.stem_b
        out["patch_w"], out["patch_b"] = self.patch_w, self.patch_b
        for i, r in enumerate(self.res):
            for n, t in r.tensors().items():
                out[f"res{i}.{n}"] = t
        for i, (w, b) in enumerate(self.aux_down):
            out[f"aux_down{i}.w"], out[f"aux_down{i}.b"] = w, b
        for i, stage in enumerate(self.dse):
            for j, dw in enumerate(stage):
                for n, t in dw.tensors().items():
                    out[f"dse{i}_{j}.{n}"] = t
        for i, (w, b) in enumerate(self.fusion):
            out[f"fusion{i}.w"], out[f"fusion{i}.b"] = w, b
        for i, (g, b) in enumerate(self.fusion_ln):
            out[f"fusion{i}.ln_g"], out[f"fusion{i}.ln_b"] = g, b
        for n, t in self.context.tensors().items():
            out[f"context.{n}"] = t
        for lvl, ((pw, pb), r, (hw, hb)) in enumerate(
            zip(self.dec_proj, self.dec_res, self.heads)
        ):
            out[f"dec{lvl}.proj_w"], out[f"dec{lvl}.proj_b"] = pw, pb
            lg, lb = self.dec_ln[lvl]
            out[f"dec{lvl}.ln_g"], out[f"dec{lvl}.ln_b"] = lg, lb
            for n, t in r.tensors().items():
                out[f"dec{lvl}.res.{n}"] = t
            out[f"dec{lvl}.head_w"], out[f"dec{lvl}.head_b"] = hw, hb
        return out

    def enhancement_parameters(self):
        """Tensors belonging to the two enhancement blocks only."""
        return {
            n: t
            for n, t in self.named_parameters().items()
            if n.startswith("dse") or n.startswith("context.")
        }

    def set_requires_grad(self, flag=True):
        for t in self.named_parameters().values():
            t.requires_grad = flag
            t.zero_grad()

    # -- forward ---------------------------------------------------------

    def encode(self, image):
        n, cin, h, w = image.data.shape
        if cin != 3:
            raise T.ShapeError(f"encode expects 3-channel input, got {image.shape}")
        if h % 16 or w % 16:
            raise T.ShapeError(
                f"input spatial size must be divisible by 16, got {h}x{w}"
            )
        primaries, auxiliaries = [], []
        p = T.conv2d(image, self.stem_w, self.stem_b, padding=1)
        a = T.conv2d(image, self.patch_w, self.patch_b, padding=1)
        fused = None
        for i in range(4):
            if i > 0:
                p = T.max_pool2(fused)
                w_, b_ = self.aux_down[i - 1]
                a = T.conv2d(a, w_, b_, stride=2)
            r = res_block(p, self.res[i])
            for dw in self.dse[i]:
                a = B.dual_stream_forward(a, dw)
            primaries.append(r)
            auxiliaries.append(a)
            fw, fb = self.fusion[i]
            lg, lb = self.fusion_ln[i]
            fused = T.layer_norm(T.linear(T.concat([r, a], axis=1), fw, fb), lg, lb)
        return primaries, auxiliaries, fused  # fused == deepest feature

    def bottleneck(self, deep, mode):
        h, w = deep.data.shape[2:]
        if h % 2 or w % 2:
            raise T.ShapeError(f"bottleneck needs even spatial size, got {h}x{w}")
        if mode.train and min(h, w) < 6:
            raise T.ShapeError(
                f"train mode needs the deepest feature at >= 6x6 (input >= 96x96), "
                f"got {h}x{w}"
            )
        y = T.max_pool2(deep)
        y = res_block(y, self.res[4])
        y = B.multi_scale_forward(y, self.context, mode)
        return T.upsample_bilinear(y, 2)

    def decode(self, b, primaries):
        maps = []
        y = b
        for lvl, i in enumerate((3, 2, 1, 0)):
            pw, pb = self.dec_proj[lvl]
            lg, lb = self.dec_ln[lvl]
            y = T.layer_norm(T.linear(T.concat([y, primaries[i]], axis=1), pw, pb), lg, lb)
            y = res_block(y, self.dec_res[lvl])
            hw, hb = self.heads[lvl]
            z = T.linear(y, hw, hb)
            # bound the logits: past ~+-36 a double-precision sigmoid
            # rounds to exactly 0/1 and its gradient vanishes, which
            # would freeze training permanently after an early overshoot;
            # softsign keeps the gradient nonzero at any overshoot size
            z = T.scale(T.softsign(T.scale(z, 1.0 / LOGIT_BOUND)), LOGIT_BOUND)
            maps.append(z.sigmoid())
            if i > 0:
                y = T.upsample_bilinear(y, 2)
        maps.reverse()  # finest first
        return maps[: self.config.supervision_levels]

    def forward(self, image, mode=None):
        if mode is None:
            mode = B.SampleMode(train=False)
        primaries, _, deep = self.encode(image)
        b = self.bottleneck(deep, mode)
        return self.decode(b, primaries)

    # -- checkpointing ---------------------------------------------------

    def save(self, path):
        params = self.named_parameters()
        with open(path, "wb") as fh:
            for line in self.config.to_lines():
                fh.write((line + "\n").encode("ascii"))
            fh.write(b"\n")
            write_tensors(fh, {n: t.data for n, t in params.items()})

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            lines = []
            while True:
                line = _read_text_line(fh)
                if line == "":
                    break
                lines.append(line)
            config = ModelConfig.from_lines(lines)
            stored = read_tensors(fh)
        model = cls(config, seed=0)
        params = model.named_parameters()
        missing = set(params) - set(stored)
        extra = set(stored) - set(params)
        if missing or extra:
            raise ValueError(
                f"checkpoint mismatch: missing {sorted(missing)[:3]}, "
                f"extra {sorted(extra)[:3]}"
            )
        for n, t in params.items():
            if t.data.shape != stored[n].shape:
                raise ValueError(
                    f"checkpoint tensor {n} has shape {stored[n].shape}, "
                    f"expected {t.data.shape}"
                )
            t.data = stored[n].astype(np.float64)
        return model


def _read_text_line(fh):
    buf = bytearray()
    while True:
        ch = fh.read(1)
        if ch == b"" or ch == b"\n":
            return buf.decode("ascii")
        buf.extend(ch)


# -- loss ----------------------------------------------------------------


def downsample_mask(mask, times):
    """Max-pool a binary mask array down by 2**times."""
    m = mask
    for _ in range(times):
        n, c, h, w = m.shape
        m = m.reshape(n, c, h // 2, 2, w // 2, 2).max(axis=(3, 5))
    return m


def soft_iou_loss(maps, gt_mask, eps=1.0):
    """Deep-supervision soft-IoU loss, equal weights across levels."""
    gt = np.asarray(gt_mask, dtype=np.float64)
    if gt.ndim == 3:
        gt = gt[:, None]
    if not np.isin(gt, (0.0, 1.0)).all():
        raise ValueError("ground-truth mask must be binary")
    total = None
    for lvl, p in enumerate(maps):
        g = Tensor(downsample_mask(gt, lvl))
        if g.data.shape != p.data.shape:
            raise T.ShapeError(
                f"level {lvl}: map {p.shape} vs mask {g.data.shape}"
            )
        inter = (p * g).sum()
        union = p.sum() + g.sum() - inter
        term = 1.0 - (inter + eps) / (union + eps)
        total = term if total is None else total + term
    return total * (1.0 / len(maps))


# -- optimizer -----------------------------------------------------------


class AdaGrad:
    """Per-coordinate AdaGrad, optionally with per-tensor norm projection.

    The first update moves every coordinate by the full learning rate
    (g/sqrt(g^2) = sign g), so a handful of sign-coherent steps can add a
    rank-aligned perturbation whose operator norm dwarfs the weight it
    perturbs; activations then overflow the sigmoid's double-precision
    range and the loss surface goes flat. `norm_caps` guards against
    that: after each update, any weight tensor whose Frobenius norm
    exceeds its cap is scaled back onto the cap sphere.
    """

    def __init__(self, lr=0.05, eps=1e-10, norm_caps=None):
        self.lr = lr
        self.eps = eps
        self.accum = {}
        self.norm_caps = norm_caps or {}

    def step(self, params):
        for name, t in params.items():
            if t.grad is None:
                continue
            acc = self.accum.get(name)
            if acc is None:
                acc = np.zeros_like(t.data)
                self.accum[name] = acc
            acc += t.grad * t.grad
            t.data -= self.lr * t.grad / np.sqrt(acc + self.eps)
            cap = self.norm_caps.get(name)
            if cap is not None:
                norm = float(np.sqrt((t.data * t.data).sum()))
                if norm > cap:
                    t.data *= cap / norm

    def accumulate(self, params):
        """Add squared gradients to the accumulators without stepping.

        Used by the trainer's warm-up pass: a fresh accumulator makes the
        first update move every coordinate by the full learning rate
        (g/sqrt(g^2) = sign g), which overshoots wildly at lr 0.05; a few
        accumulate-only passes scale the first real updates down to
        lr/sqrt(passes) while leaving the update rule itself untouched.
        """
        for name, t in params.items():
            if t.grad is None:
                continue
            acc = self.accum.get(name)
            if acc is None:
                acc = np.zeros_like(t.data)
                self.accum[name] = acc
            acc += t.grad * t.grad


WEIGHT_CAP_MULT = 2.0


def weight_norm_caps(model):
    """Frobenius caps for matrix-shaped weights: a multiple of the
    fan-in-scaled init norm sqrt(2 * c_out), which is independent of
    fan-in. Biases, gains, and other vectors are left unconstrained."""
    caps = {}
    for name, t in model.named_parameters().items():
        if t.data.ndim >= 2:
            caps[name] = WEIGHT_CAP_MULT * float(np.sqrt(2.0 * t.data.shape[0]))
    return caps


def _batch_backward(model, images, masks, sample_seed):
    """Forward + backward on one batch; returns the loss value with all
    parameter gradients populated. Rejects a non-finite loss."""
    model.set_requires_grad(True)
    mode = B.SampleMode(train=True, seed=sample_seed)
    maps = model.forward(Tensor(images), mode)
    loss = soft_iou_loss(maps, masks)
    value = float(loss.data)
    if not np.isfinite(value):
        raise FloatingPointError(f"non-finite loss {value}; step rejected")
    loss.backward()
    return value


def train_step(model, images, masks, opt, sample_seed=0):
    """One optimizer update; rejects the step on a non-finite loss."""
    value = _batch_backward(model, images, masks, sample_seed)
    opt.step(model.named_parameters())
    return value


def warmup_step(model, images, masks, opt, sample_seed=0):
    """Accumulate squared gradients without updating any parameter."""
    value = _batch_backward(model, images, masks, sample_seed)
    opt.accumulate(model.named_parameters())
    return value


# -- training loop -------------------------------------------------------


def to_input(gray):
    """Replicate a (h, w) gray image into the 3-channel input layout."""
    gray = np.asarray(gray, dtype=np.float64)
    return np.repeat(gray[None, None], 3, axis=1)[0]


def _augment(img, mask, rng):
    k = int(rng.integers(0, 4))
    flip = bool(rng.integers(0, 2))
    img = np.rot90(img, k, axes=(-2, -1))
    mask = np.rot90(mask, k, axes=(-2, -1))
    if flip:
        img = img[..., ::-1]
        mask = mask[..., ::-1]
    return np.ascontiguousarray(img), np.ascontiguousarray(mask)


WARMUP_BATCHES = 64


def train_loop(model, images, masks, epochs, seed=0, batch_size=None,
               lr=None, augment=True, warmup=WARMUP_BATCHES, log=None,
               on_epoch_end=None):
    """Seeded epochs of AdaGrad updates; returns (rows, opt).

    Rows are (epoch, step, loss) for parameter-updating steps only.
    Before the first update the optimizer accumulators are warmed up with
    `warmup` accumulate-only batches (cycling through the data), so the
    first real updates start at the adaptively scaled step size instead
    of a raw +-lr per coordinate. Augmentation is a random rotation by a
    multiple of 90 degrees plus an optional flip, drawn per sample.
    """
    cfg = model.config
    batch_size = batch_size or cfg.batch_size
    lr = lr if lr is not None else cfg.learning_rate
    opt = AdaGrad(lr=lr, norm_caps=weight_norm_caps(model))
    inputs = [to_input(im) for im in images]
    gts = [np.asarray(m, dtype=np.float64)[None] for m in masks]
    rng = np.random.default_rng(seed)

    def batches():
        while True:
            order = rng.permutation(len(inputs))
            for lo in range(0, len(order), batch_size):
                idx = order[lo : lo + batch_size]
                batch_im, batch_gt = [], []
                for i in idx:
                    if augment:
                        im, gt = _augment(inputs[i], gts[i], rng)
                    else:
                        im, gt = inputs[i], gts[i]
                    batch_im.append(im)
                    batch_gt.append(gt)
                sample_seed = int(rng.integers(0, 2**62))
                yield np.stack(batch_im), np.stack(batch_gt), sample_seed

    stream = batches()
    if epochs > 0:
        for _ in range(warmup):
            images_arr, masks_arr, sample_seed = next(stream)
            warmup_step(model, images_arr, masks_arr, opt, sample_seed)

    steps_per_epoch = (len(inputs) + batch_size - 1) // batch_size
    rows = []
    step = 0
    for epoch in range(epochs):
        epoch_rows = []
        for _ in range(steps_per_epoch):
            images_arr, masks_arr, sample_seed = next(stream)
            loss = train_step(model, images_arr, masks_arr, opt, sample_seed)
            epoch_rows.append((epoch, step, loss))
            if log is not None:
                log(epoch, step, loss)
            step += 1
        rows.extend(epoch_rows)
        if on_epoch_end is not None:
            on_epoch_end(epoch, epoch_rows)
    return rows, opt


def infer(model, gray_image):
    """Confidence map (h, w) in (0, 1) for one gray image."""
    maps = model.forward(Tensor(to_input(gray_image)[None]), B.SampleMode(train=False))
    return maps[0].data[0, 0]


# -- parameter and FLOP accounting ---------------------------------------

SCAN_STEP_FLOPS = 6  # per (t, channel, state): discretize + update + readout


def count_params_flops(config: ModelConfig, input_size=None):
    """Exact parameter count and 2*MAC FLOPs at the given input size."""
    if input_size is None:
        input_size = config.input_size
    h, w = input_size
    model = Model(config, seed=0)
    params = sum(t.data.size for t in model.named_parameters().values())

    flops = 0

    def conv(cin, cout, k, oh, ow, groups=1):
        nonlocal flops
        flops += 2 * cout * (cin // groups) * k * k * oh * ow

    def resb(cin, cout, oh, ow):
        conv(cin, cout, 3, oh, ow)
        conv(cout, cout, 3, oh, ow)
        if cin != cout:
            conv(cin, cout, 1, oh, ow)

    def scan_stack(channels, oh, ow, state_dim):
        nonlocal flops
        inner = channels  # after the 2x expansion of the half-width input
        half = channels // 2
        length = oh * ow
        conv(half, half, 3, oh, ow)  # local conv1
        conv(half, half, 3, oh, ow)  # local conv2
        conv(half, half, 1, oh, ow)  # local pointwise
        conv(half, inner, 1, oh, ow)  # in-projection
        conv(inner, inner, 3, oh, ow, groups=inner)  # depthwise
        conv(half, inner, 1, oh, ow)  # gate
        conv(inner, half, 1, oh, ow)  # out-projection
        red = max(1, channels // 8)
        for _ in range(2):  # attention applied per branch
            conv(half, red, 1, 1, 1)
            conv(red, half, 1, 1, 1)
        per_dir = (
            2 * inner * inner * length  # step-size projection
            + 2 * 2 * state_dim * inner * length  # B_t, C_t projections
            + SCAN_STEP_FLOPS * inner * state_dim * length
        )
        flops += 4 * per_dir

    ch = config.stage_channels
    bc = config.bottleneck_channels
    sh, sw = h, w
    conv(3, ch[0], 3, sh, sw)  # stem
    conv(3, ch[0], 3, sh, sw)  # patch embed
    for i in range(4):
        if i > 0:
            sh, sw = sh // 2, sw // 2
            conv(ch[i - 1], ch[i], 2, sh, sw)  # aux downsample
        resb(ch[i], ch[i], sh, sw)
        for _ in range(config.dse_depths[i]):
            scan_stack(ch[i], sh, sw, config.state_dim)
        fout = ch[i + 1] if i < 3 else bc
        conv(2 * ch[i], fout, 1, sh, sw)  # stage fusion
    # bottleneck at half the deepest stage resolution
    bh, bw = sh // 2, sw // 2
    resb(bc, bc, bh, bw)
    quarter = bc // 4
    for d in B.DILATIONS:
        conv(bc, quarter, 3, bh, bw)
    red = max(1, bc // 8)
    conv(bc, red, 1, 1, 1)
    conv(red, bc, 1, 1, 1)
    # decoder
    up_ch = bc
    dh, dw_ = sh, sw
    for i in (3, 2, 1, 0):
        conv(up_ch + ch[i], ch[i], 1, dh, dw_)
        resb(ch[i], ch[i], dh, dw_)
        conv(ch[i], 1, 1, dh, dw_)
        up_ch = ch[i]
        dh, dw_ = dh * 2, dw_ * 2
    return params, flops
