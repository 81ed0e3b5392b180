"""Gated two-branch residual network and its three-step training schedule.

One network predicts the residual between the 2x-upscaled current estimate
and the target. The common branch sees only the upscaled image; the
high-frequency branch additionally sees the warped detail-prior channels and
is supervised only where those channels are active. A small gate net outputs
a pixel-wise soft weight in [0, 1] that fuses the branches:

    G = (1 - G_lambda) * G_A + G_lambda * G_B
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import (SGD, Conv2d, ShapeError, Tensor, add, as_tensor,
                       concat_channels, masked_sq_loss, mul, one_minus, relu,
                       scale, sigmoid)
from .errors import DataError


def branch_channels(depth, width=64):
    """Per-layer output channels for a residual branch.

    Follows the wide-middle progression width -> 2*width -> width/2 -> 1:
    up to 4 head layers at ``width``, a middle block at double width, up to
    3 narrowing layers at half width and a single-channel linear output.
    Shorter depths shed the middle block first, then the head.
    """
    depth = int(depth)
    if depth < 2:
        raise DataError("branch depth must be at least 2")
    narrow = min(3, depth - 1)
    head = min(4, depth - 1 - narrow)
    mid = depth - 1 - narrow - head
    return [width] * head + [2 * width] * mid + [max(width // 2, 1)] * narrow + [1]


def gate_channels(depth=6, width=64):
    depth = int(depth)
    if depth < 2:
        raise DataError("gate depth must be at least 2")
    return [width] * (depth - 1) + [1]


@dataclass
class LayerRates:
    """Learning rates for a stack: all layers vs its linear output layer."""

    pretrain: float
    pretrain_last: float
    finetune: float
    finetune_last: float


def branch_rates(scale=1.0):
    """The first-cascade rate table; later cascades pass their slowdown."""
    return LayerRates(1e-4 * scale, 1e-5 * scale, 1e-5 * scale, 1e-6 * scale)


def gate_rates(scale=1.0):
    # gates are only trained end-to-end, at 10x the branch rate
    return LayerRates(0.0, 0.0, 1e-4 * scale, 1e-5 * scale)


@dataclass
class NetConfig:
    prior_channels: int = 10
    branch_depth: int = 24
    branch_width: int = 64
    gate_depth: int = 6
    gate_width: int = 64
    rate_scale: float = 1.0   # multiplies every per-layer learning rate


class ConvStack:
    """3x3 conv layers with ReLU between them and a linear final layer."""

    def __init__(self, in_ch, channels, rng, rates: LayerRates):
        self.layers = []
        prev = in_ch
        last = len(channels) - 1
        for i, ch in enumerate(channels):
            lr_pre = rates.pretrain_last if i == last else rates.pretrain
            lr_ft = rates.finetune_last if i == last else rates.finetune
            self.layers.append(Conv2d(prev, ch, rng, lr_pretrain=lr_pre,
                                      lr_finetune=lr_ft))
            prev = ch

    def forward(self, x):
        for i, conv in enumerate(self.layers):
            x = conv(x)
            if i < len(self.layers) - 1:
                x = relu(x)
        return x

    def parameters(self):
        return [p for conv in self.layers for p in conv.parameters()]

    @property
    def depth(self):
        return len(self.layers)


@dataclass
class FusionResult:
    """Branch outputs, gate map and their pointwise fusion."""

    g_a: Tensor
    g_b: Tensor
    g_lambda: Tensor
    g: Tensor


class GatedSRNet:
    """Common branch, high-frequency branch and gate, fused pixel-wise.

    ``force_gate`` pins the gate map to a constant (0.0 reproduces the
    common branch exactly, 1.0 the high-frequency branch); None restores
    the learned gate. It doubles as the branch-ablation switch.
    """

    def __init__(self, cfg: NetConfig, rng):
        self.cfg = cfg
        b_rates = branch_rates(cfg.rate_scale)
        g_rates = gate_rates(cfg.rate_scale)
        plan = branch_channels(cfg.branch_depth, cfg.branch_width)
        assert plan[-1] == 1
        self.common = ConvStack(1, plan, rng, b_rates)
        self.hf = ConvStack(1 + cfg.prior_channels, plan, rng, b_rates)
        self.gate = ConvStack(1 + cfg.prior_channels + 2,
                              gate_channels(cfg.gate_depth, cfg.gate_width),
                              rng, g_rates)
        self.force_gate = None

    def parameters(self):
        return (self.common.parameters() + self.hf.parameters() +
                self.gate.parameters())


def forward(net: GatedSRNet, up_img, warped_prior) -> FusionResult:
    """Run both branches and the gate; fuse per the convex gate rule."""
    up = as_tensor(up_img)
    prior = as_tensor(warped_prior)
    if up.data.ndim != 4 or up.data.shape[1] != 1:
        raise ShapeError("forward: up_img must be (B, 1, H, W)")
    if (prior.data.ndim != 4 or
            prior.data.shape[0] != up.data.shape[0] or
            prior.data.shape[1] != net.cfg.prior_channels or
            prior.data.shape[2:] != up.data.shape[2:]):
        raise ShapeError("forward: warped_prior extent mismatch")
    g_a = net.common.forward(up)
    g_b = net.hf.forward(concat_channels([up, prior]))
    if net.force_gate is None:
        g_lambda = sigmoid(net.gate.forward(
            concat_channels([up, prior, g_a, g_b])))
    else:
        g_lambda = Tensor(np.full_like(g_a.data, float(net.force_gate)))
    g = add(mul(one_minus(g_lambda), g_a), mul(g_lambda, g_b))
    return FusionResult(g_a=g_a, g_b=g_b, g_lambda=g_lambda, g=g)


def _target(hi, up_img):
    return np.asarray(hi, dtype=np.float64) - np.asarray(up_img,
                                                         dtype=np.float64)


def loss_common(g_a, hi, up_img):
    """Squared Frobenius error of the common branch against the residual."""
    t = _target(hi, up_img)
    ones = np.ones_like(t)
    return masked_sq_loss(g_a, t, ones)


def loss_hf(g_b, hi, up_img, warped_prior):
    """Residual error weighted by each prior channel, summed over channels."""
    t = _target(hi, up_img)
    return masked_sq_loss(g_b, t, np.asarray(warped_prior, dtype=np.float64))


def loss_fused(g, hi, up_img):
    """Final supervision on the fused output."""
    t = _target(hi, up_img)
    ones = np.ones_like(t)
    return masked_sq_loss(g, t, ones)


@dataclass
class TrainSchedule:
    epochs_common: int = 10
    epochs_hf: int = 10
    epochs_joint: int = 10
    batch_size: int = 16
    momentum: float = 0.9
    base_lr: float = 1.0      # uniform scale on every per-layer rate
    gate_lr_multiplier: float = 1.0
    normalize: bool = True    # divide batch losses by element count


def _collate(dataset, idx):
    up = np.stack([dataset[i][0] for i in idx])[:, None]
    prior = np.stack([dataset[i][1] for i in idx])
    hi = np.stack([dataset[i][2] for i in idx])[:, None]
    return up, prior, hi


def _run_epochs(net, dataset, epochs, batch_size, rng, opt, loss_fn,
                normalize):
    history = []
    n = len(dataset)
    for _ in range(epochs):
        order = rng.permutation(n)
        total = 0.0
        batches = 0
        for s in range(0, n, batch_size):
            idx = order[s:s + batch_size]
            up, prior, hi = _collate(dataset, idx)
            opt.zero_grad()
            loss = loss_fn(up, prior, hi)
            if normalize:
                loss = scale(loss, 1.0 / hi.size)
            loss.backward()
            opt.step()
            total += float(loss.data)
            batches += 1
        history.append(total / batches)
    return history


def train_three_step(net: GatedSRNet, dataset, schedule: TrainSchedule = None,
                     rng=None):
    """Pre-train common under its own loss, then the high-frequency branch
    under the prior-weighted loss, then fine-tune everything end to end on
    the fused loss (gate layers run at their own, higher rates).

    ``dataset`` holds (up_img HxW, prior CxHxW, hi HxW) triples. Returns the
    per-epoch loss history of each step.
    """
    schedule = schedule or TrainSchedule()
    rng = rng or np.random.default_rng(0)
    if not dataset:
        raise DataError("training needs a non-empty dataset")

    def rates_of(stack, which):
        out = []
        for conv in stack.layers:
            r = getattr(conv, which)
            out.extend([r, r])   # weight and bias
        return out

    hist = {}

    opt = SGD(net.common.parameters(), base_lr=schedule.base_lr, momentum=schedule.momentum,
              lr_scales=rates_of(net.common, "lr_pretrain"))
    hist["common"] = _run_epochs(
        net, dataset, schedule.epochs_common, schedule.batch_size, rng, opt,
        lambda up, prior, hi: loss_common(net.common.forward(as_tensor(up)),
                                          hi, up),
        schedule.normalize)

    opt = SGD(net.hf.parameters(), base_lr=schedule.base_lr, momentum=schedule.momentum,
              lr_scales=rates_of(net.hf, "lr_pretrain"))
    hist["hf"] = _run_epochs(
        net, dataset, schedule.epochs_hf, schedule.batch_size, rng, opt,
        lambda up, prior, hi: loss_hf(
            net.hf.forward(concat_channels([as_tensor(up), as_tensor(prior)])),
            hi, up, prior),
        schedule.normalize)

    joint_scales = (rates_of(net.common, "lr_finetune") +
                    rates_of(net.hf, "lr_finetune") +
                    [s * schedule.gate_lr_multiplier
                     for s in rates_of(net.gate, "lr_finetune")])
    opt = SGD(net.parameters(), base_lr=schedule.base_lr, momentum=schedule.momentum,
              lr_scales=joint_scales)
    hist["joint"] = _run_epochs(
        net, dataset, schedule.epochs_joint, schedule.batch_size, rng, opt,
        lambda up, prior, hi: loss_fused(forward(net, up, prior).g, hi, up),
        schedule.normalize)

    return hist
