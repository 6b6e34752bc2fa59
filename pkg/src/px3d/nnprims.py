"""Differentiable building blocks and a finite-difference gradient checker.

Blocks are standard torch modules; analytic gradients come from autograd
and are verified against central finite differences in float64 (normalization
layers in eval mode).  Odd spatial dims are right/bottom (and back, in 3D)
zero-padded before pooling and cropped after upsampling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .errors import ConfigError, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _check_input(x, ndim, channels=None, who=""):
    if x.dim() != ndim:
        raise ShapeError(f"{who}: expected {ndim}D input, got shape {tuple(x.shape)}")
    if channels is not None and x.shape[1] != channels:
        raise ShapeError(f"{who}: expected {channels} channels, got {x.shape[1]} "
                         f"(shape {tuple(x.shape)})")


class ConvBlock(nn.Module):
    """Two 3x3 conv + BN + ReLU layers; preserves H, W."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(c_out, eps=BN_EPS, momentum=BN_MOMENTUM)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(c_out, eps=BN_EPS, momentum=BN_MOMENTUM)

    def forward(self, x):
        _check_input(x, 4, self.c_in, "conv_block")
        if min(x.shape[2], x.shape[3]) < 3:
            raise ShapeError(f"conv_block: spatial dims must be >= 3, got {tuple(x.shape)}")
        x = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(x)))


class ConvBlock3d(nn.Module):
    """3D twin of ConvBlock (3x3x3 kernels)."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.c_in, self.c_out = c_in, c_out
        self.conv1 = nn.Conv3d(c_in, c_out, 3, padding=1)
        self.bn1 = nn.BatchNorm3d(c_out, eps=BN_EPS, momentum=BN_MOMENTUM)
        self.conv2 = nn.Conv3d(c_out, c_out, 3, padding=1)
        self.bn2 = nn.BatchNorm3d(c_out, eps=BN_EPS, momentum=BN_MOMENTUM)

    def forward(self, x):
        _check_input(x, 5, self.c_in, "conv_block3d")
        x = F.relu(self.bn1(self.conv1(x)))
        return F.relu(self.bn2(self.conv2(x)))


def _pad_to_multiple(x, mult):
    h, w = x.shape[-2:]
    ph = (mult - h % mult) % mult
    pw = (mult - w % mult) % mult
    if ph or pw:
        x = F.pad(x, (0, pw, 0, ph))
    return x


class MultiAxisGatedMlp(nn.Module):
    """Two parallel gated-MLP branches over a window partition (local) and a
    grid partition (global); each gate is u * linear(v) on a channel split,
    branch outputs are summed, projected back to C and added residually."""

    def __init__(self, channels: int, block_size: int = 8):
        super().__init__()
        if channels % 2 != 0:
            raise ConfigError(f"gated_mlp: channels must be even to split, got {channels}")
        self.channels = channels
        self.block_size = block_size
        tokens = block_size * block_size
        self.local_gate = nn.Linear(tokens, tokens)
        self.global_gate = nn.Linear(tokens, tokens)
        self.out_proj = nn.Conv2d(channels // 2, channels, 1)

    def _gate(self, tokens_last, linear):
        u, v = tokens_last.chunk(2, dim=-1)              # (n, g, t, c/2) each
        v = linear(v.transpose(-1, -2)).transpose(-1, -2)
        return u * v

    def forward(self, x):
        _check_input(x, 4, self.channels, "gated_mlp")
        n, c, h, w = x.shape
        b = self.block_size
        xp = _pad_to_multiple(x, b)
        hp, wp = xp.shape[-2:]
        # local branch: tokens are the b*b positions inside each window
        xl = rearrange(xp, "n c (gh fh) (gw fw) -> n (gh gw) (fh fw) c", fh=b, fw=b)
        local = self._gate(xl, self.local_gate)
        local = rearrange(local, "n (gh gw) (fh fw) c -> n c (gh fh) (gw fw)",
                          gh=hp // b, fh=b, fw=b)
        # global branch: tokens are the b*b grid cells, per in-cell position
        xg = rearrange(xp, "n c (gh fh) (gw fw) -> n (fh fw) (gh gw) c", gh=b, gw=b)
        glob = self._gate(xg, self.global_gate)
        glob = rearrange(glob, "n (fh fw) (gh gw) c -> n c (gh fh) (gw fw)",
                         gh=b, gw=b, fh=hp // b)
        y = self.out_proj(local + glob)[:, :, :h, :w]
        return x + y


class ChannelAttention(nn.Module):
    """Squeeze-and-excitation: x * sigmoid(W2 relu(W1 gap(x)))."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        if reduction > channels:
            raise ConfigError(
                f"channel_attention: reduction {reduction} exceeds channels {channels}")
        if channels % reduction != 0:
            raise ConfigError(
                f"channel_attention: channels {channels} not divisible by reduction {reduction}")
        self.channels = channels
        self.fc1 = nn.Linear(channels, channels // reduction)
        self.fc2 = nn.Linear(channels // reduction, channels)

    def forward(self, x):
        _check_input(x, 4, self.channels, "channel_attention")
        s = x.mean(dim=(2, 3))
        s = torch.sigmoid(self.fc2(F.relu(self.fc1(s))))
        return x * s[:, :, None, None]


class HBBlock(nn.Module):
    """Hybrid MLP-CNN decoder block: a 3x3 conv fuses the upsampled features
    with the skip, then gated MLP and channel attention refine them, and a
    final linear 3x3 conv re-adds the fused features to recover depth
    coherence.  Output is linear (no activation)."""

    def __init__(self, c_x: int, c_skip: int, c_out: int = 128,
                 block_size: int = 8, reduction: int = 4):
        super().__init__()
        self.c_x, self.c_skip, self.c_out = c_x, c_skip, c_out
        self.fuse_conv = nn.Conv2d(c_x + c_skip, c_out, 3, padding=1)
        self.fuse_bn = nn.BatchNorm2d(c_out, eps=BN_EPS, momentum=BN_MOMENTUM)
        self.mlp = MultiAxisGatedMlp(c_out, block_size)
        self.attn = ChannelAttention(c_out, reduction)
        self.out_conv = nn.Conv2d(c_out, c_out, 3, padding=1)

    def forward(self, x, skip):
        _check_input(x, 4, self.c_x, "hb_block")
        _check_input(skip, 4, self.c_skip, "hb_block skip")
        if x.shape[2:] != skip.shape[2:]:
            raise ShapeError(f"hb_block: spatial mismatch x {tuple(x.shape)} "
                             f"vs skip {tuple(skip.shape)}")
        fused = F.relu(self.fuse_bn(self.fuse_conv(torch.cat([x, skip], dim=1))))
        y = self.mlp(fused)
        y = self.attn(y)
        return self.out_conv(y) + fused


# ---------------------------------------------------------------------------
# resize ops


def maxpool2x2(x):
    """2x2 max pooling; odd dims are right/bottom zero-padded first."""
    if x.dim() == 4:
        h, w = x.shape[-2:]
        if h % 2 or w % 2:
            x = F.pad(x, (0, w % 2, 0, h % 2))
        return F.max_pool2d(x, 2)
    if x.dim() == 5:
        d, h, w = x.shape[-3:]
        if d % 2 or h % 2 or w % 2:
            x = F.pad(x, (0, w % 2, 0, h % 2, 0, d % 2))
        return F.max_pool3d(x, 2)
    raise ShapeError(f"maxpool2x2: expected 4D or 5D input, got {tuple(x.shape)}")


def upsample2x2(x, target_size=None):
    """Bilinear (trilinear in 3D) 2x upsampling; crops to target_size."""
    if x.dim() == 4:
        y = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        if target_size is not None:
            y = y[:, :, : target_size[0], : target_size[1]]
        return y
    if x.dim() == 5:
        y = F.interpolate(x, scale_factor=2, mode="trilinear", align_corners=False)
        if target_size is not None:
            y = y[:, :, : target_size[0], : target_size[1], : target_size[2]]
        return y
    raise ShapeError(f"upsample2x2: expected 4D or 5D input, got {tuple(x.shape)}")


# ---------------------------------------------------------------------------
# deterministic initialization


def init_params(model: nn.Module, seed: int) -> nn.Module:
    """He-normal conv/linear weights, zero biases, fresh BN stats; the same
    seed always produces the same parameters."""
    g = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for m in model.modules():
            if isinstance(m, (nn.Conv2d, nn.Conv3d, nn.Linear)):
                fan_in = m.weight[0].numel()
                m.weight.normal_(0.0, math.sqrt(2.0 / fan_in), generator=g)
                if m.bias is not None:
                    m.bias.zero_()
            elif isinstance(m, (nn.BatchNorm2d, nn.BatchNorm3d)):
                m.reset_running_stats()
                m.weight.fill_(1.0)
                m.bias.zero_()
    return model


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckReport:
    per_group: dict = field(default_factory=dict)   # name -> max relative error
    nonfinite: list = field(default_factory=list)
    tolerance: float = 1e-3

    @property
    def max_rel_err(self) -> float:
        return max(self.per_group.values(), default=0.0)

    @property
    def ok(self) -> bool:
        return not self.nonfinite and self.max_rel_err < self.tolerance


def _flat_sum(out):
    if isinstance(out, (tuple, list)):
        return sum(_flat_sum(o) for o in out)
    return out.sum()


def grad_check(op, input_shapes, tolerance: float = 1e-3, eps: float = 1e-4,
               max_coords: int = 64, seed: int = 0,
               input_transform=None) -> GradCheckReport:
    """Compare autograd gradients of sum(op(inputs)) against central finite
    differences in float64, for the op's parameters and its inputs.

    Works on modules (cast to double, eval mode) and plain callables.
    Reports the max relative error per parameter group; non-finite values
    anywhere flag the report as failed.  Coordinates whose difference
    quotient lands on an activation kink are re-estimated with shrinking
    steps: a real gradient error persists as eps shrinks, kink pollution
    does not.
    """
    rng = np.random.default_rng(seed)
    g = torch.Generator().manual_seed(seed)
    if isinstance(op, nn.Module):
        op = op.double().eval()
        params = dict(op.named_parameters())
    else:
        params = {}
    inputs = []
    for i, shape in enumerate(input_shapes):
        t = torch.randn(*shape, generator=g, dtype=torch.float64)
        if input_transform is not None:
            t = input_transform(i, t)
        inputs.append(t.requires_grad_(True))

    report = GradCheckReport(tolerance=tolerance)
    out = op(*inputs)
    for o in (out if isinstance(out, (tuple, list)) else [out]):
        if not torch.isfinite(o).all():
            report.nonfinite.append("output")
    if report.nonfinite:
        return report
    loss = _flat_sum(out)
    groups = {**params, **{f"input{i}": t for i, t in enumerate(inputs)}}
    grads = torch.autograd.grad(loss, list(groups.values()), allow_unused=True)

    def forward_loss():
        with torch.no_grad():
            return float(_flat_sum(op(*inputs)))

    for (name, tensor), grad in zip(groups.items(), grads):
        if grad is None:
            continue
        if not torch.isfinite(grad).all():
            report.nonfinite.append(name)
            continue
        flat = tensor.detach().reshape(-1)
        n = flat.numel()
        coords = np.arange(n) if n <= max_coords else rng.choice(n, max_coords, replace=False)
        analytic = grad.reshape(-1)[coords].numpy()

        def central_diff(idx, step):
            orig = float(flat[idx])
            with torch.no_grad():
                flat[idx] = orig + step
            up = forward_loss()
            with torch.no_grad():
                flat[idx] = orig - step
            dn = forward_loss()
            with torch.no_grad():
                flat[idx] = orig
            return (up - dn) / (2 * step)

        numeric = np.array([central_diff(idx, eps) for idx in coords])
        scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0),
                    1e-12)
        for j, idx in enumerate(coords):
            step = eps
            while abs(analytic[j] - numeric[j]) / scale >= tolerance and step > eps / 100:
                step /= 8.0
                numeric[j] = central_diff(idx, step)
        if not np.isfinite(numeric).all():
            report.nonfinite.append(name + ":numeric")
            continue
        scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
        report.per_group[name] = float(np.abs(analytic - numeric).max() / max(scale, 1e-12))
    return report
