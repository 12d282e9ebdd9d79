"""Differentiable tensor operations used by every block of the network.

Tensors are ``torch.Tensor`` objects in channels-first layout (N, C, D, H, W).
Autograd supplies the reverse-mode tape; this module adds the shape contracts
(no implicit broadcasting except channel-wise scale/shift), finite checks and an
independent central finite-difference gradient checker.
"""
import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigurationError, ContractViolation, NumericFaultError

__all__ = [
    "conv3d",
    "trilinear_upsample",
    "global_avg_pool",
    "softmax",
    "sigmoid",
    "relu",
    "leaky_relu",
    "instance_norm",
    "matmul_batched",
    "add",
    "scale_channels",
    "concat_channels",
    "backward",
    "assert_finite",
    "Conv3d",
    "InstanceNorm3d",
    "numerical_gradient",
    "relative_error",
    "check_input_gradient",
    "check_directional_gradient",
]


def _triple(v, name):
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(a) for a in v)
    if len(v) != 3:
        raise ConfigurationError(f"{name} must be an int or a triple, got {v}")
    return v


def _require_5d(x, op):
    if x.dim() != 5:
        raise ConfigurationError(f"{op} expects an N x C x D x H x W tensor, got shape {tuple(x.shape)}")


def assert_finite(x, where="tensor"):
    if not torch.isfinite(x).all():
        raise NumericFaultError(f"non-finite value in {where}", layer=where)
    return x


def conv3d(input, weight, bias=None, stride=1, padding=0):
    """3D cross-correlation.

    Output extent per axis is ``floor((n + 2 * pad - k) / stride) + 1``.
    """
    _require_5d(input, "conv3d")
    if weight.dim() != 5:
        raise ConfigurationError(f"conv3d weight must be 5-D, got shape {tuple(weight.shape)}")
    stride = _triple(stride, "stride")
    padding = _triple(padding, "padding")
    if input.shape[1] != weight.shape[1]:
        raise ConfigurationError(
            f"conv3d channel mismatch: input shape {tuple(input.shape)} vs weight shape {tuple(weight.shape)}"
        )
    if min(stride) < 1 or min(padding) < 0:
        raise ConfigurationError(f"conv3d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    for ax in range(3):
        if input.shape[2 + ax] + 2 * padding[ax] < weight.shape[2 + ax]:
            raise ConfigurationError(
                f"conv3d kernel larger than padded input: input shape {tuple(input.shape)}, "
                f"weight shape {tuple(weight.shape)}, padding {padding}"
            )
    if bias is not None and tuple(bias.shape) != (weight.shape[0],):
        raise ConfigurationError(f"conv3d bias shape {tuple(bias.shape)} does not match {weight.shape[0]} outputs")
    return F.conv3d(input, weight, bias, stride=stride, padding=padding)


def trilinear_upsample(input, target):
    """Resize the spatial extents to ``target`` with align-corners trilinear interpolation."""
    _require_5d(input, "trilinear_upsample")
    target = _triple(target, "target")
    if min(target) < 1:
        raise ConfigurationError(f"trilinear_upsample target extents must be >= 1, got {target}")
    if tuple(input.shape[2:]) == target:
        return input
    if tuple(input.shape[2:]) == (1, 1, 1):
        # align_corners with a single source sample is a broadcast
        return input.expand(*input.shape[:2], *target)
    return F.interpolate(input, size=target, mode="trilinear", align_corners=True)


def global_avg_pool(input):
    _require_5d(input, "global_avg_pool")
    return input.mean(dim=(2, 3, 4), keepdim=True)


def softmax(input, axis):
    if not -input.dim() <= axis < input.dim():
        raise ConfigurationError(f"softmax axis {axis} out of range for {input.dim()}-D tensor")
    # torch subtracts the running max internally
    return torch.softmax(input, dim=axis)


def sigmoid(input):
    return torch.sigmoid(input)


def relu(input):
    return torch.relu(input)


def leaky_relu(input, negative_slope=0.01):
    return F.leaky_relu(input, negative_slope)


def instance_norm(input, gain=None, shift=None, eps=1e-5):
    """Normalize each (sample, channel) over its spatial positions, then apply gain/shift."""
    _require_5d(input, "instance_norm")
    mean = input.mean(dim=(2, 3, 4), keepdim=True)
    var = input.var(dim=(2, 3, 4), keepdim=True, unbiased=False)
    out = (input - mean) / torch.sqrt(var + eps)
    c = input.shape[1]
    if gain is not None:
        if tuple(gain.shape) != (c,):
            raise ConfigurationError(f"instance_norm gain shape {tuple(gain.shape)} != ({c},)")
        out = out * gain.view(1, c, 1, 1, 1)
    if shift is not None:
        if tuple(shift.shape) != (c,):
            raise ConfigurationError(f"instance_norm shift shape {tuple(shift.shape)} != ({c},)")
        out = out + shift.view(1, c, 1, 1, 1)
    return out


def matmul_batched(a, b):
    if a.dim() != 3 or b.dim() != 3 or a.shape[0] != b.shape[0] or a.shape[2] != b.shape[1]:
        raise ConfigurationError(f"matmul_batched shape mismatch: {tuple(a.shape)} @ {tuple(b.shape)}")
    return torch.bmm(a, b)


def add(a, b):
    if a.shape != b.shape:
        raise ConfigurationError(f"add shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return a + b


def scale_channels(x, s):
    """Multiply ``x`` (N, C, D, H, W) by per-channel factors ``s`` (N, C, 1, 1, 1)."""
    _require_5d(x, "scale_channels")
    if tuple(s.shape) != (x.shape[0], x.shape[1], 1, 1, 1):
        raise ConfigurationError(f"scale_channels factor shape {tuple(s.shape)} incompatible with {tuple(x.shape)}")
    return x * s


def concat_channels(xs):
    ref = xs[0].shape
    for x in xs[1:]:
        if x.shape[0] != ref[0] or x.shape[2:] != ref[2:]:
            raise ConfigurationError(f"concat_channels shape mismatch: {tuple(ref)} vs {tuple(x.shape)}")
    return torch.cat(list(xs), dim=1)


def backward(loss):
    if loss.numel() != 1 or loss.dim() != 0:
        raise ContractViolation(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.backward()


class Conv3d(nn.Module):
    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1, padding=None, bias=True):
        super().__init__()
        k = _triple(kernel_size, "kernel_size")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = _triple(stride, "stride")
        self.padding = tuple(kk // 2 for kk in k) if padding is None else _triple(padding, "padding")
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, *k))
        self.bias = nn.Parameter(torch.zeros(out_channels)) if bias else None
        nn.init.kaiming_normal_(self.weight, nonlinearity="relu")

    def forward(self, x):
        return conv3d(x, self.weight, self.bias, self.stride, self.padding)

    def extra_repr(self):
        k = tuple(self.weight.shape[2:])
        return f"{self.in_channels}, {self.out_channels}, kernel={k}, stride={self.stride}, bias={self.bias is not None}"


class InstanceNorm3d(nn.Module):
    def __init__(self, channels, eps=1e-5):
        super().__init__()
        self.eps = eps
        self.gain = nn.Parameter(torch.ones(channels))
        self.shift = nn.Parameter(torch.zeros(channels))

    def forward(self, x):
        return instance_norm(x, self.gain, self.shift, self.eps)


# -- finite-difference oracle -------------------------------------------------


def numerical_gradient(fn, x, eps=1e-4):
    """Central finite-difference gradient of scalar ``fn(x)`` w.r.t. every element of ``x``.

    ``x`` is perturbed in place (under no_grad) and restored afterwards.
    """
    grad = torch.zeros_like(x)
    flat = x.data.view(-1)
    g = grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            fp = float(fn())
            flat[i] = orig - eps
            fm = float(fn())
            flat[i] = orig
            g[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def check_input_gradient(fn, x, eps=1e-4):
    """Relative error between autograd and finite differences for d fn(x) / dx.

    ``fn`` maps a tensor to a scalar tensor.
    """
    x = x.detach().clone().requires_grad_(True)
    out = fn(x)
    backward(out)
    analytic = x.grad.detach().clone()
    numeric = numerical_gradient(lambda: fn(x), x, eps)
    return relative_error(analytic.numpy(), numeric.numpy())


def check_directional_gradient(loss_fn, params, eps=1e-4, n_dirs=3, generator=None):
    """Compare <grad, v> against a central difference along random directions ``v``.

    ``params`` are leaf tensors (e.g. a module's parameters plus an input tensor).
    Returns the worst relative error over ``n_dirs`` directions.
    """
    params = list(params)
    frozen = [p for p in params if not p.requires_grad]
    for p in params:
        p.grad = None
    for p in frozen:
        p.requires_grad_(True)
    try:
        loss = loss_fn()
        backward(loss)
    finally:
        for p in frozen:
            p.requires_grad_(False)
    grads = [torch.zeros_like(p) if p.grad is None else p.grad.detach().clone() for p in params]
    worst = 0.0
    for _ in range(n_dirs):
        dirs = [torch.randn(p.shape, dtype=p.dtype, generator=generator) for p in params]
        norm = math.sqrt(sum(float((d * d).sum()) for d in dirs))
        dirs = [d / norm for d in dirs]
        analytic = sum(float((g * d).sum()) for g, d in zip(grads, dirs))
        with torch.no_grad():
            for p, d in zip(params, dirs):
                p.add_(eps * d)
            fp = float(loss_fn())
            for p, d in zip(params, dirs):
                p.sub_(2 * eps * d)
            fm = float(loss_fn())
            for p, d in zip(params, dirs):
                p.add_(eps * d)
        numeric = (fp - fm) / (2 * eps)
        worst = max(worst, relative_error([analytic], [numeric]))
    return worst
