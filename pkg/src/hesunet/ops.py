"""Differentiable array operations used throughout the network.

Contract-checked wrappers over torch. Every operation accepts either a
single ``(C, H, W)`` feature map or a batched ``(N, C, H, W)`` stack,
validates shapes before dispatch, and participates in reverse-mode
autograd. The conventions that matter for reproducibility are pinned
here and locked down by tests:

* convolution is cross-correlation with zero padding,
* bilinear sampling uses half-pixel source coordinates with edge
  clamping (identity whenever the target size equals the source size),
* adaptive average pooling uses ``[floor(i*H/out), ceil((i+1)*H/out))``
  windows,
* pixel shuffle maps ``in[c*r*r + a*r + b, h, w]`` to
  ``out[c, h*r + a, w*r + b]``,
* the Haar transform is orthonormal, so the four subbands carry exactly
  the energy of the input.

Set :func:`set_finite_checks` to make every operation assert that its
output is finite; the network's forward pass performs its own per-stage
checks regardless.
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import NonFiniteError

_FINITE_CHECKS = False


def set_finite_checks(enabled: bool) -> None:
    """Toggle NaN/Inf assertions on every operation's output."""
    global _FINITE_CHECKS
    _FINITE_CHECKS = enabled


def assert_finite(x: Tensor, context: str) -> Tensor:
    if not torch.isfinite(x).all():
        raise NonFiniteError(f"non-finite values in {context}")
    return x


def _guard(x: Tensor, op_name: str) -> Tensor:
    if _FINITE_CHECKS:
        assert_finite(x, op_name)
    return x


def _batched(x: Tensor, op_name: str) -> tuple[Tensor, bool]:
    """Normalize to (N, C, H, W); remember whether a batch axis was added."""
    if x.dim() == 3:
        return x.unsqueeze(0), True
    if x.dim() == 4:
        return x, False
    raise ValueError(f"{op_name}: expected a (C,H,W) or (N,C,H,W) tensor, got shape {tuple(x.shape)}")


def _unbatch(x: Tensor, squeeze: bool) -> Tensor:
    return x.squeeze(0) if squeeze else x


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    *,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
    groups: int = 1,
) -> Tensor:
    """2-D cross-correlation with zero padding, stride, dilation and groups."""
    xb, squeeze = _batched(x, "conv2d")
    if weight.dim() != 4:
        raise ValueError(f"conv2d: weight must be 4-D, got shape {tuple(weight.shape)}")
    out_channels, in_per_group, kh, kw = weight.shape
    in_channels = xb.shape[1]
    if groups < 1 or in_channels % groups or out_channels % groups:
        raise ValueError(
            f"conv2d: groups={groups} must divide in_channels={in_channels} and out_channels={out_channels}"
        )
    if in_per_group != in_channels // groups:
        raise ValueError(
            f"conv2d: weight expects {in_per_group} channels per group, input provides {in_channels // groups}"
        )
    if bias is not None and bias.shape != (out_channels,):
        raise ValueError(f"conv2d: bias shape {tuple(bias.shape)} does not match {out_channels} output channels")
    h, w = xb.shape[2], xb.shape[3]
    out_h = (h + 2 * padding - dilation * (kh - 1) - 1) // stride + 1
    out_w = (w + 2 * padding - dilation * (kw - 1) - 1) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ValueError(f"conv2d: non-positive output extent {out_h}x{out_w} for input {h}x{w}")
    out = F.conv2d(xb, weight, bias, stride=stride, padding=padding, dilation=dilation, groups=groups)
    return _unbatch(_guard(out, "conv2d"), squeeze)


def depthwise_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, *, padding: int = 1) -> Tensor:
    """Per-channel convolution (groups == channels), stride 1, size preserving."""
    xb, squeeze = _batched(x, "depthwise_conv2d")
    channels = xb.shape[1]
    if weight.dim() != 4 or weight.shape[0] != channels or weight.shape[1] != 1:
        raise ValueError(
            f"depthwise_conv2d: weight shape {tuple(weight.shape)} does not match {channels} input channels"
        )
    if weight.shape[2] != 2 * padding + 1 or weight.shape[3] != 2 * padding + 1:
        raise ValueError("depthwise_conv2d: padding must preserve the spatial size")
    out = conv2d(xb, weight, bias, stride=1, padding=padding, groups=channels)
    return _unbatch(out, squeeze)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resampling with half-pixel source coordinates and edge clamping."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"bilinear_resize: target size {out_h}x{out_w} must be positive")
    xb, squeeze = _batched(x, "bilinear_resize")
    if xb.shape[2:] == (out_h, out_w):
        return _unbatch(xb, squeeze)
    out = F.interpolate(xb, size=(out_h, out_w), mode="bilinear", align_corners=False)
    return _unbatch(_guard(out, "bilinear_resize"), squeeze)


def adaptive_avg_pool(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Average pooling onto an output grid that tiles the input with floor/ceil windows."""
    xb, squeeze = _batched(x, "adaptive_avg_pool")
    h, w = xb.shape[2], xb.shape[3]
    if not (1 <= out_h <= h and 1 <= out_w <= w):
        raise ValueError(f"adaptive_avg_pool: target {out_h}x{out_w} must be within input {h}x{w}")
    out = F.adaptive_avg_pool2d(xb, (out_h, out_w))
    return _unbatch(_guard(out, "adaptive_avg_pool"), squeeze)


def max_pool2x2(x: Tensor) -> Tensor:
    """2x2 max pooling with stride 2 (the downsampling ablation baseline)."""
    xb, squeeze = _batched(x, "max_pool2x2")
    h, w = xb.shape[2], xb.shape[3]
    if h % 2 or w % 2:
        raise ValueError(f"max_pool2x2: spatial extents must be even, got {h}x{w}")
    return _unbatch(F.max_pool2d(xb, kernel_size=2), squeeze)


def pixel_shuffle(x: Tensor, r: int) -> Tensor:
    """Rearrange r*r channel blocks into an r-times larger spatial grid."""
    xb, squeeze = _batched(x, "pixel_shuffle")
    channels = xb.shape[1]
    if r < 1 or channels % (r * r):
        raise ValueError(f"pixel_shuffle: channel count {channels} is not divisible by r*r={r * r}")
    return _unbatch(F.pixel_shuffle(xb, r), squeeze)


def pixel_unshuffle(x: Tensor, r: int) -> Tensor:
    """Exact inverse of :func:`pixel_shuffle`."""
    xb, squeeze = _batched(x, "pixel_unshuffle")
    h, w = xb.shape[2], xb.shape[3]
    if r < 1 or h % r or w % r:
        raise ValueError(f"pixel_unshuffle: spatial extents {h}x{w} are not divisible by r={r}")
    return _unbatch(F.pixel_unshuffle(xb, r), squeeze)


def haar_dwt2(x: Tensor) -> tuple[Tensor, Tensor, Tensor, Tensor]:
    """Orthonormal 2-D Haar transform on disjoint 2x2 blocks.

    Returns ``(ll, lh, lv, ld)``: approximation, horizontal detail,
    vertical detail, diagonal detail, each at half resolution. The
    transform preserves the sum of squares exactly, so no information is
    lost; :func:`haar_idwt2` inverts it.
    """
    xb, squeeze = _batched(x, "haar_dwt2")
    h, w = xb.shape[2], xb.shape[3]
    if h % 2 or w % 2:
        raise ValueError(f"haar_dwt2: spatial extents must be even, got {h}x{w}")
    a = xb[..., 0::2, 0::2]
    b = xb[..., 0::2, 1::2]
    c = xb[..., 1::2, 0::2]
    d = xb[..., 1::2, 1::2]
    ll = (a + b + c + d) / 2
    lh = (a - b + c - d) / 2
    lv = (a + b - c - d) / 2
    ld = (a - b - c + d) / 2
    return tuple(_unbatch(_guard(t, "haar_dwt2"), squeeze) for t in (ll, lh, lv, ld))


def haar_idwt2(ll: Tensor, lh: Tensor, lv: Tensor, ld: Tensor) -> Tensor:
    """Inverse of :func:`haar_dwt2`."""
    parts = []
    squeeze = False
    for name, t in (("ll", ll), ("lh", lh), ("lv", lv), ("ld", ld)):
        tb, sq = _batched(t, "haar_idwt2")
        if parts and tb.shape != parts[0].shape:
            raise ValueError(f"haar_idwt2: subband {name} shape {tuple(t.shape)} differs from ll")
        parts.append(tb)
        squeeze = sq
    ll, lh, lv, ld = parts
    a = (ll + lh + lv + ld) / 2
    b = (ll - lh + lv - ld) / 2
    c = (ll + lh - lv - ld) / 2
    d = (ll - lh - lv + ld) / 2
    n, ch, h, w = ll.shape
    out = ll.new_empty((n, ch, 2 * h, 2 * w))
    out[..., 0::2, 0::2] = a
    out[..., 0::2, 1::2] = b
    out[..., 1::2, 0::2] = c
    out[..., 1::2, 1::2] = d
    return _unbatch(_guard(out, "haar_idwt2"), squeeze)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
    *,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over batch and spatial axes.

    Training mode normalizes with batch statistics and folds them into the
    running buffers with the given momentum; eval mode uses the buffers.
    """
    xb, squeeze = _batched(x, "batch_norm")
    channels = xb.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta), ("running_mean", running_mean), ("running_var", running_var)):
        if t.shape != (channels,):
            raise ValueError(f"batch_norm: {name} shape {tuple(t.shape)} does not match {channels} channels")
    out = F.batch_norm(xb, running_mean, running_var, gamma, beta, training=training, momentum=momentum, eps=eps)
    return _unbatch(_guard(out, "batch_norm"), squeeze)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, *, eps: float = 1e-5) -> Tensor:
    """Normalize over the channel axis independently at each spatial location."""
    xb, squeeze = _batched(x, "layer_norm")
    channels = xb.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ValueError(f"layer_norm: affine parameters must have shape ({channels},)")
    mean = xb.mean(dim=1, keepdim=True)
    var = xb.var(dim=1, unbiased=False, keepdim=True)
    normed = (xb - mean) / torch.sqrt(var + eps)
    out = normed * gamma.view(1, -1, 1, 1) + beta.view(1, -1, 1, 1)
    return _unbatch(_guard(out, "layer_norm"), squeeze)


def relu(x: Tensor) -> Tensor:
    return torch.relu(x)


def sigmoid(x: Tensor) -> Tensor:
    return torch.sigmoid(x)


def concat(parts: list[Tensor] | tuple[Tensor, ...]) -> Tensor:
    """Concatenate feature maps along the channel axis."""
    if not parts:
        raise ValueError("concat: need at least one tensor")
    dims = {t.dim() for t in parts}
    if len(dims) != 1 or dims.pop() not in (3, 4):
        raise ValueError("concat: all tensors must share rank 3 or 4")
    return torch.cat(list(parts), dim=-3)


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss; leaf gradients accumulate."""
    if loss.numel() != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {tuple(loss.shape)}")
    loss.backward()
