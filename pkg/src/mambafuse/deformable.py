"""Deformable convolution and deformable-token generation.

Offsets are predicted by a plain convolution (zero-initialized, so training
starts at the normal-convolution solution), then every kernel tap samples
the input at its displaced location via bilinear interpolation.  A token map
is the sum of this deformable branch and an ordinary convolution branch.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import ConfigError, Tensor
from .nn import Conv2d, Module

# OffsetField channel layout: for tap t in [0, K*K), channel 2t is the row
# displacement (dy) and channel 2t+1 the column displacement (dx).


class OffsetConv(Conv2d):
    """Plain conv producing 2*K*K offset channels; zero-initialized."""

    def __init__(self, rng, cin: int, kernel: int, stride: int, padding: int):
        super().__init__(rng, cin, 2 * kernel * kernel, kernel,
                         stride=stride, padding=padding, zero_init=True)


def predict_offsets(x: Tensor, offset_conv: OffsetConv, stride: int, kernel: int) -> Tensor:
    if offset_conv.cout != 2 * kernel * kernel:
        raise ConfigError(
            f"offset conv must have {2 * kernel * kernel} output channels, "
            f"has {offset_conv.cout}")
    if offset_conv.stride != stride or offset_conv.kernel != kernel:
        raise ConfigError("offset conv kernel/stride must match the deformable conv")
    return offset_conv(x)


def deformable_conv2d(x: Tensor, weight: Tensor, bias: Tensor | None,
                      offsets: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Convolution whose taps sample at (base location + learned offset)."""
    B, C, H, W = x.shape
    Cout, Cin, K, K2 = weight.shape
    if Cin != C or K != K2:
        raise ConfigError(f"weight {weight.shape} incompatible with input {x.shape}")
    Ho = ad.conv_out_size(H, K, stride, padding)
    Wo = ad.conv_out_size(W, K, stride, padding)
    T = K * K
    if offsets.shape != (B, 2 * T, Ho, Wo):
        raise ConfigError(
            f"offsets shape {offsets.shape} does not match output grid "
            f"{(B, 2 * T, Ho, Wo)}")
    # base sampling lattice per output site and tap
    oy = np.arange(Ho) * stride - padding
    ox = np.arange(Wo) * stride - padding
    ky, kx = np.divmod(np.arange(T), K)
    base_y = (ky[:, None, None] + oy[None, :, None]).astype(x.data.dtype)  # [T,Ho,1]
    base_x = (kx[:, None, None] + ox[None, None, :]).astype(x.data.dtype)  # [T,1,Wo]
    base_y = np.broadcast_to(base_y, (T, Ho, Wo))
    base_x = np.broadcast_to(base_x, (T, Ho, Wo))

    dy = offsets[:, 0::2]
    dx = offsets[:, 1::2]
    ys = ad.add(dy, Tensor(base_y[None]))
    xs = ad.add(dx, Tensor(base_x[None]))
    sampled = ad.grid_sample_taps(x, ys, xs)                    # [B,C*T,Ho,Wo]
    flat = ad.reshape(sampled, (B, C * T, Ho * Wo))
    wmat = ad.reshape(weight, (Cout, C * T))
    y = ad.matmul(wmat, flat)                                   # [B,Cout,Ho*Wo]
    y = ad.reshape(y, (B, Cout, Ho, Wo))
    if bias is not None:
        y = ad.add(y, ad.reshape(bias, (1, Cout, 1, 1)))
    return y


class DeformableToken(Module):
    """Token grid T = Conv(x) + DConv(x); both branches share Cout/K/stride."""

    def __init__(self, rng, cin: int, cout: int, kernel: int, stride: int, padding: int):
        super().__init__()
        self.kernel, self.stride, self.padding = kernel, stride, padding
        self.norm_conv = Conv2d(rng, cin, cout, kernel, stride=stride, padding=padding)
        self.def_conv = Conv2d(rng, cin, cout, kernel, stride=stride, padding=padding)
        self.offset_conv = OffsetConv(rng, cin, kernel, stride, padding)

    def offsets(self, x: Tensor) -> Tensor:
        return predict_offsets(x, self.offset_conv, self.stride, self.kernel)

    def __call__(self, x: Tensor) -> Tensor:
        normal = self.norm_conv(x)
        deform = deformable_conv2d(x, self.def_conv.weight, self.def_conv.bias,
                                   self.offsets(x), self.stride, self.padding)
        if normal.shape != deform.shape:
            raise ConfigError(
                f"branch shapes disagree: {normal.shape} vs {deform.shape}")
        return ad.add(normal, deform)


def deformable_token(x: Tensor, token: DeformableToken, stride: int | None = None) -> Tensor:
    if stride is not None and token.stride != stride:
        raise ConfigError(f"token module stride {token.stride} != requested {stride}")
    return token(x)
