"""Affine convolution: a convolution whose k x k sampling window is warped at
every output location by a predicted 3x2 affine matrix.

Coordinates are ``(x, y)`` with ``x`` the column and ``y`` the row index of the
input feature map. A field tensor has shape ``[B, 6, H_out, W_out]``; the six
channels row-fill ``A = [[a, b], [c, d], [tx, ty]]`` so that a window offset
``(dx, dy)`` maps to ``center + [dx, dy, 1] @ A``. The identity encoding is
``(1, 0, 0, 1, 0, 0)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from . import _kernels
from .tensor import record_kinks

IDENTITY = (1.0, 0.0, 0.0, 1.0, 0.0, 0.0)


@dataclass(frozen=True)
class KernelGrid:
    k: int

    def __post_init__(self):
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError(f"kernel size must be odd, got {self.k}")

    @property
    def offsets(self) -> torch.Tensor:
        """``[k*k, 2]`` integer offsets, x fastest: (-1,-1), (0,-1), ... for k=3."""
        r = (self.k - 1) // 2
        rng = torch.arange(-r, r + 1)
        dy, dx = torch.meshgrid(rng, rng, indexing="ij")
        return torch.stack([dx.reshape(-1), dy.reshape(-1)], dim=1)

    def augmented(self, dtype=torch.float32) -> torch.Tensor:
        """Offsets with a trailing column of ones, shape ``[k*k, 3]``."""
        off = self.offsets.to(dtype)
        return torch.cat([off, torch.ones(len(off), 1, dtype=dtype)], dim=1)


def field_to_matrices(field: torch.Tensor) -> torch.Tensor:
    """``[B, 6, H, W]`` -> ``[B, H*W, 3, 2]``."""
    b, six, h, w = field.shape
    if six != 6:
        raise ValueError(f"affine field needs 6 channels, got {six}")
    return field.reshape(b, 3, 2, h * w).permute(0, 3, 1, 2)


def identity_field(batch, h, w, dtype=torch.float32) -> torch.Tensor:
    f = torch.tensor(IDENTITY, dtype=dtype).view(1, 6, 1, 1)
    return f.expand(batch, 6, h, w).contiguous()


def transform_kernel_coords(grid: KernelGrid, A: torch.Tensor, center) -> torch.Tensor:
    """Warp one window: ``center + [offsets 1] @ A``, returns ``[k*k, 2]``."""
    A = torch.as_tensor(A)
    if A.shape != (3, 2):
        raise ValueError(f"affine matrix must be 3x2, got {list(A.shape)}")
    aug = grid.augmented(A.dtype)
    return torch.as_tensor(center, dtype=A.dtype) + aug @ A


class _BilinearSample(torch.autograd.Function):
    @staticmethod
    def forward(ctx, fmap, coords):
        b, c, h, w = fmap.shape
        fmap_cl = fmap.detach().permute(0, 2, 3, 1).contiguous()
        crd = coords.detach().to(fmap.dtype).contiguous()
        out = torch.empty(b, crd.shape[1], c, dtype=fmap.dtype)
        _kernels.bilinear_forward(fmap_cl.numpy(), crd.numpy(), out.numpy())
        ctx.save_for_backward(fmap_cl, crd)
        ctx.coords_dtype = coords.dtype
        return out

    @staticmethod
    def backward(ctx, grad_out):
        fmap_cl, crd = ctx.saved_tensors
        need_map, need_coords = ctx.needs_input_grad[:2]
        g = grad_out.detach().contiguous().to(fmap_cl.dtype)
        grad_map = torch.zeros_like(fmap_cl)
        grad_coords = torch.zeros_like(crd)
        _kernels.bilinear_backward(
            fmap_cl.numpy(), crd.numpy(), g.numpy(), grad_map.numpy(), grad_coords.numpy(),
            need_map, need_coords,
        )
        gm = grad_map.permute(0, 3, 1, 2).contiguous() if need_map else None
        gc = grad_coords.to(ctx.coords_dtype) if need_coords else None
        return gm, gc


def bilinear_sample(fmap: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Sample ``fmap`` ``[B, C, H, W]`` at real ``coords`` ``[B, P, 2]`` -> ``[B, C, P]``.

    Bilinear weights over the four integer neighbours; neighbours outside the
    map contribute zero. Differentiable in both the map and the coordinates.
    """
    if fmap.dim() != 4 or coords.dim() != 3 or coords.shape[-1] != 2:
        raise ValueError(
            f"bilinear_sample: bad shapes {list(fmap.shape)} / {list(coords.shape)}"
        )
    if coords.shape[0] != fmap.shape[0]:
        raise ValueError("bilinear_sample: batch size mismatch between map and coords")
    record_kinks(torch.floor(coords))
    return _BilinearSample.apply(fmap, coords).transpose(1, 2)


def bilinear_sample_reference(fmap: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    """Same contract as :func:`bilinear_sample`, built from torch ops and autograd."""
    b, c, h, w = fmap.shape
    x = coords[..., 0]
    y = coords[..., 1]
    x0 = torch.floor(x).detach()
    y0 = torch.floor(y).detach()
    fx = x - x0
    fy = y - y0
    x0 = x0.long()
    y0 = y0.long()
    flat = fmap.reshape(b, c, h * w).transpose(1, 2)  # [B, HW, C]
    out = None
    for ox, oy, wgt in (
        (0, 0, (1 - fx) * (1 - fy)),
        (1, 0, fx * (1 - fy)),
        (0, 1, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        xi = x0 + ox
        yi = y0 + oy
        inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        idx = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).unsqueeze(-1).expand(-1, -1, c)
        vals = torch.gather(flat, 1, idx)  # [B, P, C]
        term = vals * (wgt * inside.to(wgt.dtype)).unsqueeze(-1)
        out = term if out is None else out + term
    return out.transpose(1, 2)


def output_size(n: int, k: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - k) // stride + 1


def window_centers(h_out, w_out, k, stride, padding, dtype=torch.float32) -> torch.Tensor:
    """Input-space centers of every output window, ``[H_out*W_out, 2]``."""
    r = (k - 1) / 2
    ys = torch.arange(h_out, dtype=dtype) * stride - padding + r
    xs = torch.arange(w_out, dtype=dtype) * stride - padding + r
    cy, cx = torch.meshgrid(ys, xs, indexing="ij")
    return torch.stack([cx.reshape(-1), cy.reshape(-1)], dim=1)


def sampling_coords(field: torch.Tensor, k: int, stride: int, padding: int) -> torch.Tensor:
    """Warped window coordinates for a whole field, ``[B, H_out*W_out, k*k, 2]``."""
    _, _, h_out, w_out = field.shape
    grid = KernelGrid(k)
    A = field_to_matrices(field)  # [B, N, 3, 2]
    aug = grid.augmented(field.dtype)  # [k*k, 3]
    offsets = torch.einsum("tk,bnkc->bntc", aug, A)
    centers = window_centers(h_out, w_out, k, stride, padding, field.dtype)
    return centers[None, :, None, :] + offsets


def affine_conv2d(x, weight, bias, field, stride: int = 1, padding: int | None = None):
    """Convolve ``x`` with ``weight`` over affinely warped windows."""
    cout, cin, kh, kw = weight.shape
    if kh != kw or kh % 2 == 0:
        raise ValueError(f"affine_conv2d needs an odd square kernel, got {kh}x{kw}")
    k = kh
    if padding is None:
        padding = (k - 1) // 2
    b, c, h, w = x.shape
    if c != cin:
        raise ValueError(f"affine_conv2d: input has {c} channels, weight expects {cin}")
    h_out = output_size(h, k, stride, padding)
    w_out = output_size(w, k, stride, padding)
    if field.shape[0] != b or tuple(field.shape[2:]) != (h_out, w_out):
        raise ValueError(
            f"affine_conv2d: field grid {list(field.shape[2:])} does not match "
            f"output grid {[h_out, w_out]}"
        )
    coords = sampling_coords(field, k, stride, padding)  # [B, N, T, 2]
    n, t = coords.shape[1], coords.shape[2]
    record_kinks(torch.floor(coords))
    # channels-last gather: [B, N*T, Cin] viewed as one row per output location
    cols = _BilinearSample.apply(x, coords.reshape(b, n * t, 2)).reshape(b, n, t * cin)
    out = cols @ weight.permute(0, 2, 3, 1).reshape(cout, t * cin).t()
    if bias is not None:
        out = out + bias
    return out.permute(0, 2, 1).reshape(b, cout, h_out, w_out)


def predict_affine_field(features, weight, bias, stride: int = 1, padding: int | None = None):
    """Field predictor: a k x k convolution to 6 channels sharing the host's grid."""
    if weight.shape[0] != 6:
        raise ValueError(f"field predictor must have 6 output channels, got {weight.shape[0]}")
    if features.shape[1] != weight.shape[1]:
        raise ValueError(
            f"field predictor expects {weight.shape[1]} channels, got {features.shape[1]}"
        )
    if padding is None:
        padding = (weight.shape[-1] - 1) // 2
    return F.conv2d(features, weight, bias, stride=stride, padding=padding)


class AffineConv2d(nn.Module):
    """Drop-in replacement for ``nn.Conv2d`` (odd kernel, 'same'-style padding)."""

    def __init__(self, in_ch, out_ch, kernel_size=3, stride=1, padding=None, bias=True):
        super().__init__()
        KernelGrid(kernel_size)
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = (kernel_size - 1) // 2 if padding is None else padding
        self.weight = nn.Parameter(torch.empty(out_ch, in_ch, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.empty(out_ch)) if bias else None
        self.field_weight = nn.Parameter(torch.zeros(6, in_ch, kernel_size, kernel_size))
        self.field_bias = nn.Parameter(torch.tensor(IDENTITY))
        self.reset_parameters()

    def reset_parameters(self):
        # same scheme as nn.Conv2d so an untrained layer matches its vanilla twin
        nn.init.kaiming_uniform_(self.weight, a=math.sqrt(5))
        if self.bias is not None:
            bound = 1 / math.sqrt(self.in_ch * self.kernel_size**2)
            nn.init.uniform_(self.bias, -bound, bound)
        with torch.no_grad():
            self.field_weight.zero_()
            self.field_bias.copy_(torch.tensor(IDENTITY))

    def field(self, x):
        return predict_affine_field(x, self.field_weight, self.field_bias, self.stride, self.padding)

    def forward(self, x):
        return affine_conv2d(x, self.weight, self.bias, self.field(x), self.stride, self.padding)

    def extra_repr(self):
        return f"{self.in_ch}, {self.out_ch}, kernel_size={self.kernel_size}, stride={self.stride}"


def affine_conv_layer_forward(x, params: dict, stride: int = 1, padding: int | None = None):
    """Functional layer: predict the field from ``x`` then convolve.

    ``params`` holds ``weight``, ``bias``, ``field_weight`` and ``field_bias``.
    """
    field = predict_affine_field(x, params["field_weight"], params["field_bias"], stride, padding)
    return affine_conv2d(x, params["weight"], params.get("bias"), field, stride, padding)
