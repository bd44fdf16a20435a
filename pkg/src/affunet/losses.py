"""Training objectives. All reductions are means unless noted."""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.func import functional_call

from .tensor import ShapeError, gaussian_blur, hflip, record_kinks

LOG_EPS = 1e-7


@dataclass
class LossWeights:
    l1d: float = 1.0
    l1p: float = 3.0
    perc: float = 1.0
    sym: float = 0.3
    std: float = 1.0
    tv: float = 0.3
    adv: float = 0.01

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"loss weight {f.name} must be non-negative")

    @classmethod
    def from_dict(cls, d: dict | None) -> "LossWeights":
        return cls(**(d or {}))

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class GaussianParams:
    size: int = 9
    sigma: float = 3.0

    @classmethod
    def for_resolution(cls, res: int) -> "GaussianParams":
        return cls(9, 3.0 * res / 512)

    def __call__(self, x):
        return gaussian_blur(x, self.size, self.sigma)


def _match(kind, a, b):
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {list(a.shape)} vs {list(b.shape)}")


def l1_loss(a, b):
    _match("l1_loss", a, b)
    d = a - b
    record_kinks(d > 0)
    return d.abs().mean()


def reconstruction_loss(image, rendered, pos, pos_gt, w: LossWeights):
    return w.l1d * l1_loss(image, rendered) + w.l1p * l1_loss(pos, pos_gt)


class FeatureExtractor(nn.Module):
    """Frozen random-weight VGG19-style stack truncated after its 13th conv.

    Taps sit after the activations of convs 1, 3, 5, 9 and 13 (the first conv of
    each block). Weights come from a private seeded generator.
    """

    TAPS = (1, 3, 5, 9, 13)
    BLOCKS = (2, 2, 4, 4, 1)

    def __init__(self, width: int = 8, seed: int = 1234, in_ch: int = 3):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        widths = (width, 2 * width, 4 * width, 8 * width, 8 * width)
        self.convs = nn.ModuleList()
        self.pool_after: set[int] = set()
        c = in_ch
        n = 0
        for block, (reps, wb) in enumerate(zip(self.BLOCKS, widths)):
            for _ in range(reps):
                conv = nn.Conv2d(c, wb, 3, padding=1)
                std = math.sqrt(2.0 / (c * 9))
                with torch.no_grad():
                    conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) * std)
                    conv.bias.zero_()
                self.convs.append(conv)
                c = wb
                n += 1
            if block < len(self.BLOCKS) - 1:
                self.pool_after.add(n)
        for p in self.parameters():
            p.requires_grad_(False)
        self.min_resolution = 2 ** (len(self.BLOCKS) - 1)

    def forward(self, x) -> list[torch.Tensor]:
        if min(x.shape[-2:]) < self.min_resolution:
            raise ShapeError(
                f"perceptual features need at least {self.min_resolution}px, got {list(x.shape[-2:])}"
            )
        feats = []
        for i, conv in enumerate(self.convs, 1):
            x = conv(x)
            record_kinks(x > 0)
            x = F.relu(x)
            if i in self.TAPS:
                feats.append(x)
            if i in self.pool_after:
                x = F.avg_pool2d(x, 2)
        return feats


def perceptual_loss(a, b, fx: FeatureExtractor, weight: float = 1.0):
    """``weight * sum_i |F_i(a) - F_i(b)|_1 / M_i`` (per sample, batch-averaged)."""
    _match("perceptual_loss", a, b)
    total = a.new_zeros(())
    for fa, fb in zip(fx(a), fx(b)):
        d = fa - fb
        record_kinks(d > 0)
        total = total + d.abs().mean()
    return weight * total


def symmetry_loss(diffuse, weight: float, blur: GaussianParams):
    return weight * l1_loss(blur(diffuse), blur(hflip(diffuse)))


def _safe_sqrt(v):
    pos = v > 0
    return torch.where(pos, torch.sqrt(torch.where(pos, v, torch.ones_like(v))), torch.zeros_like(v))


def std_loss(image, mask, weight: float, blur: GaussianParams):
    """Masked standard deviation of the blurred image around its masked mean.

    ``mask`` is ``[B, 1, H, W]`` (or broadcastable); squared deviations are
    averaged over channels and masked pixels, then square-rooted per sample.
    """
    if mask.dim() == 2:
        mask = mask[None, None]
    if mask.shape[-2:] != image.shape[-2:]:
        raise ShapeError(f"std_loss: mask {list(mask.shape)} vs image {list(image.shape)}")
    mask = mask.to(image.dtype).expand(image.shape[0], 1, *image.shape[-2:])
    count = mask.sum(dim=(1, 2, 3))
    if (count == 0).any():
        raise ValueError("std_loss: empty skin mask")
    g = blur(image)
    n = count.view(-1, 1, 1, 1)
    mean = (g * mask).sum(dim=(2, 3), keepdim=True) / n
    # second pass removes the rounding residue of the first, so a constant
    # image has exactly zero deviation
    mean = mean + ((g - mean) * mask).sum(dim=(2, 3), keepdim=True) / n
    sq = ((g - mean) ** 2 * mask).sum(dim=(1, 2, 3)) / (count * image.shape[1])
    return weight * _safe_sqrt(sq).mean()


def tv_loss(light, weight: float):
    gx = light[..., :, 1:] - light[..., :, :-1]
    gy = light[..., 1:, :] - light[..., :-1, :]
    record_kinks(gx > 0)
    record_kinks(gy > 0)
    total = light.new_zeros(())
    if gx.numel():
        total = total + gx.abs().mean()
    if gy.numel():
        total = total + gy.abs().mean()
    return weight * total


def _log_prob(logits, real: bool):
    p = torch.sigmoid(logits)
    q = p if real else 1 - p
    return torch.log(q.clamp(LOG_EPS, 1.0))


def image_pyramid(x, levels: int = 3) -> list[torch.Tensor]:
    out = [x]
    for _ in range(levels - 1):
        out.append(F.avg_pool2d(out[-1], 2))
    return out


def discriminator_loss(real, fake, discriminators, weight: float):
    """``weight * sum_k 0.5 * (-log D_k(real) - log(1 - D_k(fake)))``; the fake
    branch is detached from the generator."""
    _match("adversarial_losses", real, fake)
    total = real.new_zeros(())
    for d, r, f in zip(discriminators, image_pyramid(real, len(discriminators)),
                       image_pyramid(fake.detach(), len(discriminators))):
        total = total - 0.5 * (_log_prob(d(r), True).mean() + _log_prob(d(f), False).mean())
    return weight * total


def generator_loss(fake, discriminators, weight: float):
    """Non-saturating ``weight * sum_k -log D_k(fake)``; discriminator weights are
    read detached so no gradient reaches them."""
    total = fake.new_zeros(())
    for d, f in zip(discriminators, image_pyramid(fake, len(discriminators))):
        params = {n: p.detach() for n, p in d.named_parameters()}
        logits = functional_call(d, params, (f,))
        total = total - _log_prob(logits, True).mean()
    return weight * total


def adversarial_losses(real, fake, discriminators, weight: float):
    return generator_loss(fake, discriminators, weight), discriminator_loss(real, fake, discriminators, weight)


def auxiliary_diffuse_loss(diffuse, diffuse_gt, fx: FeatureExtractor, perc_weight: float = 1.0):
    if diffuse_gt is None:
        return diffuse.new_zeros(())
    return l1_loss(diffuse, diffuse_gt) + perceptual_loss(diffuse, diffuse_gt, fx, perc_weight)
