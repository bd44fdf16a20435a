"""AffUNet, the light and pose encoders, and multi-scale patch discriminators."""
from __future__ import annotations

import json
from contextlib import contextmanager
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .affconv import AffineConv2d
from .tensor import leaky_relu, load_atsr, save_atsr


@dataclass
class NetworkConfig:
    resolution: int = 64
    width: int = 16
    kernel: int = 3
    slope: float = 0.2
    affine: bool = True  # False swaps every affine conv for a vanilla stride-2 conv
    tint: bool = False  # optional global RGB illumination head on the light encoder

    def __post_init__(self):
        if self.resolution % 8 or self.resolution < 8:
            raise ValueError(f"resolution must be a positive multiple of 8, got {self.resolution}")
        if self.kernel % 2 == 0:
            raise ValueError("kernel size must be odd")

    @property
    def channels(self) -> tuple[int, int, int, int]:
        w = self.width
        return (w, 2 * w, 4 * w, 8 * w)

    def to_dict(self) -> dict:
        return asdict(self)


@contextmanager
def seeded(seed: int):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        yield


def _down(cfg: NetworkConfig, cin, cout) -> nn.Module:
    if cfg.affine:
        return AffineConv2d(cin, cout, cfg.kernel, stride=2)
    return nn.Conv2d(cin, cout, cfg.kernel, stride=2, padding=cfg.kernel // 2)


def _conv(cfg: NetworkConfig, cin, cout) -> nn.Conv2d:
    return nn.Conv2d(cin, cout, cfg.kernel, padding=cfg.kernel // 2)


class AffUNet(nn.Module):
    """11 convolutions: vanilla stride 1, three stride-2 affine convs, then seven
    vanilla stride-1 convs around three bilinear 2x upsamplings with
    concatenated skips from the encoder."""

    def __init__(self, cfg: NetworkConfig, out_ch: int = 3, head: str = "sigmoid"):
        super().__init__()
        if head not in ("sigmoid", "linear"):
            raise ValueError(f"unknown head {head!r}")
        self.cfg = cfg
        self.head = head
        self.skips = True
        c1, c2, c3, c4 = cfg.channels
        self.enc1 = _conv(cfg, 3, c1)
        self.enc2 = _down(cfg, c1, c2)
        self.enc3 = _down(cfg, c2, c3)
        self.enc4 = _down(cfg, c3, c4)
        self.mid = _conv(cfg, c4, c4)
        self.dec3a = _conv(cfg, c4 + c3, c3)
        self.dec3b = _conv(cfg, c3, c3)
        self.dec2a = _conv(cfg, c3 + c2, c2)
        self.dec2b = _conv(cfg, c2, c2)
        self.dec1a = _conv(cfg, c2 + c1, c1)
        self.out = _conv(cfg, c1, out_ch)

    def layer_kinds(self) -> list[str]:
        convs = [self.enc1, self.enc2, self.enc3, self.enc4, self.mid, self.dec3a,
                 self.dec3b, self.dec2a, self.dec2b, self.dec1a, self.out]
        kinds = ["affine" if isinstance(m, AffineConv2d) else "vanilla" for m in convs]
        return kinds + ["up"] * 3

    def _act(self, x):
        return leaky_relu(x, self.cfg.slope)

    def _fuse(self, x, skip):
        x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        if not self.skips:
            skip = torch.zeros_like(skip)
        return torch.cat([x, skip], dim=1)

    def encode(self, x) -> list[torch.Tensor]:
        e1 = self._act(self.enc1(x))
        e2 = self._act(self.enc2(e1))
        e3 = self._act(self.enc3(e2))
        e4 = self._act(self.enc4(e3))
        return [e1, e2, e3, e4]

    def forward(self, x):
        if x.shape[-1] % 8 or x.shape[-2] % 8:
            raise ValueError(f"AffUNet input must be divisible by 8, got {list(x.shape)}")
        e1, e2, e3, e4 = self.encode(x)
        y = self._act(self.mid(e4))
        y = self._act(self.dec3b(self._act(self.dec3a(self._fuse(y, e3)))))
        y = self._act(self.dec2b(self._act(self.dec2a(self._fuse(y, e2)))))
        y = self._act(self.dec1a(self._fuse(y, e1)))
        y = self.out(y)
        return torch.sigmoid(y) if self.head == "sigmoid" else y


class LightEncoder(nn.Module):
    """Image -> single-channel light map at 1/8 resolution per axis."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        c1, c2, c3, c4 = cfg.channels
        self.enc1 = _conv(cfg, 3, c1)
        self.enc2 = _down(cfg, c1, c2)
        self.enc3 = _down(cfg, c2, c3)
        self.enc4 = _down(cfg, c3, c4)
        self.head = _conv(cfg, c4, 1)
        self.tint_head = nn.Conv2d(c4, 3, cfg.resolution // 8) if cfg.tint else None

    def forward(self, x):
        a = lambda t: leaky_relu(t, self.cfg.slope)  # noqa: E731
        y = a(self.enc4(a(self.enc3(a(self.enc2(a(self.enc1(x))))))))
        light = torch.sigmoid(self.head(y))
        if self.tint_head is None:
            return light
        return light, 2 * torch.sigmoid(self.tint_head(y)).flatten(1)


class PoseEncoder(nn.Module):
    """Vanilla encoder ending in a conv whose kernel spans the whole 1/8 feature
    map; outputs ``[B, 6, 1, 1]`` (axis-angle rotation, translation)."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        c1, c2, c3, c4 = cfg.channels
        k = cfg.kernel
        self.convs = nn.ModuleList([
            _conv(cfg, 3, c1),
            nn.Conv2d(c1, c2, k, 2, k // 2),
            nn.Conv2d(c2, c3, k, 2, k // 2),
            nn.Conv2d(c3, c4, k, 2, k // 2),
        ])
        self.head = nn.Conv2d(c4, 6, cfg.resolution // 8)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x):
        for conv in self.convs:
            x = leaky_relu(conv(x), self.cfg.slope)
        return self.head(x)


class PatchDiscriminator(nn.Module):
    """Four stride-2 4x4 convs followed by a 3x3 logit conv."""

    def __init__(self, width: int = 16, in_ch: int = 3, slope: float = 0.2):
        super().__init__()
        chans = [in_ch, width, 2 * width, 4 * width, 8 * width]
        self.slope = slope
        self.downs = nn.ModuleList(
            nn.Conv2d(chans[i], chans[i + 1], 4, 2, 1) for i in range(4)
        )
        self.logit = nn.Conv2d(chans[-1], 1, 3, 1, 1)

    @staticmethod
    def logit_size(n: int) -> int:
        for _ in range(4):
            n = (n + 2 - 4) // 2 + 1
        return n

    def forward(self, x):
        for conv in self.downs:
            x = leaky_relu(conv(x), self.slope)
        return self.logit(x)


def build_affunet(cfg: NetworkConfig, out_ch: int = 3, head: str = "sigmoid", seed: int = 0) -> AffUNet:
    with seeded(seed):
        return AffUNet(cfg, out_ch, head)


def build_light_encoder(cfg: NetworkConfig, seed: int = 0) -> LightEncoder:
    with seeded(seed):
        return LightEncoder(cfg)


def build_pose_encoder(cfg: NetworkConfig, seed: int = 0) -> PoseEncoder:
    with seeded(seed):
        return PoseEncoder(cfg)


def build_multiscale_discriminators(cfg: NetworkConfig, seed: int = 0, n: int = 3) -> nn.ModuleList:
    smallest = cfg.resolution // 2 ** (n - 1)
    if PatchDiscriminator.logit_size(smallest) < 1:
        raise ValueError(f"resolution {cfg.resolution} too small for {n} discriminator scales")
    with seeded(seed):
        return nn.ModuleList(PatchDiscriminator(cfg.width) for _ in range(n))


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def field_parameter_count(module: nn.Module) -> int:
    return sum(
        m.field_weight.numel() + m.field_bias.numel()
        for m in module.modules() if isinstance(m, AffineConv2d)
    )


class FaceNets(nn.Module):
    """The four generator networks."""

    def __init__(self, cfg: NetworkConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.diffuse = build_affunet(cfg, 3, "sigmoid", seed)
        self.position = build_affunet(cfg, 3, "linear", seed + 1)
        self.light = build_light_encoder(cfg, seed + 2)
        self.pose = build_pose_encoder(cfg, seed + 3)


# --- checkpoints ---------------------------------------------------------------


def save_checkpoint(directory, modules: dict[str, nn.Module], manifest: dict, extra: dict | None = None) -> None:
    """One ATSR file per tensor plus ``manifest.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    names = []
    for prefix, mod in modules.items():
        for name, t in mod.state_dict().items():
            key = f"{prefix}.{name}"
            save_atsr(d / f"{key}.atsr", t)
            names.append(key)
    for key, t in (extra or {}).items():
        save_atsr(d / f"{key}.atsr", t)
        names.append(key)
    data = dict(manifest, tensors=names)
    tmp = d / "manifest.json.tmp"
    tmp.write_text(json.dumps(data, indent=2, sort_keys=True))
    tmp.replace(d / "manifest.json")


def load_checkpoint(directory, modules: dict[str, nn.Module]) -> dict:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    for prefix, mod in modules.items():
        state = {}
        for name, ref in mod.state_dict().items():
            t = load_atsr(d / f"{prefix}.{name}.atsr")
            state[name] = t.to(ref.dtype)
        mod.load_state_dict(state)
    return manifest


def load_extra(directory, prefix: str) -> dict[str, torch.Tensor]:
    d = Path(directory)
    manifest = json.loads((d / "manifest.json").read_text())
    out = {}
    for key in manifest["tensors"]:
        if key.startswith(prefix + "."):
            out[key[len(prefix) + 1:]] = load_atsr(d / f"{key}.atsr")
    return out
