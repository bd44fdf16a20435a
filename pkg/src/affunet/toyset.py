"""Procedural face-like samples: UV diffuse texture, analytic position map,
random pose and light, and the rendered input image."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .geometry import PositionMap, ShapeParams, TriMesh, load_bundled_head, make_synthetic_position_gt, save_obj
from .render import Camera, Pose, overlay, render
from .tensor import load_atsr, save_atsr

MAX_ANGLE = math.radians(30.0)


@dataclass
class ToySample:
    image: torch.Tensor  # [3, R, R]
    diffuse: torch.Tensor  # [3, R, R]
    light: torch.Tensor  # [1, R/8, R/8]
    position: PositionMap
    pose: Pose
    background: torch.Tensor  # [3, R, R]

    @property
    def skin_mask(self) -> torch.Tensor:
        return torch.from_numpy(self.position.valid.astype(np.float32))[None]


def _ellipse(x, y, cx, cy, rx, ry, soft=0.35):
    d = np.sqrt(((x - cx) / rx) ** 2 + ((y - cy) / ry) ** 2)
    return np.clip((1 + soft - d) / soft, 0.0, 1.0)


def _paint(tex, mask, color):
    return tex * (1 - mask[..., None]) + mask[..., None] * np.asarray(color)


def face_texture(rng: np.random.Generator, res: int, valid: np.ndarray) -> np.ndarray:
    t = (np.arange(res) + 0.5) / res
    u, v = np.meshgrid(t, t, indexing="xy")
    x, y = u - 0.5, 0.5 - v
    tone = rng.uniform(0.55, 0.85)
    skin = np.array([tone, tone * rng.uniform(0.72, 0.85), tone * rng.uniform(0.58, 0.72)])
    tex = np.broadcast_to(skin, (res, res, 3)).copy()
    tex *= (1 + 0.06 * np.sin(2 * math.pi * (rng.uniform(1, 2) * x + rng.uniform(0, 1))))[..., None]
    blush = _ellipse(np.abs(x), y, 0.2, -0.1, 0.09, 0.07, soft=1.0)
    tex = _paint(tex, 0.3 * blush, skin * np.array([1.05, 0.8, 0.8]))

    ex, ey = 0.14 + rng.uniform(-0.02, 0.02), 0.08 + rng.uniform(-0.02, 0.02)
    eye_r = rng.uniform(0.05, 0.07)
    iris = rng.uniform(0.05, 0.35, 3)
    for s in (-1, 1):
        tex = _paint(tex, _ellipse(x, y, s * ex, ey, eye_r, eye_r * 0.55), (0.92, 0.92, 0.9))
        tex = _paint(tex, _ellipse(x, y, s * ex, ey, eye_r * 0.45, eye_r * 0.45), iris)
        brow = _ellipse(x, y, s * ex, ey + rng.uniform(0.07, 0.1), eye_r * 1.2, 0.018)
        tex = _paint(tex, brow, skin * rng.uniform(0.2, 0.45))
    nose = _ellipse(x, y, 0.0, -0.06, 0.035, 0.025, soft=1.0)
    tex = _paint(tex, 0.5 * nose, skin * 0.7)
    mouth = _ellipse(x, y, 0.0, -0.22 + rng.uniform(-0.02, 0.02), rng.uniform(0.08, 0.12), 0.03)
    tex = _paint(tex, mouth, (rng.uniform(0.55, 0.8), rng.uniform(0.15, 0.3), rng.uniform(0.2, 0.3)))
    for _ in range(int(rng.integers(6, 16))):
        cx, cy = rng.uniform(-0.3, 0.3), rng.uniform(-0.35, 0.35)
        r = rng.uniform(0.012, 0.03)
        tex = _paint(tex, _ellipse(x, y, cx, cy, r, r), skin * rng.uniform(0.3, 0.7))
    tex = np.clip(tex, 0.0, 1.0)
    tex[~valid] = 0.0
    return tex.transpose(2, 0, 1)


def light_map(rng: np.random.Generator, res: int) -> np.ndarray:
    t = (np.arange(res) + 0.5) / res * 2 - 1
    x, y = np.meshgrid(t, t, indexing="xy")
    ang = rng.uniform(0, 2 * math.pi)
    base = rng.uniform(0.55, 0.8)
    slope = rng.uniform(0.1, 0.3)
    spot = rng.uniform(0.0, 0.25) * np.exp(-((x - rng.uniform(-1, 1)) ** 2 + (y - rng.uniform(-1, 1)) ** 2) / 0.5)
    lm = base + slope * (math.cos(ang) * x + math.sin(ang) * y) + spot
    return np.clip(lm, 0.2, 1.0)[None]


def background(rng: np.random.Generator, res: int) -> np.ndarray:
    t = (np.arange(res) + 0.5) / res
    x, y = np.meshgrid(t, t, indexing="xy")
    ang = rng.uniform(0, 2 * math.pi)
    ramp = np.clip(0.5 + 0.5 * (math.cos(ang) * (x - 0.5) + math.sin(ang) * (y - 0.5)) * 2, 0, 1)
    c0, c1 = rng.uniform(0.0, 1.0, 3), rng.uniform(0.0, 1.0, 3)
    return (c0[:, None, None] * (1 - ramp) + c1[:, None, None] * ramp)


def make_sample(seed: int, index: int, res: int, template: TriMesh, aligned: bool = False) -> ToySample:
    rng = np.random.default_rng([seed, index])
    params = ShapeParams(
        semi_axes=(0.5, 0.55, rng.uniform(0.32, 0.45)),
        deform=rng.uniform(0.0, 0.05),
        seed=int(rng.integers(2**31)),
    )
    pm = make_synthetic_position_gt(params, res)
    diffuse = torch.from_numpy(face_texture(rng, res, pm.valid).astype(np.float32))
    light = torch.from_numpy(light_map(rng, res // 8).astype(np.float32))
    yaw, pitch = rng.uniform(-MAX_ANGLE, MAX_ANGLE, 2)
    pose = Pose.identity() if aligned else Pose.from_euler(yaw=yaw, pitch=pitch)
    bg = torch.from_numpy(background(rng, res).astype(np.float32))
    cam = Camera.for_uv_frame(res)
    img, cov = render(pm, template, diffuse, light, pose, cam)
    image = overlay(img, cov, bg)
    return ToySample(image, diffuse, light, pm, pose, bg)


def rerender(sample: ToySample, template: TriMesh) -> torch.Tensor:
    res = sample.image.shape[-1]
    img, cov = render(sample.position, template, sample.diffuse, sample.light, sample.pose, Camera.for_uv_frame(res))
    return overlay(img, cov, sample.background)


@dataclass
class ToySet:
    """Stacked arrays for a whole dataset; the last ``n_heldout`` samples are held out."""

    images: torch.Tensor
    diffuse: torch.Tensor
    light: torch.Tensor
    position: torch.Tensor  # [N, 3, R, R]
    valid: torch.Tensor  # [N, 1, R, R]
    poses: torch.Tensor  # [N, 6] float64
    background: torch.Tensor
    n_heldout: int
    meta: dict

    def __len__(self):
        return len(self.images)

    @property
    def n_train(self) -> int:
        return len(self) - self.n_heldout

    def sample(self, i: int) -> ToySample:
        pm = PositionMap(self.position[i].permute(1, 2, 0).numpy(), self.valid[i, 0].numpy() > 0.5)
        return ToySample(self.images[i], self.diffuse[i], self.light[i], pm,
                         Pose.from_vector(self.poses[i].numpy()), self.background[i])

    def pose_list(self, idx) -> list[Pose]:
        return [Pose.from_vector(self.poses[int(i)].numpy()) for i in idx]

    FIELDS = ("images", "diffuse", "light", "position", "valid", "poses", "background")

    def save(self, directory, template: TriMesh) -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name in self.FIELDS:
            save_atsr(d / f"{name}.atsr", getattr(self, name))
        save_obj(template, d / "template.obj")
        meta = dict(self.meta, n=len(self), n_heldout=self.n_heldout)
        (d / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory) -> "ToySet":
        d = Path(directory)
        meta = json.loads((d / "dataset.json").read_text())
        arrays = {name: load_atsr(d / f"{name}.atsr") for name in cls.FIELDS}
        return cls(**arrays, n_heldout=meta["n_heldout"], meta=meta)


def make_toyset(n: int, seed: int, res: int = 64, n_heldout: int | None = None,
                aligned: bool = False, template: TriMesh | None = None) -> ToySet:
    if n < 1:
        raise ValueError("need at least one sample")
    if n_heldout is None:
        n_heldout = n // 5
    template = template or load_bundled_head()
    samples = [make_sample(seed, i, res, template, aligned) for i in range(n)]
    return ToySet(
        images=torch.stack([s.image for s in samples]),
        diffuse=torch.stack([s.diffuse for s in samples]),
        light=torch.stack([s.light for s in samples]),
        position=torch.stack([torch.from_numpy(s.position.data).permute(2, 0, 1) for s in samples]),
        valid=torch.stack([s.skin_mask for s in samples]),
        poses=torch.from_numpy(np.stack([s.pose.to_vector() for s in samples])),
        background=torch.stack([s.background for s in samples]),
        n_heldout=n_heldout,
        meta={"seed": seed, "resolution": res, "aligned": aligned},
    )
