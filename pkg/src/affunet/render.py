"""Orthographic z-buffered renderer for UV-mapped meshes.

Geometry (position map, template, pose) is treated as constant; gradients flow
to the diffuse and light maps through bilinear UV sampling.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from . import _kernels
from .affconv import bilinear_sample
from .geometry import PositionMap, TriMesh, sample_positions
from .tensor import record_kinks


@dataclass
class Camera:
    scale: float  # pixels per model unit
    width: int
    height: int

    def __post_init__(self):
        if not self.scale > 0 or self.width < 1 or self.height < 1:
            raise ValueError(f"degenerate camera: {self}")

    @classmethod
    def for_uv_frame(cls, res: int) -> "Camera":
        """Camera under which the identity pose maps texel (i, j) to pixel (i, j)."""
        return cls(float(res), res, res)

    def project(self, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        px = self.width / 2 + self.scale * pts[:, 0]
        py = self.height / 2 - self.scale * pts[:, 1]
        return np.stack([px, py], axis=1), pts[:, 2]


@dataclass
class Pose:
    rotation: np.ndarray  # axis-angle, radians
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.isfinite(self.rotation).all() and np.isfinite(self.translation).all()):
            raise ValueError("pose must be finite")
        if np.linalg.norm(self.rotation) >= math.pi:
            raise ValueError("rotation angle must be below pi")

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.zeros(3), np.zeros(3))

    @classmethod
    def from_vector(cls, vec) -> "Pose":
        vec = np.asarray(vec, dtype=np.float64).reshape(6)
        return cls(vec[:3], vec[3:])

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.rotation, self.translation])

    @classmethod
    def from_euler(cls, yaw=0.0, pitch=0.0, roll=0.0, translation=(0, 0, 0)) -> "Pose":
        """Yaw about y, pitch about x, roll about z, applied as R = Rz Ry Rx."""
        r = rot_z(roll) @ rot_y(yaw) @ rot_x(pitch)
        return cls(matrix_to_axis_angle(r), np.asarray(translation, dtype=np.float64))

    def matrix(self) -> np.ndarray:
        return axis_angle_to_matrix(self.rotation)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return pts @ self.matrix().T + self.translation


def rot_x(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1, 0, 0], [0, c, -s], [0, s, c]])


def rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


def rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0], [s, c, 0], [0, 0, 1]])


def axis_angle_to_matrix(r) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    theta = np.linalg.norm(r)
    if theta < 1e-12:
        return np.eye(3)
    k = r / theta
    kx = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + math.sin(theta) * kx + (1 - math.cos(theta)) * kx @ kx


def matrix_to_axis_angle(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    cos = np.clip((np.trace(m) - 1) / 2, -1.0, 1.0)
    theta = math.acos(cos)
    if theta < 1e-12:
        return np.zeros(3)
    v = np.array([m[2, 1] - m[1, 2], m[0, 2] - m[2, 0], m[1, 0] - m[0, 1]])
    return v / (2 * math.sin(theta)) * theta


@dataclass
class Raster:
    """Per-pixel visibility of one render: covered pixel indices and their UVs."""

    height: int
    width: int
    pixel_index: np.ndarray  # [P] flat indices of covered pixels
    uv: np.ndarray  # [P, 2]
    depth: np.ndarray  # [H, W], -inf where uncovered

    def mask(self) -> np.ndarray:
        m = np.zeros(self.height * self.width, dtype=bool)
        m[self.pixel_index] = True
        return m.reshape(self.height, self.width)


def rasterize_mesh(mesh: TriMesh, pose: Pose, cam: Camera, vertex_ok=None) -> Raster:
    if mesh.n_faces == 0:
        raise ValueError("cannot render an empty mesh")
    faces = mesh.faces
    if vertex_ok is not None:
        faces = faces[np.asarray(vertex_ok)[faces].all(axis=1)]
        if len(faces) == 0:
            raise ValueError("no renderable faces: every face touches an invalid vertex")
    xy, depth = cam.project(pose.apply(mesh.vertices))
    face_id, bary, zbuf = _kernels.rasterize_np(xy, depth, faces, cam.height, cam.width, use_depth=True)
    covered = face_id >= 0
    tri = faces[face_id[covered]]
    uv = np.einsum("pk,pkc->pc", bary[covered], mesh.uvs[tri])
    return Raster(cam.height, cam.width, np.flatnonzero(covered.ravel()), uv, zbuf)


def shade(raster: Raster, diffuse: torch.Tensor, light: torch.Tensor, tint=None) -> torch.Tensor:
    """Differentiable shading of a fixed raster, returns ``[3, H, W]``.

    ``diffuse`` is ``[3, Hd, Wd]``; ``light`` is ``[1, Hl, Wl]`` and is bilinearly
    resized to the diffuse resolution before the multiply.
    """
    if diffuse.dim() != 3 or diffuse.shape[0] != 3:
        raise ValueError(f"diffuse must be [3, H, W], got {list(diffuse.shape)}")
    if light.dim() != 3 or light.shape[0] != 1:
        raise ValueError(f"light must be [1, H, W], got {list(light.shape)}")
    hd, wd = diffuse.shape[1:]
    if tuple(light.shape[1:]) != (hd, wd):
        light = F.interpolate(light[None], size=(hd, wd), mode="bilinear", align_corners=False)[0]
    dtype = diffuse.dtype
    uv = torch.from_numpy(raster.uv).to(dtype)
    # clamp-to-edge lookup so texels on the UV border are not darkened by padding
    coords = torch.stack([(uv[:, 0] * wd - 0.5).clamp(0, wd - 1),
                          (uv[:, 1] * hd - 0.5).clamp(0, hd - 1)], dim=1)[None]
    albedo = bilinear_sample(diffuse[None], coords)[0]  # [3, P]
    lum = bilinear_sample(light[None], coords)[0]  # [1, P]
    color = albedo * lum
    if tint is not None:
        color = color * torch.as_tensor(tint, dtype=dtype).view(3, 1)
    record_kinks((color < 0) | (color > 1))
    color = color.clamp(0.0, 1.0)
    idx = torch.from_numpy(raster.pixel_index)
    img = torch.zeros(3, raster.height * raster.width, dtype=dtype)
    img = img.index_copy(1, idx, color)
    return img.view(3, raster.height, raster.width)


def render(pm: PositionMap, template: TriMesh, diffuse, light, pose: Pose, cam: Camera, tint=None):
    """Render one image. Returns ``(image [3, H, W], coverage [H, W] float)``."""
    verts, ok = sample_positions(pm, template.uvs)
    mesh = TriMesh(verts, template.faces, template.uvs)
    raster = rasterize_mesh(mesh, pose, cam, ok)
    img = shade(raster, diffuse, light, tint)
    mask = torch.from_numpy(raster.mask()).to(img.dtype)
    return img, mask


def render_batch(pms, template, diffuse, light, poses, cam, tint=None):
    """Batched :func:`render`; ``diffuse`` ``[B,3,H,W]``, ``light`` ``[B,1,h,w]``."""
    imgs, masks = [], []
    for b, (pm, pose) in enumerate(zip(pms, poses)):
        img, mask = render(pm, template, diffuse[b], light[b], pose, cam, None if tint is None else tint[b])
        imgs.append(img)
        masks.append(mask)
    return torch.stack(imgs), torch.stack(masks)[:, None]


def overlay(rendered, coverage, background):
    """``coverage * rendered + (1 - coverage) * background``."""
    if rendered.shape != background.shape:
        raise ValueError(f"overlay: shape mismatch {list(rendered.shape)} vs {list(background.shape)}")
    return coverage * rendered + (1 - coverage) * background


def save_png8(path, img) -> None:
    from PIL import Image

    a = img.detach().cpu().numpy() if isinstance(img, torch.Tensor) else np.asarray(img)
    a = np.clip(np.round(a * 255), 0, 255).astype(np.uint8)
    if a.ndim == 3:
        a = np.transpose(a, (1, 2, 0))
        if a.shape[2] == 1:
            a = a[:, :, 0]
    Image.fromarray(a).save(path)
