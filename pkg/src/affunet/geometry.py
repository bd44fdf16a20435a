"""Triangle meshes with UVs, OBJ I/O and UV position maps.

Texel ``(i, j)`` of an ``H x W`` map sits at ``uv = ((j + 0.5) / W, (i + 0.5) / H)``.
The v axis points down in storage; OBJ ``vt`` records are flipped on load and
on save.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .tensor import load_atsr, save_atsr

EPS_UV = 1e-12
FILL = (0.0, 0.0, 0.0)


class ObjParseError(ValueError):
    pass


@dataclass
class TriMesh:
    vertices: np.ndarray  # [N, 3] float64
    faces: np.ndarray  # [M, 3] int64
    uvs: np.ndarray  # [N, 2] float64, v down

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        self.uvs = np.asarray(self.uvs, dtype=np.float64).reshape(-1, 2)
        n = len(self.vertices)
        if len(self.uvs) != n:
            raise ValueError(f"uv count {len(self.uvs)} != vertex count {n}")
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= n):
            raise ValueError("face index out of range")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def bbox_diagonal(self) -> float:
        return float(np.linalg.norm(self.vertices.max(0) - self.vertices.min(0)))

    def boundary_vertices(self) -> np.ndarray:
        """Boolean mask of vertices on an edge used by exactly one face."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e = np.sort(e, axis=1)
        uniq, counts = np.unique(e, axis=0, return_counts=True)
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[uniq[counts == 1].ravel()] = True
        return mask

    def translated(self, offset) -> "TriMesh":
        return TriMesh(self.vertices + np.asarray(offset, dtype=np.float64), self.faces.copy(), self.uvs.copy())


def _parse_index(tok: str, count: int, lineno: int) -> int:
    i = int(tok)
    if i < 0:
        i = count + i
    else:
        i -= 1
    if not 0 <= i < count:
        raise ObjParseError(f"line {lineno}: index {tok} out of range")
    return i


def load_obj(path) -> TriMesh:
    """Read ``v``/``vt``/``f`` records. Polygons are fan-triangulated and
    vertices used with several UVs are split along the seam."""
    positions: list[list[float]] = []
    texcoords: list[list[float]] = []
    corners: list[list[tuple[int, int]]] = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            tag, *rest = line.split()
            try:
                if tag == "v":
                    if len(rest) < 3:
                        raise ValueError("vertex needs 3 coordinates")
                    positions.append([float(t) for t in rest[:3]])
                elif tag == "vt":
                    if len(rest) < 2:
                        raise ValueError("texture coordinate needs 2 values")
                    texcoords.append([float(t) for t in rest[:2]])
                elif tag == "f":
                    if len(rest) < 3:
                        raise ValueError("face needs at least 3 corners")
                    poly = []
                    for tok in rest:
                        parts = tok.split("/")
                        if len(parts) < 2 or parts[1] == "":
                            raise ObjParseError("mesh has no UV mapping")
                        vi = _parse_index(parts[0], len(positions), lineno)
                        ti = _parse_index(parts[1], len(texcoords), lineno)
                        poly.append((vi, ti))
                    corners.append(poly)
            except ObjParseError:
                raise
            except ValueError as exc:
                raise ObjParseError(f"line {lineno}: {exc}: {raw.strip()!r}") from None
    if not corners:
        raise ObjParseError("no faces in file")
    if not texcoords:
        raise ObjParseError("mesh has no UV mapping")

    remap: dict[tuple[int, int], int] = {}
    verts, uvs, faces = [], [], []
    for poly in corners:
        ids = []
        for key in poly:
            if key not in remap:
                remap[key] = len(verts)
                verts.append(positions[key[0]])
                u, v = texcoords[key[1]]
                uvs.append([u, 1.0 - v])
            ids.append(remap[key])
        for k in range(1, len(ids) - 1):
            faces.append([ids[0], ids[k], ids[k + 1]])
    return TriMesh(np.array(verts), np.array(faces), np.array(uvs))


def save_obj(mesh: TriMesh, path) -> None:
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"vt {u:.9g} {1.0 - v:.9g}" for u, v in mesh.uvs]
    lines += [f"f {a + 1}/{a + 1} {b + 1}/{b + 1} {c + 1}/{c + 1}" for a, b, c in mesh.faces]
    Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class PositionMap:
    data: np.ndarray  # [H, W, 3] float32
    valid: np.ndarray  # [H, W] bool

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.data.shape[:2] != self.valid.shape or self.data.shape[2] != 3:
            raise ValueError(f"bad position map shapes {self.data.shape} / {self.valid.shape}")
        self.data[~self.valid] = FILL

    @property
    def resolution(self) -> tuple[int, int]:
        return self.data.shape[0], self.data.shape[1]

    def coverage(self) -> float:
        return float(self.valid.mean())

    def save(self, stem) -> None:
        stem = str(stem)
        save_atsr(stem + ".atsr", self.data)
        save_atsr(stem + ".mask.atsr", self.valid.astype(np.float32))

    @classmethod
    def load(cls, stem) -> "PositionMap":
        stem = str(stem)
        data = load_atsr(stem + ".atsr").numpy()
        valid = load_atsr(stem + ".mask.atsr").numpy() > 0.5
        return cls(data, valid)

    def export_png(self, path) -> dict:
        """16-bit preview, per-channel min-max normalized over valid texels."""
        import cv2

        lo = np.zeros(3)
        hi = np.ones(3)
        if self.valid.any():
            vals = self.data[self.valid].astype(np.float64)
            lo, hi = vals.min(0), vals.max(0)
        span = np.where(hi > lo, hi - lo, 1.0)
        img = np.clip((self.data - lo) / span, 0, 1)
        img[~self.valid] = 0
        img16 = np.round(img * 65535).astype(np.uint16)
        cv2.imwrite(str(path), img16[:, :, ::-1])
        meta = {"channel_min": lo.tolist(), "channel_max": hi.tolist(), "bit_depth": 16}
        Path(str(path) + ".json").write_text(json.dumps(meta, indent=2))
        return meta


def rasterize_position_map(mesh: TriMesh, height: int, width: int | None = None) -> PositionMap:
    """Write barycentric interpolations of vertex positions into UV texels."""
    width = height if width is None else width
    px = mesh.uvs * np.array([width, height])
    face_id, bary, _ = _kernels.rasterize_np(
        px, np.zeros(mesh.n_vertices), mesh.faces, height, width,
        use_depth=False, eps_area=2 * EPS_UV * width * height,
    )
    valid = face_id >= 0
    data = np.zeros((height, width, 3))
    tri = mesh.faces[face_id[valid]]
    b = bary[valid]
    data[valid] = np.einsum("nk,nkc->nc", b, mesh.vertices[tri])
    if not valid.any():
        warnings.warn("position map has no covered texels", RuntimeWarning, stacklevel=2)
    return PositionMap(data, valid)


def sample_positions(pm: PositionMap, uvs) -> tuple[np.ndarray, np.ndarray]:
    """Masked bilinear read-out at ``uvs`` ``[K, 2]``.

    Invalid neighbours are dropped and the remaining weights renormalized.
    Returns positions ``[K, 3]`` and a validity flag per sample.
    """
    uvs = np.asarray(uvs, dtype=np.float64).reshape(-1, 2)
    h, w = pm.resolution
    x = uvs[:, 0] * w - 0.5
    y = uvs[:, 1] * h - 0.5
    x0 = np.floor(x).astype(np.int64)
    y0 = np.floor(y).astype(np.int64)
    fx = x - x0
    fy = y - y0
    acc = np.zeros((len(uvs), 3))
    wsum = np.zeros(len(uvs))
    data = pm.data.astype(np.float64)
    for ox, oy in ((0, 0), (1, 0), (0, 1), (1, 1)):
        xi = x0 + ox
        yi = y0 + oy
        wgt = (fx if ox else 1 - fx) * (fy if oy else 1 - fy)
        inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        xc = np.clip(xi, 0, w - 1)
        yc = np.clip(yi, 0, h - 1)
        ok = inside & pm.valid[yc, xc] & (wgt > 0)
        wgt = np.where(ok, wgt, 0.0)
        acc += wgt[:, None] * data[yc, xc]
        wsum += wgt
    flag = wsum > 0
    out = np.zeros_like(acc)
    out[flag] = acc[flag] / wsum[flag, None]
    return out, flag


def round_trip_error(mesh: TriMesh, pm: PositionMap) -> tuple[float, float]:
    """Max position error at interior vertices after rasterize-then-sample,
    and the tolerance ``2 / resolution * bbox_diagonal``."""
    pos, flag = sample_positions(pm, mesh.uvs)
    interior = np.ones(mesh.n_vertices, dtype=bool)
    interior[mesh.boundary_vertices()] = False
    if not (flag | ~interior).all():
        raise ValueError("some interior vertices fall on uncovered texels")
    err = np.linalg.norm(pos[interior] - mesh.vertices[interior], axis=1)
    tol = 2.0 / max(pm.resolution) * mesh.bbox_diagonal()
    return float(err.max(initial=0.0)), tol


def mesh_from_position_map(pm: PositionMap, template: TriMesh) -> tuple[TriMesh, np.ndarray]:
    verts, flag = sample_positions(pm, template.uvs)
    return TriMesh(verts, template.faces.copy(), template.uvs.copy()), flag


# --- synthetic heads --------------------------------------------------------


@dataclass
class ShapeParams:
    """Front part of an ellipsoid seen along +z, plus bounded Gaussian bumps.

    The UV square maps to the model-space box ``x, y in [-0.5, 0.5]`` (u right,
    v down), so bump displacement is measured in units of that box.
    """

    semi_axes: tuple[float, float, float] = (0.5, 0.55, 0.4)
    rim: float = 0.9  # ellipse radius where the face region ends
    deform: float = 0.0
    n_bumps: int = 6
    seed: int = 0
    bumps: list = field(init=False, repr=False)

    def __post_init__(self):
        ax, ay, az = self.semi_axes
        if min(ax, ay, az) <= 0 or not 0 < self.rim < 1:
            raise ValueError("semi-axes must be positive and rim in (0, 1)")
        if ax * self.rim > 0.5 or ay * self.rim > 0.5:
            raise ValueError("face region does not fit the UV frame")
        if self.deform < 0:
            raise ValueError("deform must be non-negative")
        rng = np.random.default_rng(self.seed)
        w = rng.uniform(0.5, 1.0, self.n_bumps)
        w = w / w.sum() if self.n_bumps else w
        self.bumps = [
            (
                float(rng.uniform(-0.35, 0.35)),
                float(rng.uniform(-0.35, 0.35)),
                float(rng.uniform(0.05, 0.15)),
                float(self.deform * w[k] * rng.choice([-1.0, 1.0])),
            )
            for k in range(self.n_bumps)
        ]


def uv_to_xy(uv):
    uv = np.asarray(uv, dtype=np.float64)
    return uv[..., 0] - 0.5, 0.5 - uv[..., 1]


def ellipse_radius(params: ShapeParams, x, y):
    ax, ay, _ = params.semi_axes
    return np.sqrt((x / ax) ** 2 + (y / ay) ** 2)


def surface_points(params: ShapeParams, uv) -> tuple[np.ndarray, np.ndarray]:
    """Analytic surface at ``uv`` ``[..., 2]``; returns points and the face-region mask."""
    x, y = uv_to_xy(uv)
    az = params.semi_axes[2]
    r = ellipse_radius(params, x, y)
    inside = r <= params.rim
    z = az * np.sqrt(np.clip(1.0 - r**2, 0.0, None))
    for cx, cy, s, a in params.bumps:
        z = z + a * np.exp(-((x - cx) ** 2 + (y - cy) ** 2) / (2 * s * s))
    return np.stack([x, y, z], axis=-1), inside


def make_synthetic_position_gt(params: ShapeParams, resolution: int = 64) -> PositionMap:
    """Pseudo ground-truth position map of an analytic head-like surface."""
    t = (np.arange(resolution) + 0.5) / resolution
    uv = np.stack(np.meshgrid(t, t, indexing="xy"), axis=-1)
    pts, inside = surface_points(params, uv)
    return PositionMap(pts, inside)


def make_synthetic_head_mesh(params: ShapeParams | None = None, grid: int = 48) -> TriMesh:
    """Regular UV grid over the face region, vertices on the analytic surface."""
    params = params or ShapeParams()
    t = np.linspace(0.0, 1.0, grid + 1)
    uu, vv = np.meshgrid(t, t, indexing="xy")
    uv = np.stack([uu.ravel(), vv.ravel()], axis=1)
    x, y = uv_to_xy(uv)
    keep_v = ellipse_radius(params, x, y) <= params.rim
    idx = np.arange(len(uv)).reshape(grid + 1, grid + 1)
    faces = []
    for i in range(grid):
        for j in range(grid):
            a, b, c, d = idx[i, j], idx[i, j + 1], idx[i + 1, j], idx[i + 1, j + 1]
            for tri in ((a, c, b), (b, c, d)):
                if keep_v[list(tri)].all():
                    faces.append(tri)
    faces = np.array(faces)
    used = np.unique(faces)
    new_id = -np.ones(len(uv), dtype=np.int64)
    new_id[used] = np.arange(len(used))
    pts, _ = surface_points(params, uv[used])
    return TriMesh(pts, new_id[faces], uv[used])


def bundled_head_path() -> Path:
    return Path(__file__).parent / "data" / "synthetic_head.obj"


def load_bundled_head() -> TriMesh:
    return load_obj(bundled_head_path())
