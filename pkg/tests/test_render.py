import math

import cv2
import numpy as np
import pytest
import torch

from affunet.geometry import TriMesh, rasterize_position_map
from affunet.gradcheck import renderer_suite
from affunet.render import (
    Camera,
    Pose,
    axis_angle_to_matrix,
    overlay,
    rasterize_mesh,
    render,
    rot_x,
    rot_y,
    rot_z,
    save_png8,
    shade,
)


@pytest.fixture(scope="module")
def head_pm(head):
    return rasterize_position_map(head, 64)


def _smooth_diffuse(res, dtype=torch.float64):
    t = (torch.arange(res, dtype=dtype) + 0.5) / res
    v, u = torch.meshgrid(t, t, indexing="ij")
    return torch.stack([0.3 + 0.4 * u, 0.6 - 0.3 * v, 0.4 + 0.2 * u * v])


def test_camera_and_pose_validation():
    with pytest.raises(ValueError):
        Camera(0.0, 8, 8)
    with pytest.raises(ValueError):
        Camera(1.0, 0, 8)
    with pytest.raises(ValueError, match="below pi"):
        Pose([math.pi, 0, 0], [0, 0, 0])
    with pytest.raises(ValueError, match="finite"):
        Pose([0, 0, 0], [0, float("nan"), 0])


@pytest.mark.parametrize("yaw,pitch,roll", [(0.3, -0.2, 0.1), (-0.5, 0.4, 0.0), (0.0, 0.0, 1.2)])
def test_pose_euler_and_vector_round_trip(yaw, pitch, roll):
    p = Pose.from_euler(yaw, pitch, roll, translation=(0.1, -0.2, 0.3))
    assert np.allclose(p.matrix(), rot_z(roll) @ rot_y(yaw) @ rot_x(pitch), atol=1e-12)
    q = Pose.from_vector(p.to_vector())
    assert np.array_equal(q.to_vector(), p.to_vector())
    r = p.matrix()
    assert np.allclose(r @ r.T, np.eye(3), atol=1e-12)
    assert np.allclose(axis_angle_to_matrix(np.zeros(3)), np.eye(3))


def test_identity_pose_maps_uv_frame_onto_pixels():
    cam = Camera.for_uv_frame(8)
    xy, z = cam.project(np.array([[0.0, 0.0, 0.5], [0.25, -0.25, 0.0]]))
    assert xy.tolist() == [[4.0, 4.0], [6.0, 6.0]] and z.tolist() == [0.5, 0.0]


def test_constant_diffuse_unit_light_gives_exact_color(head, head_pm):
    c = torch.tensor([0.25, 0.5, 0.75], dtype=torch.float64)
    diffuse = c.view(3, 1, 1).expand(3, 64, 64).contiguous()
    img, cov = render(head_pm, head, diffuse, torch.ones(1, 16, 16, dtype=torch.float64),
                      Pose.identity(), Camera.for_uv_frame(64))
    covered = cov > 0
    assert covered.sum() > 1000
    for ch in range(3):
        assert (img[ch][covered] == c[ch]).all()
    assert (img[:, ~covered] == 0).all()


def test_zero_light_is_black_and_shading_is_multiplicative(head, head_pm):
    diffuse = _smooth_diffuse(64)
    g = torch.Generator().manual_seed(0)
    light = 0.2 + 0.3 * torch.rand(1, 16, 16, generator=g, dtype=torch.float64)
    args = (Pose.from_euler(0.2, -0.1), Camera.for_uv_frame(64))
    img0, cov = render(head_pm, head, diffuse, torch.zeros_like(light), *args)
    assert (img0 == 0).all() and cov.sum() > 0
    a, _ = render(head_pm, head, diffuse, light, *args)
    b, _ = render(head_pm, head, diffuse, 2 * light, *args)
    # values stay below 1, so the clamp is inactive and scaling is exact
    assert a.max() < 0.5 and torch.equal(b, 2 * a)


def test_in_plane_rotation_equals_rotated_image(head, head_pm):
    diffuse = _smooth_diffuse(64)
    light = torch.ones(1, 16, 16, dtype=torch.float64)
    cam = Camera(48.0, 64, 64)
    theta = 0.35
    base, cov0 = render(head_pm, head, diffuse, light, Pose.identity(), cam)
    rot, cov1 = render(head_pm, head, diffuse, light, Pose.from_euler(roll=theta), cam)
    # world y is up and image rows go down, so a positive roll is a counter-clockwise
    # image rotation about the world origin at pixel (31.5, 31.5)
    m = cv2.getRotationMatrix2D((31.5, 31.5), math.degrees(theta), 1.0)
    warp = lambda a: cv2.warpAffine(a, m, (64, 64), flags=cv2.INTER_LINEAR)  # noqa: E731
    expected = warp(base.permute(1, 2, 0).numpy())
    cov_expected = warp(cov0.numpy())
    interior = cv2.erode((cov1.numpy() > 0).astype(np.uint8), np.ones((5, 5), np.uint8)) > 0
    interior &= cov_expected > 0.999
    assert interior.sum() > 500
    diff = np.abs(rot.permute(1, 2, 0).numpy() - expected)[interior]
    assert diff.max() < 2 / 255


def _two_planes():
    # plane A: z = 0.3 x, uv in the left half; plane B: z = 0.05 - 0.3 x, right half
    corners = np.array([[-0.4, -0.4], [0.4, -0.4], [0.4, 0.4], [-0.4, 0.4]])
    verts = np.vstack([np.c_[corners, 0.3 * corners[:, 0]], np.c_[corners, 0.05 - 0.3 * corners[:, 0]]])
    uv_a = 0.05 + 0.4 * (corners + 0.4) / 0.8
    uvs = np.vstack([uv_a, uv_a + [0.5, 0.0]])
    faces = [[0, 1, 2], [0, 2, 3], [4, 5, 6], [4, 6, 7]]
    return TriMesh(verts, faces, uvs)


def test_zbuffer_nearest_surface_wins():
    cam = Camera(32.0, 32, 32)
    raster = rasterize_mesh(_two_planes(), Pose.identity(), cam)
    mask = raster.mask()
    j, i = np.meshgrid(np.arange(32) + 0.5, np.arange(32) + 0.5, indexing="xy")
    x, y = (j - 16) / 32, -(i - 16) / 32
    inside = (np.abs(x) < 0.4) & (np.abs(y) < 0.4)
    assert np.array_equal(mask, inside)
    za, zb = 0.3 * x, 0.05 - 0.3 * x
    want_a = (za > zb)[inside]
    got_a = raster.uv[:, 0] < 0.5  # pixel_index is row-major, same order as the boolean mask
    assert np.array_equal(got_a, want_a)
    assert np.allclose(raster.depth[inside], np.maximum(za, zb)[inside], atol=1e-12)
    assert (raster.depth[~inside] == -np.inf).all()


def test_face_order_does_not_change_visibility():
    cam = Camera(32.0, 32, 32)
    mesh = _two_planes()
    flipped = TriMesh(mesh.vertices, mesh.faces[::-1].copy(), mesh.uvs)
    a = rasterize_mesh(mesh, Pose.identity(), cam)
    b = rasterize_mesh(flipped, Pose.identity(), cam)
    assert np.array_equal(a.pixel_index, b.pixel_index) and np.allclose(a.uv, b.uv, atol=1e-12)


def test_render_errors(head_pm, head):
    cam = Camera.for_uv_frame(16)
    empty = TriMesh(np.zeros((3, 3)), np.zeros((0, 3), dtype=np.int64), np.zeros((3, 2)))
    with pytest.raises(ValueError, match="empty mesh"):
        rasterize_mesh(empty, Pose.identity(), cam)
    raster = rasterize_mesh(head, Pose.identity(), cam)
    with pytest.raises(ValueError, match="diffuse"):
        shade(raster, torch.zeros(1, 8, 8), torch.ones(1, 4, 4))
    with pytest.raises(ValueError, match="light"):
        shade(raster, torch.zeros(3, 8, 8), torch.ones(3, 4, 4))


def test_appearance_gradients_match_finite_differences():
    for r in renderer_suite():
        assert r.passed, r


def test_gradient_does_not_reach_saturated_pixels(head, head_pm):
    raster = rasterize_mesh(head, Pose.identity(), Camera.for_uv_frame(16))
    diffuse = torch.full((3, 16, 16), 0.9, dtype=torch.float64, requires_grad=True)
    light = torch.full((1, 4, 4), 2.0, dtype=torch.float64)
    shade(raster, diffuse, light).sum().backward()
    assert (diffuse.grad == 0).all()


def test_overlay():
    g = torch.Generator().manual_seed(3)
    r, b = torch.rand(2, 3, 8, 8, generator=g), torch.rand(2, 3, 8, 8, generator=g)
    assert torch.equal(overlay(r, torch.zeros(2, 1, 8, 8), b), b)
    assert torch.equal(overlay(r, torch.ones(2, 1, 8, 8), r), r)
    m = (torch.rand(2, 1, 8, 8, generator=g) > 0.5).float()
    assert torch.equal(overlay(r, m, b), torch.where(m.bool(), r, b))
    with pytest.raises(ValueError):
        overlay(r, m, b[:, :, :4])


def test_save_png8(tmp_path):
    img = torch.linspace(0, 1, 3 * 4 * 5).view(3, 4, 5)
    save_png8(tmp_path / "a.png", img)
    back = cv2.imread(str(tmp_path / "a.png"))[:, :, ::-1]
    assert np.array_equal(back, np.round(img.permute(1, 2, 0).numpy() * 255).astype(np.uint8))
