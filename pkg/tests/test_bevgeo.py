import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from uad.bevgeo import (
    SAMPLE_HEIGHTS,
    BevGrid,
    DegenerateInputError,
    ShapeError,
    build_partition,
    mask_to_angular_label,
    project_rois_to_mask,
    rasterize_world,
    rot_back,
    rotate_grid,
    rotate_raster,
    rotate_traj,
    sector_index,
)
from uad.scenario import AgentState, Camera, Roi, default_cameras


def naive_mask(rois, cameras, grid, heights=SAMPLE_HEIGHTS):
    """Cell x height x ROI triple loop with scalar pinhole arithmetic."""
    cams = {c.camera_id: c for c in cameras}
    mask = np.zeros((grid.height, grid.width), dtype=np.uint8)
    for i in range(grid.height):
        for j in range(grid.width):
            x = (j - grid.width / 2 + 0.5) * grid.resolution
            y = (grid.height / 2 - i - 0.5) * grid.resolution
            hit = False
            for z in heights:
                for r in rois:
                    c = cams[r.camera_id]
                    psi = math.radians(c.yaw)
                    rx, ry = x - c.x, y - c.y
                    depth = -rx * math.sin(psi) + ry * math.cos(psi)
                    if depth <= 0:
                        continue
                    lat = rx * math.cos(psi) + ry * math.sin(psi)
                    f = (c.width / 2) / math.tan(math.radians(c.hfov) / 2)
                    u = c.width / 2 + f * lat / depth
                    v = c.height / 2 - f * (z - c.mount_height) / depth
                    if r.box[0] <= u <= r.box[2] and r.box[1] <= v <= r.box[3]:
                        hit = True
                        break
                if hit:
                    break
            mask[i, j] = hit
    return mask


def naive_label(mask, grid, theta):
    K = int(round(360 / theta))
    label = np.zeros(K, dtype=np.uint8)
    for i in range(grid.height):
        for j in range(grid.width):
            x = (j - grid.width / 2 + 0.5) * grid.resolution
            y = (grid.height / 2 - i - 0.5) * grid.resolution
            alpha = math.degrees(math.atan2(x, y)) % 360.0
            k = int(alpha // theta) % K
            if mask[i, j]:
                label[k] = 1
    return label


def random_rois(rng, cameras, n):
    out = []
    for _ in range(n):
        cam = cameras[rng.integers(len(cameras))]
        x0, x1 = sorted(rng.uniform(0, cam.width, 2))
        y0, y1 = sorted(rng.uniform(0, cam.height, 2))
        if x1 - x0 > 1e-3 and y1 - y0 > 1e-3:
            out.append(Roi(cam.camera_id, (x0, y0, x1, y1), 0.9))
    return out


def test_sector_index_examples():
    assert sector_index((0, 5), 4) == 0
    assert sector_index((5, 0), 4) == 22
    assert sector_index((0, -5), 4) == 45
    with pytest.raises(DegenerateInputError):
        sector_index((0, 0), 4)
    with pytest.raises(ValueError):
        sector_index((1, 1), 7)


def test_partition_small_and_complete():
    p = build_partition(BevGrid(2, 2, 1.0), 90)
    assert (p.K, p.N) == (4, 1) and p.valid.all()
    big = build_partition(BevGrid(200, 200, 0.5), 4)
    assert big.valid.sum() == 40000
    assert sorted(big.gather[big.valid].tolist()) == list(range(40000))


@pytest.mark.parametrize("shape,theta", [((16, 16), 4), ((10, 24), 6), ((32, 32), 30), ((4, 8), 30)])
def test_partition_matches_per_cell_oracle(shape, theta):
    grid = BevGrid(*shape, 0.5)
    p = build_partition(grid, theta)
    centers = grid.cell_centers()
    for i in range(grid.height):
        for j in range(grid.width):
            assert p.cell_sector[i, j] == sector_index(centers[i, j], theta)
    counts = np.bincount(p.cell_sector.ravel(), minlength=p.K)
    assert p.N == counts.max()
    assert np.array_equal(p.valid.sum(1), counts)
    assert np.all(p.gather[~p.valid] == 0)


def test_empty_rois_give_empty_mask():
    assert not project_rois_to_mask([], default_cameras(), BevGrid(16, 16, 1.0)).any()


def test_full_image_roi_lights_forward_wedge():
    cam = Camera("front", 0.0, 0.0, 0.0, 90.0, 100, 100)
    grid = BevGrid(20, 20, 1.0)
    mask = project_rois_to_mask([Roi("front", (0.0, 0.0, 100.0, 100.0), 1.0)], [cam], grid)
    expect = np.zeros_like(mask)
    f = 50.0 / math.tan(math.radians(45.0))
    for i in range(grid.height):
        for j in range(grid.width):
            x = (j - 10 + 0.5)
            y = (10 - i - 0.5)
            for z in SAMPLE_HEIGHTS:
                if y > 0 and 0 <= 50 + f * x / y <= 100 and 0 <= 50 - f * (z - 1.5) / y <= 100:
                    expect[i, j] = 1
    assert np.array_equal(mask, expect)
    lit = grid.cell_centers()[mask.astype(bool)]
    assert np.all(np.abs(lit[:, 0]) <= lit[:, 1] + 1e-9)


def test_mask_matches_triple_loop_on_random_scenes():
    rng = np.random.default_rng(5)
    cams = default_cameras()
    grid = BevGrid(12, 12, 1.5)
    for _ in range(50):
        rois = random_rois(rng, cams, int(rng.integers(0, 5)))
        assert np.array_equal(project_rois_to_mask(rois, cams, grid), naive_mask(rois, cams, grid))


def test_label_examples():
    grid = BevGrid(64, 64, 0.5)
    p = build_partition(grid, 4)
    assert not mask_to_angular_label(np.zeros((64, 64)), p).any()
    # the cell whose center sits at bearing ~10 degrees
    centers = grid.cell_centers()
    alpha = np.degrees(np.arctan2(centers[..., 0], centers[..., 1])) % 360
    i, j = np.unravel_index(np.argmin(np.abs(alpha - 10.0) + 1e-3 * np.hypot(*np.moveaxis(centers, -1, 0))), alpha.shape)
    m = np.zeros((64, 64))
    m[i, j] = 1
    assert 8 <= alpha[i, j] < 12
    assert np.flatnonzero(mask_to_angular_label(m, p)).tolist() == [2]
    with pytest.raises(ShapeError):
        mask_to_angular_label(np.zeros((4, 4)), p)


def test_label_matches_oracle_on_random_masks():
    rng = np.random.default_rng(9)
    grid = BevGrid(16, 16, 1.0)
    for theta in (4, 6, 10, 30):
        p = build_partition(grid, theta)
        for _ in range(250):
            m = (rng.random((16, 16)) < rng.uniform(0.001, 0.1)).astype(np.uint8)
            assert np.array_equal(mask_to_angular_label(m, p), naive_label(m, grid, theta))


def test_rotate_grid_examples():
    x = np.array([["a", "b"], ["c", "d"]])
    assert rotate_grid(x, 90).tolist() == [["b", "d"], ["a", "c"]]
    y = np.arange(36).reshape(6, 6)
    assert np.array_equal(rotate_grid(rotate_grid(y, 180), 180), y)
    with pytest.raises(ShapeError):
        rotate_grid(np.zeros((4, 6)), 90)
    with pytest.raises(ValueError):
        rotate_grid(y, 45)


def test_rotate_traj_examples():
    assert rotate_traj(np.array([1.0, 2.0]), 90).tolist() == [-2.0, 1.0]
    assert rotate_traj(np.array([1.0, 2.0]), 180).tolist() == [-1.0, -2.0]
    with pytest.raises(ValueError):
        rotate_traj(np.zeros(2), 45)


def test_grid_and_traj_rotations_agree():
    """A marked cell moves where rotate_traj sends its center."""
    grid = BevGrid(10, 10, 1.0)
    centers = grid.cell_centers()
    for r in (90, 180, 270):
        m = np.zeros((10, 10))
        m[2, 7] = 1
        rm = rotate_grid(m, r)
        (i, j), = np.argwhere(rm == 1)
        assert np.allclose(centers[i, j], rotate_traj(centers[2, 7], r))


@given(hnp.arrays(np.float64, (6, 2), elements=st.floats(-1e6, 1e6)), st.sampled_from([0, 90, 180, 270]))
def test_rot_back_is_bit_exact_inverse(traj, r):
    assert np.array_equal(rot_back(rotate_traj(traj, r), r), traj)
    t = torch.as_tensor(traj)
    assert torch.equal(rot_back(rotate_traj(t, r), r), t)


@given(hnp.arrays(np.uint8, (12, 12), elements=st.integers(0, 1)), st.sampled_from([90, 180, 270]))
def test_rotation_shifts_labels_when_theta_divides_90(mask, r):
    p = build_partition(BevGrid(12, 12, 1.0), 6)
    base = mask_to_angular_label(mask, p)
    rotated = mask_to_angular_label(np.ascontiguousarray(rotate_grid(mask, r)), p)
    # counterclockwise rotation lowers the clockwise bearing by r
    assert np.array_equal(rotated, np.roll(base, -(r // 6)))


def test_rotate_raster_turns_velocity_with_the_world():
    grid = BevGrid(16, 16, 1.0)
    car = AgentState(0, (0.0, 6.0), math.pi / 2, (4.0, 2.0), (0.0, 3.0), "vehicle")
    boundary = [(-8, -20), (8, -20), (8, 20), (-8, 20)]
    raster = rasterize_world((0.0, 0.0, math.pi / 2), [car], boundary, grid, ego_speed=5.0)
    rot = rotate_raster(raster, 90)
    occ = rot[..., 0] > 0
    # the car moved to the ego's left and now drives toward -x
    assert np.all(grid.cell_centers()[occ][:, 0] < 0)
    assert np.allclose(rot[occ, 1], -0.3) and np.allclose(rot[occ, 2], 0.0)
    assert np.array_equal(rotate_raster(rotate_raster(raster, 90), 270), raster)


def test_rasterize_channels():
    grid = BevGrid(16, 16, 1.0)
    car = AgentState(0, (2.0, 6.0), math.pi / 2, (4.0, 2.0), (0.0, 5.0), "vehicle")
    boundary = [(-4, -50), (4, -50), (4, 50), (-4, 50)]
    r = rasterize_world((0.0, 0.0, math.pi / 2), [car], boundary, grid, ego_speed=3.0)
    c = grid.cell_centers()
    occ = r[..., 0] > 0
    assert occ.any() and np.all(np.abs(c[occ][:, 0] - 2.0) <= 1.5) and np.all(np.abs(c[occ][:, 1] - 6.0) <= 2.5)
    assert np.allclose(r[occ, 2], 0.5)
    ego = (np.abs(c[..., 0]) < 1) & (np.abs(c[..., 1]) < 2)
    assert np.allclose(r[ego, 2], 0.3) and not r[ego, 0].any()
    # 3 m/s over a 2 s trail: the streak reaches 2 + 6 m behind, nothing ahead of the bumper
    streak = (np.abs(c[..., 0]) < 1) & (c[..., 1] < 2) & (c[..., 1] > -8)
    assert np.allclose(r[streak, 2], 0.3)
    assert not r[(np.abs(c[..., 0]) < 1) & (c[..., 1] < -8), 2].any()
    assert not r[(np.abs(c[..., 0]) < 1) & (c[..., 1] > 2) & ~occ, 2].any()
    # inside the corridor positive, outside negative, scaled by 8 m and clipped
    assert r[8, 8, 3] == pytest.approx(3.5 / 8)
    assert r[8, 0, 3] < 0 and r[..., 3].min() >= -1


def test_boundary_channel_matches_full_signed_distance(small_scenes):
    from uad import geometry as geo

    grid = BevGrid(24, 24, 1.0)
    for scene in small_scenes:
        for f in (0, scene.num_frames // 2):
            pose = scene.pose(f)
            r = rasterize_world(pose, [], scene.boundary, grid)
            world = geo.ego_to_world(grid.cell_centers().reshape(-1, 2), pose)
            full = geo.signed_distance_to_polygon(world, np.asarray(scene.boundary)).reshape(24, 24)
            assert np.allclose(r[..., 3], np.clip(full / 8.0, -1, 1), atol=1e-9)
