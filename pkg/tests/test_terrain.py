import json

import numpy as np
import pytest

import oracles
from parkour import terrain
from parkour.errors import ConfigurationError
from parkour.terrain import (
    COARSE_GRID,
    FINE_GRID,
    GridSpec,
    Terrain,
    TerrainBatch,
    difficulty_map,
    elevation_height,
    generate_world,
    goal_at,
    occupancy_ground_truth,
    occupancy_ground_truth_batch,
    raycast,
    raycast_boxes,
    support_height,
)


# --------------------------------------------------------- difficulty map ----


def test_difficulty_map_endpoints():
    p0 = difficulty_map("any", 0.0)
    p1 = difficulty_map("any", 1.0)
    assert p0.gap_width == pytest.approx(0.20)
    assert p1.gap_width == pytest.approx(1.00)
    assert p0.box_height == pytest.approx(0.20)
    assert p1.box_height == pytest.approx(1.00)
    assert p0.passage_height == pytest.approx(0.80)
    assert p1.passage_height == pytest.approx(0.40)
    assert p0.step_height == pytest.approx(0.05)
    assert p1.step_height == pytest.approx(0.25)
    assert p0.slope_angle == pytest.approx(0.0)
    assert p1.slope_angle == pytest.approx(np.deg2rad(40.0))


def test_difficulty_map_is_linear_and_extrapolates():
    p_half = difficulty_map("walk", 0.5)
    assert p_half.gap_width == pytest.approx(0.60)
    assert p_half.passage_height == pytest.approx(0.60)
    p_over = difficulty_map("jump", 1.2)
    assert p_over.gap_width == pytest.approx(0.20 + 0.80 * 1.2)
    assert p_over.passage_height == pytest.approx(0.80 - 0.40 * 1.2)


def test_difficulty_map_monotone():
    ds = np.linspace(0.0, 1.2, 13)
    gaps = [difficulty_map("any", d).gap_width for d in ds]
    passages = [difficulty_map("any", d).passage_height for d in ds]
    assert all(b > a for a, b in zip(gaps, gaps[1:]))
    assert all(b < a for a, b in zip(passages, passages[1:]))


def test_difficulty_map_rejects_negative():
    with pytest.raises(ConfigurationError):
        difficulty_map("walk", -0.1)
    with pytest.raises(ConfigurationError):
        difficulty_map("somersault", 0.5)


# ---------------------------------------------------------------- worlds ----


ALL_KINDS = ["world_a", "world_b", "world_c", "flat",
             "arena_walk", "arena_jump", "arena_climb_up",
             "arena_climb_down", "arena_crouch"]


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_generation_is_deterministic(kind):
    a = generate_world(kind, seed=7, difficulty=0.6)
    b = generate_world(kind, seed=7, difficulty=0.6)
    assert a.to_json() == b.to_json()
    c = generate_world(kind, seed=8, difficulty=0.6)
    assert a.to_json() != c.to_json()


@pytest.mark.parametrize("kind", ALL_KINDS)
def test_json_round_trip(kind):
    t = generate_world(kind, seed=3, difficulty=0.8)
    back = Terrain.from_json(t.to_json())
    assert back.to_json() == t.to_json()
    assert np.array_equal(back.boxes, t.boxes)
    assert np.array_equal(back.path, t.path)
    assert back.roles == t.roles


def test_world_a_heights_bounded():
    cap = difficulty_map("climb_up", 1.2).box_height
    for seed in range(10):
        for d in (0.0, 0.5, 1.0, 1.2):
            t = generate_world("world_a", seed, d)
            for row, role in zip(t.boxes, t.roles):
                if role in ("obstacle", "distractor"):
                    assert row[5] <= cap + 1e-6
    assert t.friction >= 0.5 and t.friction <= 1.0


def test_world_c_layout():
    for seed in range(10):
        t = generate_world("world_c", seed, 0.9)
        roles = set(t.roles)
        assert "wall" in roles and "ground" in roles
        obs = t.obstacles
        assert 3 <= len(obs) <= 5
        xs = [o["x0"] for o in obs]
        assert xs == sorted(xs)
        for a, b in zip(obs, obs[1:]):
            assert b["x0"] - a["x1"] >= 1.5  # runway between obstacles
        # spawn clear of the first obstacle
        assert obs[0]["x0"] >= t.spawn[1, 0] + 1.0
        # pits actually interrupt the walking surface
        for o in obs:
            if o["type"] == "gap":
                mid_x = (o["x0"] + o["x1"]) / 2
                s = support_height(t, mid_x, 0.0, 0.0)
                assert s[0] == pytest.approx(-0.6, abs=1e-5)


def test_world_b_elevated_platform():
    for seed in range(5):
        t = generate_world("world_b", seed, 0.5)
        assert t.platform_top == pytest.approx(0.8)
        # the route stays on top of the platform
        for x, y, z in t.path:
            assert z == pytest.approx(0.8, abs=1e-5)
            s = support_height(t, float(x), float(y), 1.5)
            assert s[0] >= 0.75
        # stepping off the side finds only the distant floor
        assert support_height(t, 0.0, 6.0, 1.5)[0] == pytest.approx(0.0)


def test_skill_arena_dimensions_track_difficulty():
    for d in (0.0, 0.5, 1.0):
        p = difficulty_map("any", d)
        up = generate_world("arena_climb_up", 11, d)
        box = [o for o in up.obstacles if o["type"] == "box"][0]
        assert box["height"] == pytest.approx(p.box_height, abs=1e-6)
        jump = generate_world("arena_jump", 11, d)
        gap = [o for o in jump.obstacles if o["type"] == "gap"][0]
        assert gap["gap"] == pytest.approx(p.gap_width, abs=1e-6)
        crouch = generate_world("arena_crouch", 11, d)
        tab = [o for o in crouch.obstacles if o["type"] == "table"][0]
        assert tab["height"] == pytest.approx(p.passage_height, abs=1e-6)


def test_direct_arenas():
    up = generate_world("direct_up", 2, 0.4)
    assert up.goal[2] == pytest.approx(0.4)
    down = generate_world("direct_down", 2, 0.4)
    assert down.path[0, 2] == pytest.approx(0.4)
    assert down.goal[2] == pytest.approx(0.0)


def test_unknown_kind_rejected():
    with pytest.raises(ConfigurationError):
        generate_world("world_z", 0, 0.5)
    with pytest.raises(ConfigurationError):
        generate_world("arena_sprint", 0, 0.5)


def test_goal_at_walks_the_route():
    t = generate_world("world_c", 4, 0.7)
    start = goal_at(t, 0.0)
    end = goal_at(t, 1.0)
    assert np.allclose(start, t.path[0])
    assert np.allclose(end, t.path[-1])
    mid = goal_at(t, 0.5)
    assert t.path[0, 0] < mid[0] < t.path[-1, 0]


# --------------------------------------------------------------- queries ----


def _two_box_terrain():
    boxes = np.asarray(
        [
            [-5.0, -5.0, -1.0, 5.0, 5.0, 0.0],
            [0.0, 0.0, 0.0, 1.0, 1.0, 0.5],
            [2.0, 0.0, 0.4, 3.0, 1.0, 0.6],  # floating slab
        ],
        dtype=np.float32,
    )
    return Terrain(
        kind="flat", seed=0, difficulty=0.0, boxes=boxes,
        roles=["ground", "obstacle", "obstacle"], friction=0.7,
        spawn=np.zeros((2, 2), np.float32),
        path=np.zeros((2, 3), np.float32),
    )


def test_support_height_values():
    t = _two_box_terrain()
    assert support_height(t, 0.5, 0.5, 2.0)[0] == pytest.approx(0.5)
    assert support_height(t, 4.0, 4.0, 2.0)[0] == pytest.approx(0.0)
    # a surface above the reference height does not support
    assert support_height(t, 0.5, 0.5, 0.3)[0] == pytest.approx(0.0)
    assert support_height(t, 2.5, 0.5, 2.0)[0] == pytest.approx(0.6)
    assert support_height(t, 2.5, 0.5, 0.2)[0] == pytest.approx(0.0)


def test_elevation_overhang_rule():
    t = _two_box_terrain()
    # slab bottom at 0.4: a robot standing at base 0.5 sees it as a wall
    assert elevation_height(t, 2.5, 0.5, 0.5)[0] == pytest.approx(0.6)
    # same slab ignored when the base is below its underside
    assert elevation_height(t, 2.5, 0.5, 0.3)[0] == pytest.approx(0.0)
    # solid box reads as its top from anywhere above its bottom
    assert elevation_height(t, 0.5, 0.5, 0.1)[0] == pytest.approx(0.5)


def test_terrain_batch_matches_single():
    ts = [generate_world("world_a", s, 0.7) for s in range(3)]
    batch = TerrainBatch(ts)
    rng = np.random.default_rng(0)
    xs = rng.uniform(-6, 6, size=(3, 40)).astype(np.float32)
    ys = rng.uniform(-6, 6, size=(3, 40)).astype(np.float32)
    got_s = batch.support_height(xs, ys, 2.0)
    got_e = batch.elevation_height(xs, ys, np.full_like(xs, 0.6))
    for i, t in enumerate(ts):
        want_s = support_height(t, xs[i], ys[i], 2.0)
        want_e = elevation_height(t, xs[i], ys[i], 0.6)
        assert np.allclose(got_s[i], want_s, atol=1e-6)
        assert np.allclose(got_e[i], want_e, atol=1e-6)


def test_raycast_matches_reference():
    rng = np.random.default_rng(42)
    t = generate_world("world_c", 1, 0.8)
    n = 10_000
    origins = np.stack(
        [rng.uniform(-2, 14, n), rng.uniform(-3, 3, n), rng.uniform(-0.5, 2.0, n)],
        axis=1,
    )
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    got = raycast(t, origins, dirs, max_range=8.0)
    for i in range(0, n, 7):  # dense spot check against the python oracle
        want = oracles.ray_aabb_reference(origins[i], dirs[i], t.boxes, 8.0)
        if np.isinf(want):
            assert np.isinf(got[i])
        else:
            assert got[i] == pytest.approx(want, abs=1e-4)


def test_raycast_axis_aligned_cases():
    t = _two_box_terrain()
    o = np.asarray([[0.5, 0.5, 2.0], [0.5, 0.5, 2.0], [-2.0, 0.5, 0.2]])
    d = np.asarray([[0.0, 0.0, -1.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    dist = raycast(t, o, d, max_range=10.0)
    assert dist[0] == pytest.approx(1.5)   # down onto the unit box
    assert np.isinf(dist[1])               # up into empty space
    assert dist[2] == pytest.approx(2.0)   # sideways into the box face


def test_raycast_padded_batch_rows_ignored():
    t = _two_box_terrain()
    boxes = np.zeros((1, 6, 6), dtype=np.float32)
    boxes[0, : len(t.boxes)] = t.boxes
    o = np.asarray([[[0.5, 0.5, 2.0]]])
    d = np.asarray([[[0.0, 0.0, -1.0]]])
    dist = raycast_boxes(boxes, o, d, 10.0)
    assert dist[0, 0] == pytest.approx(1.5)


# ------------------------------------------------------- voxel occupancy ----


def test_occupancy_full_cell_centroid():
    grid = COARSE_GRID
    base = np.asarray([2.0, 2.0, 1.3])  # grid corner lands at the origin
    boxes = np.asarray([[0.0, 0.0, 0.0, 4.0, 4.0, 2.0]], dtype=np.float32)
    occ, cent = occupancy_ground_truth_batch([boxes], base[None], np.zeros(1), grid)
    assert occ.shape == (1, 32, 32, 16)
    assert cent.shape == (1, 3, 32, 32, 16)
    assert np.all(occ == 1.0)
    assert np.allclose(cent, 0.5, atol=1e-9)


def test_occupancy_half_filled_cell_from_below():
    grid = COARSE_GRID
    base = np.asarray([2.0, 2.0, 1.3])
    boxes = np.asarray([[0.0, 0.0, 0.0, 4.0, 4.0, 0.0625]], dtype=np.float32)
    occ, cent = occupancy_ground_truth_batch([boxes], base[None], np.zeros(1), grid)
    assert np.all(occ[0, :, :, 0] == 1.0)
    assert np.all(occ[0, :, :, 1:] == 0.0)
    assert np.allclose(cent[0, 2, :, :, 0], 0.25, atol=1e-9)
    assert np.allclose(cent[0, 0, :, :, 0], 0.5, atol=1e-9)
    frac, _ = occupancy_ground_truth_batch(
        [boxes], base[None], np.zeros(1), grid, binarize=False
    )
    assert np.allclose(frac[0, :, :, 0], 0.5, atol=1e-9)


def test_occupancy_single_cell_box():
    grid = COARSE_GRID
    base = np.asarray([2.0, 2.0, 1.3])
    boxes = np.asarray([[0.125, 0.25, 0.0, 0.25, 0.375, 0.125]], dtype=np.float32)
    occ, cent = occupancy_ground_truth_batch([boxes], base[None], np.zeros(1), grid)
    assert occ[0].sum() == 1.0
    assert occ[0, 1, 2, 0] == 1.0
    assert np.allclose(cent[0, :, 1, 2, 0], 0.5, atol=1e-9)


def test_occupancy_quarter_turn_matches_rotated_layout():
    grid = COARSE_GRID
    base = np.zeros(3)
    box_world = np.asarray([[0.5, 1.0, -1.0, 1.0, 1.5, -0.75]], dtype=np.float32)
    occ_a, cent_a = occupancy_ground_truth_batch(
        [box_world], base[None], np.asarray([np.pi / 2]), grid
    )
    # the same scene expressed in the robot frame with zero yaw
    box_local = np.asarray([[1.0, -1.0, -1.0, 1.5, -0.5, -0.75]], dtype=np.float32)
    occ_b, cent_b = occupancy_ground_truth_batch(
        [box_local], base[None], np.zeros(1), grid
    )
    assert np.array_equal(occ_a, occ_b)
    assert np.allclose(cent_a, cent_b, atol=1e-6)


def test_occupancy_matches_monte_carlo_at_odd_yaw():
    grid = GridSpec(dims=(10, 10, 4), voxel_size=0.125, offset=(-0.625, -0.625, -0.25))
    base = np.asarray([0.3, -0.2, 0.1])
    yaw = 0.7
    boxes = np.asarray(
        [
            [0.0, -0.6, -0.4, 0.7, 0.25, 0.05],
            [-0.5, -0.1, -0.1, 0.1, 0.6, 0.3],
        ],
        dtype=np.float32,
    )
    frac, cent = occupancy_ground_truth_batch(
        [boxes], base[None], np.asarray([yaw]), grid, binarize=False
    )
    origin, _ = grid.origin_yaw(base, yaw)
    rng = np.random.default_rng(123)
    vs = grid.voxel_size
    checked = 0
    for ix, iy, iz in (
        (4, 4, 1), (5, 5, 2), (3, 6, 0), (6, 3, 1), (2, 2, 2), (7, 5, 0),
        (4, 6, 3), (5, 2, 1), (1, 4, 1), (8, 8, 0),
    ):
        cell_lo = np.asarray([ix * vs, iy * vs, iz * vs])
        cell_hi = cell_lo + vs
        want = 0.0
        cents = []
        for row in boxes:
            f, c = oracles.box_cell_overlap_mc(
                row[:3], row[3:], cell_lo, cell_hi, yaw, origin, rng, n=120_000
            )
            want += f
            if f > 0:
                cents.append((f, c))
        assert frac[0, ix, iy, iz] == pytest.approx(want, abs=0.01)
        if want > 0.05:
            mix = sum(f * c for f, c in cents) / sum(f for f, _ in cents)
            assert np.allclose(cent[0, :, ix, iy, iz], mix, atol=0.02)
            checked += 1
    assert checked >= 3  # the scenario must actually exercise partial cells


def test_occupancy_from_terrain_wrapper():
    t = _two_box_terrain()
    occ, cent = occupancy_ground_truth(t, np.asarray([0.5, 0.5, 0.5]), 0.0, COARSE_GRID)
    assert occ.shape == (32, 32, 16)
    # the column under the robot: ground fills everything below z = -0.5
    # relative to base, the unit box rises to base height
    assert occ[16, 16, 0] == 1.0
    # far above the robot there is only air
    assert occ[16, 16, 15] == 0.0


def test_fine_grid_nests_inside_coarse():
    # the fine volume must cover the central half of the coarse volume in xy
    # and rows 4..12 in z so feature cropping lines up cell for cell
    cx0 = COARSE_GRID.offset[0] + 8 * COARSE_GRID.voxel_size
    assert FINE_GRID.offset[0] == pytest.approx(cx0)
    cz0 = COARSE_GRID.offset[2] + 4 * COARSE_GRID.voxel_size
    assert FINE_GRID.offset[2] == pytest.approx(cz0)
    fine_extent = FINE_GRID.dims[0] * FINE_GRID.voxel_size
    assert fine_extent == pytest.approx(16 * COARSE_GRID.voxel_size)
    fine_z = FINE_GRID.dims[2] * FINE_GRID.voxel_size
    assert fine_z == pytest.approx(8 * COARSE_GRID.voxel_size)


def test_grid_origin_yaw():
    g = COARSE_GRID
    origin, psi = g.origin_yaw(np.asarray([1.0, 2.0, 0.5]), 0.0)
    assert np.allclose(origin, [1.0 - 2.0, 2.0 - 2.0, 0.5 - 1.3])
    origin90, _ = g.origin_yaw(np.asarray([0.0, 0.0, 0.0]), np.pi / 2)
    assert np.allclose(origin90, [2.0, -2.0, -1.3], atol=1e-9)
