import json
import os

import numpy as np
import pytest

from parkour import navigation as nav
from parkour import rl, skills
from parkour.errors import ConfigurationError
from parkour.perception import PerceptionModel, Pose, VoxelGrid, extract_elevation
from parkour.rl import RunningNorm
from parkour.simulator import EnvBatch
from parkour.skills import SKILLS, SkillCatalog, SkillMeta, save_skill_checkpoint
from parkour.terrain import FINE_GRID, Terrain, generate_world, support_height

TINY_LATENT = 8


def _flat_sim(n=2, seed=0, **kw):
    return EnvBatch([generate_world("flat", seed + i, 0.0) for i in range(n)],
                    seed=seed, **kw)


def _tiny_skills(out_dir):
    """Write untrained but loadable checkpoints for all five skills."""
    meta_hidden = [16]
    for i, s in enumerate(SKILLS):
        pol = rl.GaussianPolicy(skills.OBS_DIM, skills.ACT_DIM,
                                hidden=(16,), seed=i)
        val = rl.ValueNet(skills.OBS_DIM, hidden=(16,), seed=i + 50)
        norm = RunningNorm(skills.OBS_DIM)
        save_skill_checkpoint(os.path.join(out_dir, f"skill_{s}.pkrl"),
                              pol, val, norm, SkillMeta(skill=s, hidden=meta_hidden))


def _tiny_perception(path):
    PerceptionModel(seed=0, latent_dim=TINY_LATENT, feature_channels=4).save(path)


@pytest.fixture(scope="module")
def frozen_stack(tmp_path_factory):
    """skills dir + perception checkpoint shared by the slow tests."""
    d = tmp_path_factory.mktemp("stack")
    _tiny_skills(str(d))
    ckpt = str(d / "perception.pkrl")
    _tiny_perception(ckpt)
    return str(d), ckpt


# ------------------------------------------------------------- action space ----


def test_ablation_command_dims():
    assert nav.ablation_config("full").cmd_dim == 4
    assert nav.ablation_config("no_T").cmd_dim == 3
    assert nav.ablation_config("no_H").cmd_dim == 3
    assert nav.ablation_config("no_H_no_T").cmd_dim == 2
    with pytest.raises(ConfigurationError):
        nav.ablation_config("bogus")


def test_decode_bounds_and_roundtrip():
    space = nav.ablation_config("full")
    rng = np.random.default_rng(0)
    raw = rng.uniform(-4.0, 4.0, size=(64, 4))
    off, dpsi, t = nav.decode_command(raw, space)
    assert np.all(np.abs(off) < nav.OFFSET_BOUND)
    assert np.all(np.abs(dpsi) < np.pi)
    assert np.all(t > nav.T_RANGE[0]) and np.all(t < nav.T_RANGE[1])
    back = nav.encode_command(off, dpsi, t, space)
    off2, dpsi2, t2 = nav.decode_command(back, space)
    np.testing.assert_allclose(off2, off, atol=1e-6)
    np.testing.assert_allclose(dpsi2, dpsi, atol=1e-6)
    np.testing.assert_allclose(t2, t, atol=1e-6)


def test_reduced_spaces_nest_in_full():
    """Every reduced-variant command has an exact counterpart in the full
    space: re-encoding its decoded pieces into the full space reproduces the
    same offset, heading change, and duration."""
    full = nav.ablation_config("full")
    rng = np.random.default_rng(1)
    for variant in ("no_T", "no_H", "no_H_no_T"):
        space = nav.ablation_config(variant)
        raw = rng.uniform(-2.0, 2.0, size=(32, space.cmd_dim))
        off, dpsi, t = nav.decode_command(raw, space)
        off2, dpsi2, t2 = nav.decode_command(
            nav.encode_command(off, dpsi, t, full), full)
        np.testing.assert_allclose(off2, off, atol=1e-6)
        np.testing.assert_allclose(dpsi2, dpsi, atol=1e-6)
        np.testing.assert_allclose(t2, t, atol=1e-6)


def test_decode_without_heading_faces_the_offset():
    space = nav.ablation_config("no_H")
    raw = np.array([[0.5, 0.5, 0.0], [-0.3, 0.1, 1.0]])
    off, dpsi, _ = nav.decode_command(raw, space)
    np.testing.assert_allclose(dpsi, np.arctan2(off[:, 1], off[:, 0]), atol=1e-12)


def test_decode_without_time_is_fixed():
    off, dpsi, t = nav.decode_command(np.zeros((3, 2)), nav.ablation_config("no_H_no_T"))
    np.testing.assert_array_equal(t, 2.0)


def test_decode_rejects_wrong_width():
    with pytest.raises(ConfigurationError):
        nav.decode_command(np.zeros((2, 4)), nav.ablation_config("no_T"))


# ------------------------------------------------------------------ reward ----


def _rew(dist, t, flipped=False, impact=False):
    pos = np.array([[dist, 0.0, 0.0]])
    goal = np.zeros((1, 3))
    return nav.navigation_reward(pos, goal, np.array([t]),
                                 np.array([flipped]), np.array([impact]))[0]


def test_reward_success_pinned_value():
    assert abs(_rew(0.2, 0.0) - 5.97) < 1e-9


def test_reward_timeout_pinned_value():
    assert abs(_rew(3.0, 0.0) - (-0.45)) < 1e-9


def test_reward_is_exactly_zero_mid_episode():
    assert _rew(1.7, 12.0) == 0.0
    assert _rew(0.1, 0.01) == 0.0


def test_reward_termination_penalties():
    assert _rew(5.0, 8.0, flipped=True) == -0.5
    assert _rew(5.0, 8.0, impact=True) == -0.5
    assert _rew(5.0, 8.0, flipped=True, impact=True) == -1.0
    # penalties stack with the final-step term
    assert abs(_rew(3.0, 0.0, flipped=True) - (-0.95)) < 1e-9


# ------------------------------------------------------------- observation ----


def test_nav_observation_layout():
    sim = _flat_sim(2)
    sim.reset(np.arange(2),
              base_pos=np.array([[0.0, 0.0, 0.5], [1.0, 2.0, 0.5]]),
              base_yaw=np.array([0.0, np.pi / 2]))
    sim.vel = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
    goal = np.array([[2.0, 0.0, 0.5], [1.0, 3.0, 0.5]])
    latent = np.arange(2 * TINY_LATENT, dtype=np.float32).reshape(2, -1)
    obs = nav.build_nav_observation(sim, goal, np.array([7.0, 9.0]), latent)
    assert obs.shape == (2, nav.nav_obs_dim(TINY_LATENT))
    assert obs.dtype == np.float32
    np.testing.assert_allclose(obs[0, 0:3], [1, 0, 0], atol=1e-6)
    np.testing.assert_allclose(obs[1, 0:3], [1, 0, 0], atol=1e-6)
    np.testing.assert_allclose(obs[:, 3:6], [[0, 0, -1], [0, 0, -1]], atol=1e-6)
    np.testing.assert_allclose(obs[0, 6:9], [2, 0, 0], atol=1e-6)
    np.testing.assert_allclose(obs[1, 6:9], [1, 0, 0], atol=1e-6)
    np.testing.assert_allclose(obs[:, 9], [7, 9], atol=1e-6)
    np.testing.assert_allclose(obs[:, 10:], latent, atol=1e-6)


def test_command_targets_rotate_offset_and_pick_surface_height():
    t = generate_world("world_c", 3, 0.8)
    box = next(o for o in t.obstacles if o["type"] == "box")
    sim = EnvBatch([t], seed=0)
    mx = (box["x0"] + box["x1"]) / 2
    my = (box["y0"] + box["y1"]) / 2
    sim.reset(np.array([0]),
              base_pos=np.array([[mx - 1.0, my, 0.5]]),
              base_yaw=np.array([np.pi / 2]))
    # offset (dx=-1, dy=-1) in a frame rotated by pi/2: world (+1, -1)
    cmd = nav.command_targets(np.array([[-1.0, -1.0]]), np.array([0.3]),
                              np.array([2.0]), sim)
    np.testing.assert_allclose(cmd.target[0, :2], [mx, my - 1.0], atol=1e-6)
    assert abs(cmd.target[0, 2] - box["top_z"]) < 1e-5
    assert abs(cmd.heading[0] - (np.pi / 2 + 0.3)) < 1e-9
    assert cmd.t_remaining[0] == 2.0


# ------------------------------------------------------------ goal sampling ----


def test_sample_goal_sits_on_a_standable_surface():
    rng = np.random.default_rng(0)
    for kind in ("world_a", "world_b", "world_c"):
        for level in (0.0, 0.5, 1.0):
            t = generate_world(kind, 7, 0.7)
            g = nav.sample_goal(t, level, rng)
            ground = float(support_height(t, g[0], g[1], g[2])[0])
            assert abs((g[2] - nav.STAND_HEIGHT) - ground) <= 0.2, (kind, level)


def test_sample_goal_level_orders_distance():
    t = generate_world("world_c", 5, 0.5)
    rng = np.random.default_rng(3)
    near = np.mean([np.linalg.norm(nav.sample_goal(t, 0.0, rng)[:2]) for _ in range(8)])
    far = np.mean([np.linalg.norm(nav.sample_goal(t, 1.0, rng)[:2]) for _ in range(8)])
    assert far > near + 2.0


# -------------------------------------------------------------- grid noise ----


def test_augment_grid_channels_deterministic_and_bounded():
    rng = np.random.default_rng(0)
    ch = np.zeros((3, 4, 16, 16, 8), dtype=np.float32)
    ch[:, 0] = (np.random.default_rng(1).random((3, 16, 16, 8)) < 0.3)
    ch[:, 1:4] = 0.5
    noise = nav.GridNoise(flip_prob=0.05, drop_prob=0.5, cent_sigma=0.1)
    out1 = nav.augment_grid_channels(ch, np.random.default_rng(42), noise)
    out2 = nav.augment_grid_channels(ch, np.random.default_rng(42), noise)
    np.testing.assert_array_equal(out1, out2)
    assert not np.array_equal(out1, ch)
    assert set(np.unique(out1[:, 0])) <= {0.0, 1.0}
    assert out1[:, 1:4].min() >= 0.0 and out1[:, 1:4].max() <= 1.0


def test_augment_grid_channels_zero_noise_is_identity():
    ch = np.random.default_rng(0).random((2, 4, 8, 8, 4)).astype(np.float32)
    out = nav.augment_grid_channels(ch, np.random.default_rng(0),
                                    nav.GridNoise(0.0, 0.0, 0.0))
    np.testing.assert_array_equal(out, ch)
    assert out is not ch


# -------------------------------------------------------- hierarchical step ----


def test_hierarchical_step_runs_ten_inner_steps(frozen_stack):
    skills_dir, _ = frozen_stack
    catalog = SkillCatalog.load(skills_dir)
    sim = _flat_sim(2)
    calls = []
    orig = sim.step

    def counting(q):
        calls.append(q.shape)
        return orig(q)

    sim.step = counting
    cmd = skills.Command(target=np.tile([1.0, 0.0, 0.5], (2, 1)),
                         heading=np.zeros(2), t_remaining=np.array([3.0, 0.1]))
    term = nav.hierarchical_step(sim, catalog, np.array([0, 2]), cmd)
    assert len(calls) == 10
    assert abs(10 * sim.control_dt - nav.OUTER_DT) < 1e-12
    assert abs(cmd.t_remaining[0] - 2.8) < 1e-9
    assert cmd.t_remaining[1] == 0.0  # clock clips at zero
    assert term.flipped.shape == (2,) and term.impact.shape == (2,)


def test_inner_steps_rejects_incompatible_clock():
    sim = _flat_sim(1, control_dt=0.03)
    with pytest.raises(ConfigurationError):
        nav.inner_steps(sim)


# ---------------------------------------------------------- surface queries ----


def test_query_surface_matches_elevation_extraction():
    rng = np.random.default_rng(0)
    X, Y, Z = FINE_GRID.dims
    occ = (rng.random((1, X, Y, Z)) < 0.25).astype(np.float32)
    pose = Pose(np.array([0.0, 0.0, 0.62]), 0.0)
    grid = VoxelGrid.from_channels(
        np.concatenate([occ[0][None], np.zeros((3, X, Y, Z), np.float32)]),
        FINE_GRID, pose)
    want = extract_elevation(grid).ravel()

    has, height = nav.surface_maps(occ, FINE_GRID)
    pts = skills.height_grid_points()
    px = (pose.position[0] + pts[:, 0])[None]
    py = (pose.position[1] + pts[:, 1])[None]
    got = nav.query_surface(has, height, FINE_GRID,
                            pose.position[None], np.array([0.0]), px, py)
    np.testing.assert_allclose(got[0], want, atol=1e-5)


def test_sensed_heights_queries_move_with_the_robot(frozen_stack):
    X, Y, Z = FINE_GRID.dims
    occ = np.ones((1, X, Y, Z), dtype=np.float32)
    occ[..., Z // 2:] = 0.0  # solid slab; surface at the slab's top cell
    sh = nav.SensedHeights(1)
    sh.update(occ, np.array([[0.0, 0.0, 0.6]]), np.array([0.0]))
    sim = _flat_sim(1)
    sim.reset(np.array([0]), base_pos=np.array([[0.3, 0.1, 0.5]]),
              base_yaw=np.array([0.2]))
    h = sh(sim)
    assert h.shape == (1, skills.H_NX * skills.H_NY)
    top = 0.6 + FINE_GRID.offset[2] + (Z // 2 - 0.5) * FINE_GRID.voxel_size
    inside = np.abs(h[0] - top) < 1e-5
    assert inside.mean() > 0.5  # points still over the grid read the slab
    assert np.all((np.abs(h[0] - top) < 1e-5) | (h[0] == 0.0))


# ------------------------------------------------------------- checkpoints ----


def test_nav_checkpoint_roundtrip(tmp_path):
    meta = nav.NavMeta("world_a", "full", [16], TINY_LATENT,
                       curriculum_level=0.4, t_global=20.0)
    space = nav.ablation_config("full")
    pol = rl.HybridPolicy(meta.obs_dim, len(SKILLS), space.cmd_dim,
                          hidden=(16,), seed=3)
    val = rl.ValueNet(meta.obs_dim, hidden=(16,), seed=4)
    norm = RunningNorm(meta.obs_dim)
    norm.update(np.random.default_rng(0).normal(size=(64, meta.obs_dim)))
    path = str(tmp_path / "nav_world_a.pkrl")
    nav.save_nav_checkpoint(path, pol, val, norm, meta)

    loaded = nav.NavPolicy.load(path)
    assert loaded.meta.world_kind == "world_a"
    assert loaded.meta.curriculum_level == 0.4
    assert loaded.space.cmd_dim == 4
    obs = np.random.default_rng(1).normal(size=(5, meta.obs_dim)).astype(np.float32)
    a1 = loaded.act(obs)
    a2 = nav.NavPolicy.load(path).act(obs)
    np.testing.assert_array_equal(a1.skill, a2.skill)
    np.testing.assert_array_equal(a1.cmd, a2.cmd)
    assert a1.cmd.shape == (5, 4)
    assert loaded.param_hash() == nav.NavPolicy.load(path).param_hash()


def test_nav_policy_load_missing_sidecar(tmp_path):
    with pytest.raises(ConfigurationError):
        nav.NavPolicy.load(str(tmp_path / "nope.pkrl"))


def test_nav_checkpoint_names():
    assert nav.nav_checkpoint_name("world_b") == "nav_world_b.pkrl"
    assert nav.nav_checkpoint_name("world_a", "no_T") == "nav_world_a_no_T.pkrl"


# ---------------------------------------------------------- manual baseline ----


def _synthetic_course(obstacle_types):
    boxes = [(-3, -1.6, -1.0, 17, 1.6, 0.0)]
    roles = ["ground"]
    obstacles = []
    x = 4.0
    for typ in obstacle_types:
        o = {"type": typ, "x0": x, "x1": x + 1.0, "y0": -1.6, "y1": 1.6,
             "height": 0.4, "top_z": 0.4}
        if typ == "box":
            boxes.append((x, -1.6, 0.0, x + 1.0, 1.6, 0.4))
            roles.append("obstacle")
        if typ == "table":
            boxes.append((x, -1.6, 0.45, x + 1.0, 1.6, 0.7))
            roles.append("obstacle")
            o["height"] = 0.45
            o["top_z"] = 0.45
        obstacles.append(o)
        x += 4.0
    path = np.array([[0, 0, 0], [16, 0, 0]], dtype=np.float32)
    return Terrain(kind="synthetic", seed=0, difficulty=0.5,
                   boxes=np.array(boxes, dtype=np.float32), roles=roles,
                   friction=0.9, spawn=np.array([[-1, -1], [0, 1]], np.float32),
                   path=path, obstacles=obstacles)


def test_manual_baseline_picks_skills_per_obstacle():
    t = _synthetic_course(["box", "gap", "table"])
    legs = nav.manual_baseline(t)
    names = [SKILLS[leg.skill] for leg in legs]
    specials = [n for n in names if n != "walk"]
    assert specials == ["climb_up", "climb_down", "jump", "crouch"]
    up = legs[names.index("climb_up")]
    assert abs(up.target[2] - 0.4) < 1e-6  # aims at the box top
    assert names[-1] == "walk"
    np.testing.assert_allclose(legs[-1].target[:2], t.goal[:2], atol=1e-6)
    for leg in legs:
        assert nav.T_RANGE[0] <= leg.duration <= nav.T_RANGE[1]
    xs = [leg.target[0] for leg in legs]
    assert xs == sorted(xs)  # marches forward along the course


def test_manual_baseline_unknown_obstacle_walks():
    t = _synthetic_course(["mystery"])
    legs = nav.manual_baseline(t)
    assert all(SKILLS[leg.skill] == "walk" for leg in legs)


def test_manual_baseline_flat_is_all_walk():
    t = generate_world("flat", 0, 0.0)
    legs = nav.manual_baseline(t)
    assert len(legs) >= 1
    assert all(SKILLS[leg.skill] == "walk" for leg in legs)
    np.testing.assert_allclose(legs[-1].target[:2], t.goal[:2], atol=1e-6)


# ----------------------------------------------------------------- training ----


def _tiny_cfg(frozen_stack, tmp_path, **over):
    skills_dir, ckpt = frozen_stack
    base = dict(
        skills_dir=skills_dir, perception_ckpt=ckpt, n_envs=4, outer_horizon=3,
        total_outer_steps=4 * 3 * 2, seed=0, hidden=(16,), t_global=2.0,
        difficulty_range=(0.2, 0.4), curriculum_every=1,
        ppo=rl.PPOConfig(epochs=1, minibatches=1),
        out_dir=str(tmp_path),
    )
    base.update(over)
    return nav.NavTrainConfig(**base)


def test_train_navigation_smoke_and_frozen_stack(frozen_stack, tmp_path):
    skills_dir, ckpt = frozen_stack
    catalog_hash = SkillCatalog.load(skills_dir).param_hash()
    model_hash = PerceptionModel.load(ckpt).param_hash()

    result = nav.train_navigation("flat", _tiny_cfg(frozen_stack, tmp_path))
    assert os.path.exists(result["checkpoint"])
    with open(result["csv"]) as f:
        header = f.readline().strip().split(",")
    assert header == ["update", "surrogate", "value_loss", "entropy", "kl",
                      "mean_reward", "curriculum_level"]
    assert result["updates"] == 2

    # training must not have touched the frozen lower layers
    assert SkillCatalog.load(skills_dir).param_hash() == catalog_hash
    assert PerceptionModel.load(ckpt).param_hash() == model_hash

    pol = nav.NavPolicy.load(result["checkpoint"])
    assert pol.meta.world_kind == "flat"
    assert pol.meta.latent_dim == TINY_LATENT
    obs = np.zeros((2, nav.nav_obs_dim(TINY_LATENT)), dtype=np.float32)
    act = pol.act(obs)
    assert act.skill.shape == (2,) and act.cmd.shape == (2, 4)


def test_train_navigation_requires_perception(frozen_stack, tmp_path):
    cfg = _tiny_cfg(frozen_stack, tmp_path,
                    perception_ckpt=str(tmp_path / "missing.pkrl"))
    with pytest.raises(ConfigurationError):
        nav.train_navigation("flat", cfg)


def test_train_navigation_ablation_width(frozen_stack, tmp_path):
    result = nav.train_navigation(
        "flat", _tiny_cfg(frozen_stack, tmp_path, variant="no_H_no_T"))
    pol = nav.NavPolicy.load(result["checkpoint"])
    assert pol.space.cmd_dim == 2
    assert result["checkpoint"].endswith("nav_flat_no_H_no_T.pkrl")
    act = pol.act(np.zeros((1, nav.nav_obs_dim(TINY_LATENT)), dtype=np.float32))
    assert act.cmd.shape == (1, 2)


# --------------------------------------------------------------- evaluation ----


def test_evaluate_navigation_smoke(frozen_stack, tmp_path):
    skills_dir, ckpt = frozen_stack
    result = nav.train_navigation("flat", _tiny_cfg(frozen_stack, tmp_path))
    pol = nav.NavPolicy.load(result["checkpoint"])
    catalog = SkillCatalog.load(skills_dir)
    model = PerceptionModel.load(ckpt)
    traj = str(tmp_path / "rollouts.jsonl")
    res = nav.evaluate_navigation(pol, catalog, model, n_rollouts=2, seed=0,
                                  level=0.2, t_global=1.0, traj_path=traj)
    assert res["world_kind"] == "flat"
    assert 0.0 <= res["success_rate"] <= 1.0
    assert res["skill_histogram"].count("|") == len(SKILLS) - 1
    with open(traj) as f:
        rows = [json.loads(line) for line in f]
    assert len(rows) == 2
    for row in rows:
        assert row["kind"] == "flat"
        assert len(row["skills"]) == len(row["poses"])
        assert len(row["poses"][0]) == 4


def test_evaluate_manual_smoke(frozen_stack):
    skills_dir, _ = frozen_stack
    catalog = SkillCatalog.load(skills_dir)
    res = nav.evaluate_manual(catalog, n_rollouts=2, seed=0, world_kind="flat",
                              difficulty_range=(0.0, 0.1), t_global=1.0)
    assert 0.0 <= res["success_rate"] <= 1.0
    assert res["skill_histogram"].startswith("walk:")


def test_direct_path_likelihood_validates_direction(frozen_stack, tmp_path):
    skills_dir, ckpt = frozen_stack
    result = nav.train_navigation("flat", _tiny_cfg(frozen_stack, tmp_path))
    pol = nav.NavPolicy.load(result["checkpoint"])
    with pytest.raises(ConfigurationError):
        nav.direct_path_likelihood(pol, SkillCatalog.load(skills_dir),
                                   PerceptionModel.load(ckpt), [0.2],
                                   direction="sideways")
