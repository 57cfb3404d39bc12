"""Goal-directed navigation on top of the frozen locomotion skills.

A 5 Hz policy looks at the goal and the perception latent and emits a hybrid
action: a skill index plus a short-horizon command (body-frame waypoint
offset, heading change, command duration). An inner 50 Hz loop runs the
chosen skill against that command. Training uses PPO with sparse goal
rewards, a goal-distance curriculum, and random pushes; the latent comes from
the perception encoder reading noisy ground-truth occupancy grids, so the
same policy can later run with the sensed reconstruction in the loop.
"""

from __future__ import annotations

import collections
import csv
import json
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import rl
from .checkpoint import save_checkpoint, load_checkpoint
from .errors import ConfigurationError, ContractViolation
from .perception import PerceptionModel, PerceptionPipeline
from .rl import RunningNorm
from .simulator import (
    EnvBatch, NavTermination, check_termination_navigation,
    gravity_direction_body, quat_rotate_inv, quat_yaw, wrap_angle,
)
from .skills import (
    SKILLS, Command, SkillCatalog, build_observation, decode_action,
    height_grid_points, sample_height_grid, update_curriculum,
)
from .terrain import (
    COARSE_GRID, FINE_GRID, Terrain, generate_world, goal_at,
    occupancy_ground_truth_batch, support_height,
)

OUTER_DT = 0.2          # seconds of inner simulation per policy decision
GOAL_RADIUS = 0.4       # 3D success ball around the goal point
STAND_HEIGHT = 0.5      # nominal base height over the support surface

OFFSET_BOUND = 3.0      # waypoint offset bound, meters, each body axis
T_RANGE = (0.5, 5.0)    # command duration bounds, seconds
_T_MID = 0.5 * (T_RANGE[0] + T_RANGE[1])
_T_HALF = 0.5 * (T_RANGE[1] - T_RANGE[0])

TRACK_COEF = 0.15
SUCCESS_BONUS = 40.0
TERM_COEF = 0.5


# ----------------------------------------------------------- action space ----


@dataclass(frozen=True)
class ActionSpaceConfig:
    """Which continuous heads the policy carries. Removed heads fall back to
    a fixed duration or to facing the commanded offset."""

    variant: str
    has_heading: bool
    has_time: bool
    fixed_t: float = 2.0

    @property
    def cmd_dim(self) -> int:
        return 2 + int(self.has_heading) + int(self.has_time)


_VARIANTS = {
    "full": ActionSpaceConfig("full", has_heading=True, has_time=True),
    "no_T": ActionSpaceConfig("no_T", has_heading=True, has_time=False),
    "no_H": ActionSpaceConfig("no_H", has_heading=False, has_time=True),
    "no_H_no_T": ActionSpaceConfig("no_H_no_T", has_heading=False, has_time=False),
}


def ablation_config(variant: str) -> ActionSpaceConfig:
    if variant not in _VARIANTS:
        raise ConfigurationError(
            f"unknown action-space variant {variant!r}; pick from {sorted(_VARIANTS)}"
        )
    return _VARIANTS[variant]


@dataclass
class HybridAction:
    """One outer-step decision: a skill index per env plus the raw (pre-
    squash) continuous command vector."""

    skill: np.ndarray  # [N] int
    cmd: np.ndarray    # [N, cmd_dim] float, unbounded


def decode_command(raw: np.ndarray, space: ActionSpaceConfig):
    """Raw policy output -> bounded command pieces.

    Returns (offset [N,2] body-frame meters, heading_delta [N] rad,
    t_star [N] s). Without a heading head the robot faces the commanded
    offset; without a time head every command lasts space.fixed_t."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.shape[1] != space.cmd_dim:
        raise ConfigurationError(
            f"command for {space.variant!r} needs shape [N,{space.cmd_dim}], got {raw.shape}"
        )
    offset = OFFSET_BOUND * np.tanh(raw[:, 0:2])
    col = 2
    if space.has_heading:
        dpsi = np.pi * np.tanh(raw[:, col])
        col += 1
    else:
        dpsi = np.arctan2(offset[:, 1], offset[:, 0])
    if space.has_time:
        t_star = _T_MID + _T_HALF * np.tanh(raw[:, col])
    else:
        t_star = np.full(len(raw), space.fixed_t)
    return offset, dpsi, t_star


def encode_command(offset: np.ndarray, dpsi: np.ndarray, t_star: np.ndarray,
                   space: ActionSpaceConfig) -> np.ndarray:
    """Inverse of decode_command on the heads the variant carries."""
    lim = 1.0 - 1e-12

    def inv(x):
        return np.arctanh(np.clip(x, -lim, lim))

    cols = [inv(np.asarray(offset, dtype=np.float64) / OFFSET_BOUND)]
    if space.has_heading:
        cols.append(inv(np.asarray(dpsi) / np.pi)[:, None])
    if space.has_time:
        cols.append(inv((np.asarray(t_star) - _T_MID) / _T_HALF)[:, None])
    return np.concatenate(cols, axis=1)


def command_targets(offset: np.ndarray, dpsi: np.ndarray, t_star: np.ndarray,
                    sim: EnvBatch) -> Command:
    """Resolve a decoded command against the current pose: rotate the offset
    to world, pick the target height off the terrain (same overhang rule the
    height observations use), and set the target heading."""
    yaw = quat_yaw(sim.quat)
    c, s = np.cos(yaw), np.sin(yaw)
    wx = sim.pos[:, 0] + c * offset[:, 0] - s * offset[:, 1]
    wy = sim.pos[:, 1] + s * offset[:, 0] + c * offset[:, 1]
    wz = sim.batch.elevation_height(
        wx[:, None].astype(np.float32), wy[:, None].astype(np.float32),
        sim.pos[:, 2:3].astype(np.float32))[:, 0]
    target = np.stack([wx, wy, wz.astype(np.float64)], axis=1)
    heading = wrap_angle(yaw + dpsi)
    return Command(target=target, heading=heading,
                   t_remaining=np.asarray(t_star, dtype=np.float64).copy())


# ------------------------------------------------------------- observation ----


def nav_obs_dim(latent_dim: int) -> int:
    return 10 + latent_dim


def build_nav_observation(sim: EnvBatch, goal: np.ndarray, t_global: np.ndarray,
                          latent: np.ndarray) -> np.ndarray:
    """[N, 10 + latent] observation: base velocity and gravity direction in
    the body frame, goal offset in the heading frame, remaining episode time,
    then the scene latent. Deliberately no joint state and no height grid."""
    quat = sim.quat
    v_b = quat_rotate_inv(quat, sim.vel)
    g_b = gravity_direction_body(quat)
    yaw = quat_yaw(quat)
    c, s = np.cos(yaw), np.sin(yaw)
    d = goal - sim.pos
    rel = np.stack([c * d[:, 0] + s * d[:, 1],
                    -s * d[:, 0] + c * d[:, 1],
                    d[:, 2]], axis=1)
    return np.concatenate(
        [v_b, g_b, rel, np.asarray(t_global)[:, None], latent], axis=1
    ).astype(np.float32)


# ------------------------------------------------------------------ reward ----


def navigation_reward(pos: np.ndarray, goal: np.ndarray, t_global: np.ndarray,
                      flipped: np.ndarray, impact: np.ndarray) -> np.ndarray:
    """Sparse goal reward. The tracking term fires only when the episode
    clock reads zero (callers zero the clock on early goal arrival);
    termination penalties fire on the step their event latches; every other
    step is exactly 0."""
    dist = np.linalg.norm(np.asarray(pos) - np.asarray(goal), axis=-1)
    reached = dist < GOAL_RADIUS
    final = np.asarray(t_global) <= 0.0
    rew = TRACK_COEF * final * (SUCCESS_BONUS * reached - dist)
    return rew - TERM_COEF * (flipped.astype(np.float64) + impact.astype(np.float64))


# -------------------------------------------------------- hierarchical step ----


def inner_steps(sim: EnvBatch) -> int:
    n = OUTER_DT / sim.control_dt
    if abs(n - round(n)) > 1e-9:
        raise ConfigurationError(
            f"outer period {OUTER_DT} not a multiple of control_dt {sim.control_dt}"
        )
    return int(round(n))


def hierarchical_step(sim: EnvBatch, catalog: SkillCatalog, skill_idx: np.ndarray,
                      cmd: Command, h_fn=None) -> NavTermination:
    """One outer control period: exactly OUTER_DT seconds of inner steps in
    which the selected frozen skills track cmd. cmd.t_remaining counts down
    in place. h_fn(sim) may supply the height observations (defaults to the
    exact terrain heights). Returns termination flags latched over the
    period."""
    flipped = np.zeros(sim.B, dtype=bool)
    impact = np.zeros(sim.B, dtype=bool)
    for _ in range(inner_steps(sim)):
        if h_fn is None:
            h = sample_height_grid(sim.batch, sim.pos, quat_yaw(sim.quat))
        else:
            h = h_fn(sim)
        obs = build_observation(sim, cmd, h)
        action = catalog.act(skill_idx, obs)
        info = sim.step(decode_action(action))
        cmd.t_remaining = np.maximum(cmd.t_remaining - sim.control_dt, 0.0)
        term = check_termination_navigation(sim.quat, info)
        flipped |= term.flipped
        impact |= term.impact
    return NavTermination(flipped=flipped, impact=impact)


# ------------------------------------------------------------ goal sampling ----


def sample_goal(t: Terrain, level: float, rng: np.random.Generator,
                min_frac: float = 0.15) -> np.ndarray:
    """Goal for one episode: a point along the terrain's nominal route at a
    curriculum-scaled arc fraction, advanced forward until it sits on a
    standable surface (skipping interpolants hanging over pits or part-way
    up a box face), at standing height above that surface."""
    frac = min_frac + (1.0 - min_frac) * float(np.clip(level, 0.0, 1.0))
    frac = float(np.clip(frac + rng.uniform(-0.05, 0.05), 0.02, 1.0))
    p = goal_at(t, frac)
    ground = float(support_height(t, p[0], p[1], p[2] + 0.3)[0])
    while abs(ground - p[2]) > 0.15 and frac < 1.0:
        frac = min(frac + 0.03, 1.0)
        p = goal_at(t, frac)
        ground = float(support_height(t, p[0], p[1], p[2] + 0.3)[0])
    return np.array([p[0], p[1], ground + STAND_HEIGHT], dtype=np.float64)


# ---------------------------------------------------- latent from GT grids ----


@dataclass
class GridNoise:
    """Cheap stand-in for reconstruction error, applied to ground-truth
    grids before encoding: occupancy bit flips, an occasional dropped block
    (occlusion hole), and centroid jitter."""

    flip_prob: float = 0.02
    drop_prob: float = 0.3
    cent_sigma: float = 0.05


def augment_grid_channels(channels: np.ndarray, rng: np.random.Generator,
                          noise: GridNoise) -> np.ndarray:
    out = np.array(channels, dtype=np.float32, copy=True)
    B, _, X, Y, Z = out.shape
    if noise.flip_prob > 0:
        flips = rng.random((B, X, Y, Z)) < noise.flip_prob
        out[:, 0] = np.where(flips, 1.0 - out[:, 0], out[:, 0])
    if noise.drop_prob > 0:
        for b in np.flatnonzero(rng.random(B) < noise.drop_prob):
            x0 = int(rng.integers(0, max(X - 8, 1)))
            y0 = int(rng.integers(0, max(Y - 8, 1)))
            z0 = int(rng.integers(0, max(Z - 4, 1)))
            out[b, :, x0:x0 + 8, y0:y0 + 8, z0:z0 + 4] = 0.0
    if noise.cent_sigma > 0:
        out[:, 1:4] += rng.normal(0.0, noise.cent_sigma, (B, 3, X, Y, Z)).astype(np.float32)
        np.clip(out[:, 1:4], 0.0, 1.0, out=out[:, 1:4])
    return out


def ground_truth_channels(boxes_list, pos: np.ndarray, yaw: np.ndarray) -> np.ndarray:
    """Exact coarse-grid occupancy+centroid block [B,4,X,Y,Z] at the poses."""
    occ, cent = occupancy_ground_truth_batch(boxes_list, pos, yaw, COARSE_GRID)
    return np.concatenate([occ[:, None], cent], axis=1)


# ------------------------------------------------------------- checkpoints ----


@dataclass
class NavMeta:
    world_kind: str
    variant: str
    hidden: list
    latent_dim: int
    curriculum_level: float = 0.0
    t_global: float = 30.0
    n_skills: int = len(SKILLS)

    @property
    def obs_dim(self) -> int:
        return nav_obs_dim(self.latent_dim)


def save_nav_checkpoint(path: str, policy: rl.HybridPolicy, value: rl.ValueNet,
                        norm: RunningNorm, meta: NavMeta) -> None:
    tensors = {}
    tensors.update({k: v.data for k, v in policy.params().items()})
    tensors.update({k: v.data for k, v in value.params().items()})
    tensors.update(norm.state_dict())
    save_checkpoint(path, tensors)
    with open(path + ".json", "w") as f:
        json.dump(asdict(meta), f, indent=1)


class NavPolicy:
    """A trained navigation head: hybrid policy + normalizer + metadata."""

    def __init__(self, policy: rl.HybridPolicy, norm: RunningNorm, meta: NavMeta):
        self.policy = policy
        self.norm = norm
        self.meta = meta
        self.space = ablation_config(meta.variant)

    @classmethod
    def load(cls, path: str) -> "NavPolicy":
        try:
            with open(path + ".json") as f:
                meta = NavMeta(**json.load(f))
        except FileNotFoundError:
            raise ConfigurationError(f"missing checkpoint sidecar {path}.json")
        space = ablation_config(meta.variant)
        tensors = load_checkpoint(path)
        policy = rl.HybridPolicy(meta.obs_dim, meta.n_skills, space.cmd_dim,
                                 hidden=tuple(meta.hidden), seed=0)
        norm = RunningNorm(meta.obs_dim)
        norm.load_state_dict(tensors)
        for k, t in policy.params().items():
            if k not in tensors:
                raise ContractViolation(f"checkpoint missing {k}")
            if tensors[k].shape != t.data.shape:
                raise ContractViolation(f"checkpoint shape mismatch for {k}")
            t.data = np.ascontiguousarray(tensors[k], dtype=np.float32)
        return cls(policy, norm, meta)

    def act(self, obs: np.ndarray, rng=None, deterministic: bool = True) -> HybridAction:
        dist = self.policy.dist(self.norm(obs))
        skill, cmd = rl.hybrid_sample(dist, rng, deterministic=deterministic)
        return HybridAction(skill=skill, cmd=cmd)

    def param_hash(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for k in sorted(self.policy.params()):
            h.update(self.policy.params()[k].data.tobytes())
        h.update(self.norm.mean.tobytes())
        h.update(self.norm.var.tobytes())
        return h.hexdigest()


def nav_checkpoint_name(world_kind: str, variant: str = "full") -> str:
    if variant == "full":
        return f"nav_{world_kind}.pkrl"
    return f"nav_{world_kind}_{variant}.pkrl"


# ---------------------------------------------------------------- training ----


@dataclass
class NavTrainConfig:
    skills_dir: str = "runs/skills"
    perception_ckpt: str = "runs/perception/perception.pkrl"
    variant: str = "full"
    n_envs: int = 16
    outer_horizon: int = 24
    total_outer_steps: int = 80_000
    seed: int = 0
    hidden: tuple = (256, 128)
    init_log_std: float = 0.0   # commands are tanh-bounded, wide start is safe
    t_global: float = 30.0
    difficulty_range: tuple = (0.3, 0.9)
    curriculum_start: float = 0.0
    curriculum_every: int = 10
    advance_reward: float = 3.0
    retreat_reward: float = 0.5
    curriculum_step: float = 0.1
    min_goal_frac: float = 0.15
    push_interval: float = 4.0   # mean seconds between pushes, 0 disables
    push_max: float = 1.0        # m/s horizontal speed change per push
    grid_noise: GridNoise = field(default_factory=GridNoise)
    h_noise: float = 0.02
    ppo: rl.PPOConfig = field(default_factory=lambda: rl.PPOConfig(c_entropy=0.01))
    out_dir: str = "runs/nav"
    csv_name: str = "train_stats.csv"


class NavTask:
    """Owns the terrain/sim batch, goals, clocks, and the latent pipeline
    for one training run."""

    def __init__(self, world_kind: str, cfg: NavTrainConfig, catalog: SkillCatalog,
                 model: PerceptionModel, level: float, seed_base: int):
        self.world_kind = world_kind
        self.cfg = cfg
        self.catalog = catalog
        self.model = model
        self.level = level
        self.space = ablation_config(cfg.variant)
        self.rng = np.random.default_rng(np.random.SeedSequence((seed_base, 31)))
        self.terrains = [
            generate_world(world_kind, seed_base + i,
                           float(self.rng.uniform(*cfg.difficulty_range)))
            for i in range(cfg.n_envs)
        ]
        self.sim = EnvBatch(self.terrains, seed=seed_base)
        self.boxes = [t.boxes for t in self.terrains]
        n = cfg.n_envs
        self.goal = np.zeros((n, 3))
        self.t_global = np.zeros(n)
        self._reset(np.arange(n))

    def _reset(self, ids: np.ndarray):
        if len(ids) == 0:
            return
        self.sim.reset(ids)
        for i in ids:
            self.goal[i] = sample_goal(self.terrains[i], self.level, self.rng,
                                       self.cfg.min_goal_frac)
        self.t_global[ids] = self.cfg.t_global

    def _heights(self, sim: EnvBatch) -> np.ndarray:
        h = sample_height_grid(sim.batch, sim.pos, quat_yaw(sim.quat))
        if self.cfg.h_noise > 0:
            h = h + self.rng.normal(0.0, self.cfg.h_noise, h.shape)
        return h

    def observe(self) -> np.ndarray:
        gt = ground_truth_channels(self.boxes, self.sim.pos, quat_yaw(self.sim.quat))
        meas = augment_grid_channels(gt, self.rng, self.cfg.grid_noise)
        fb = augment_grid_channels(gt, self.rng, self.cfg.grid_noise)
        latent = self.model.encode_latent(meas, fb)
        return build_nav_observation(self.sim, self.goal, self.t_global, latent)

    def step(self, skill_idx: np.ndarray, raw_cmd: np.ndarray):
        """One outer step; returns (reward, done, final_step_rewards)."""
        offset, dpsi, t_star = decode_command(raw_cmd, self.space)
        cmd = command_targets(offset, dpsi, t_star, self.sim)
        term = hierarchical_step(self.sim, self.catalog, skill_idx, cmd,
                                 h_fn=self._heights)
        cfg = self.cfg
        if cfg.push_interval > 0:
            hit = np.flatnonzero(self.rng.random(self.sim.B) < OUTER_DT / cfg.push_interval)
            if hit.size:
                ang = self.rng.uniform(-np.pi, np.pi, hit.size)
                mag = self.rng.uniform(0.0, cfg.push_max, hit.size)
                dv = np.stack([mag * np.cos(ang), mag * np.sin(ang),
                               np.zeros(hit.size)], axis=1)
                self.sim.apply_push(hit, dv)
        self.t_global = self.t_global - OUTER_DT
        dist = np.linalg.norm(self.sim.pos - self.goal, axis=1)
        reached = dist < GOAL_RADIUS
        t_eff = np.where(reached, 0.0, self.t_global)
        rew = navigation_reward(self.sim.pos, self.goal, t_eff,
                                term.flipped, term.impact)
        done = reached | (self.t_global <= 0.0) | term.any
        finals = [float(rew[i]) for i in np.flatnonzero(done)]
        self._reset(np.flatnonzero(done))
        return rew, done.astype(np.float64), finals


def _load_perception(path: str) -> PerceptionModel:
    try:
        return PerceptionModel.load(path)
    except FileNotFoundError:
        raise ConfigurationError(f"missing perception checkpoint {path}")


def train_navigation(world_kind: str, cfg: NavTrainConfig):
    """PPO over the hybrid head with frozen skills and a frozen perception
    encoder; returns a summary dict with the checkpoint path."""
    catalog = SkillCatalog.load(cfg.skills_dir)
    model = _load_perception(cfg.perception_ckpt)
    space = ablation_config(cfg.variant)
    obs_dim = nav_obs_dim(model.latent_dim)
    os.makedirs(cfg.out_dir, exist_ok=True)
    ckpt_path = os.path.join(cfg.out_dir, nav_checkpoint_name(world_kind, cfg.variant))

    policy = rl.HybridPolicy(obs_dim, len(SKILLS), space.cmd_dim,
                             hidden=cfg.hidden, seed=cfg.seed,
                             init_log_std=cfg.init_log_std)
    value = rl.ValueNet(obs_dim, hidden=cfg.hidden, seed=cfg.seed + 1)
    ppo = rl.PPO(policy, value, cfg.ppo, seed=cfg.seed + 2)
    norm = RunningNorm(obs_dim)

    level = cfg.curriculum_start
    task = NavTask(world_kind, cfg, catalog, model, level,
                   seed_base=cfg.seed * 61_001)
    act_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 13)))
    recent = collections.deque(maxlen=100)
    n_updates = max(cfg.total_outer_steps // (cfg.n_envs * cfg.outer_horizon), 1)
    best = (-np.inf, 0)
    csv_path = os.path.join(cfg.out_dir, cfg.csv_name)
    csv_f = open(csv_path, "w", newline="")
    writer = csv.writer(csv_f)
    writer.writerow(["update", "surrogate", "value_loss", "entropy", "kl",
                     "mean_reward", "curriculum_level"])

    def save(lv):
        save_nav_checkpoint(ckpt_path, policy, value, norm,
                            NavMeta(world_kind, cfg.variant, list(cfg.hidden),
                                    model.latent_dim, lv, cfg.t_global))

    obs_raw = task.observe()
    for update in range(n_updates):
        buf = rl.RolloutBuffer(cfg.outer_horizon, cfg.n_envs, obs_dim,
                               space.cmd_dim, store_skill=True)
        for _ in range(cfg.outer_horizon):
            norm.update(obs_raw)
            obs = norm(obs_raw)
            dist = policy.dist(obs)
            skill, cmd = dist.sample(act_rng)
            logp = dist.logprob(skill, cmd)
            rew, done, finals = task.step(skill, cmd)
            recent.extend(finals)
            buf.add(obs, cmd, logp, rew, value.value(obs), done, skill=skill)
            obs_raw = task.observe()
        last_v = value.value(norm(obs_raw))
        batch = buf.finish(last_v, cfg.ppo.gamma, cfg.ppo.lam)
        stats = ppo.update(batch)
        if not np.isfinite(stats.value_loss):
            raise ContractViolation(f"training diverged (seed {cfg.seed})")
        metric = float(np.mean(recent)) if recent else 0.0
        writer.writerow([update, f"{stats.surrogate:.6f}", f"{stats.value_loss:.6f}",
                         f"{stats.entropy:.6f}", f"{stats.kl:.6f}",
                         f"{float(buf.rew.mean()):.6f}", f"{level:.2f}"])
        csv_f.flush()
        if (update + 1) % cfg.curriculum_every == 0 and len(recent) >= 20:
            if metric > best[0]:
                best = (metric, update)
                save(level)
            new_level = update_curriculum(level, metric, advance=cfg.advance_reward,
                                          retreat=cfg.retreat_reward,
                                          step=cfg.curriculum_step)
            if new_level != level:
                level = new_level
                task = NavTask(world_kind, cfg, catalog, model, level,
                               seed_base=cfg.seed * 61_001 + update + 1)
                obs_raw = task.observe()
                recent.clear()
    csv_f.close()
    metric = float(np.mean(recent)) if recent else 0.0
    if metric >= best[0] or best[1] == 0:
        save(level)
    return {
        "checkpoint": ckpt_path, "csv": csv_path, "final_level": level,
        "mean_final_reward": metric, "updates": n_updates,
    }


# ------------------------------------------------- elevation from fine grid ----


def surface_maps(occ_prob: np.ndarray, spec, threshold: float = 0.5):
    """Per-column surface from batched fine occupancy [B,X,Y,Z]: a cell
    counts if occupied and connected downward through occupied cells to one
    whose bottom reaches base height. Returns (has [B,X,Y] bool,
    height [B,X,Y] grid-local z of the top cell's center)."""
    B = occ_prob.shape[0]
    X, Y, Z = spec.dims
    vs = spec.voxel_size
    occ = occ_prob >= threshold
    z_bottom = spec.offset[2] + np.arange(Z) * vs
    grounded = np.zeros_like(occ)
    below = np.zeros((B, X, Y), dtype=bool)
    for k in range(Z):
        grounded[..., k] = occ[..., k] & ((z_bottom[k] <= 1e-3) | below)
        below = grounded[..., k]
    has = grounded.any(axis=-1)
    top = Z - 1 - np.argmax(grounded[..., ::-1], axis=-1)
    height = spec.offset[2] + (top + 0.5) * vs
    return has, np.where(has, height, 0.0)


def query_surface(has: np.ndarray, height: np.ndarray, spec,
                  grid_pos: np.ndarray, grid_yaw: np.ndarray,
                  px: np.ndarray, py: np.ndarray) -> np.ndarray:
    """World-frame surface heights at world points [B,P], looked up in each
    env's column map (anchored at the grid pose). Points outside the grid or
    over empty columns fall back to the world ground plane z = 0."""
    X, Y, _ = spec.dims
    vs = spec.voxel_size
    c, s = np.cos(grid_yaw), np.sin(grid_yaw)
    dx = px - grid_pos[:, 0:1]
    dy = py - grid_pos[:, 1:2]
    lx = c[:, None] * dx + s[:, None] * dy
    ly = -s[:, None] * dx + c[:, None] * dy
    ix = np.floor((lx - spec.offset[0]) / vs).astype(np.int64)
    iy = np.floor((ly - spec.offset[1]) / vs).astype(np.int64)
    inb = (ix >= 0) & (ix < X) & (iy >= 0) & (iy < Y)
    ixc, iyc = ix.clip(0, X - 1), iy.clip(0, Y - 1)
    rows = np.arange(len(px))[:, None]
    ok = inb & has[rows, ixc, iyc]
    world = grid_pos[:, 2:3] + height[rows, ixc, iyc]
    return np.where(ok, world, 0.0)


class SensedHeights:
    """Height provider for the inner loop during perception-in-the-loop
    runs: the fine reconstruction is frozen at each outer step's pose and
    queried at the robot's current sample points as it moves."""

    def __init__(self, n_envs: int):
        self.n = n_envs
        self.has = None
        self.height = None
        self.grid_pos = np.zeros((n_envs, 3))
        self.grid_yaw = np.zeros(n_envs)
        self._pts = height_grid_points()

    def update(self, fine_occ: np.ndarray, pos: np.ndarray, yaw: np.ndarray,
               threshold: float = 0.5):
        self.has, self.height = surface_maps(fine_occ, FINE_GRID, threshold)
        self.grid_pos = np.asarray(pos, dtype=np.float64).copy()
        self.grid_yaw = np.asarray(yaw, dtype=np.float64).copy()

    def __call__(self, sim: EnvBatch) -> np.ndarray:
        yaw = quat_yaw(sim.quat)
        c, s = np.cos(yaw), np.sin(yaw)
        px = sim.pos[:, 0:1] + c[:, None] * self._pts[:, 0] - s[:, None] * self._pts[:, 1]
        py = sim.pos[:, 1:2] + s[:, None] * self._pts[:, 0] + c[:, None] * self._pts[:, 1]
        return query_surface(self.has, self.height, FINE_GRID,
                             self.grid_pos, self.grid_yaw, px, py)


# -------------------------------------------------------------- evaluation ----


def _skill_histogram(counts: np.ndarray) -> str:
    total = max(int(counts.sum()), 1)
    return "|".join(f"{name}:{counts[i] / total:.3f}" for i, name in enumerate(SKILLS))


def evaluate_navigation(policy: NavPolicy, catalog: SkillCatalog,
                        model: PerceptionModel, n_rollouts: int, seed: int = 0,
                        world_kind: str = "", level: float = None,
                        difficulty_range=(0.3, 0.9), use_sensing: bool = False,
                        stochastic: bool = False, t_global: float = None,
                        traj_path: str = None) -> dict:
    """Batched rollouts of a trained policy; success is reaching the goal
    ball before the clock or a termination event. With use_sensing the
    latent and the inner-loop heights come from the perception network
    reading the simulated range sensor instead of ground truth."""
    if model.latent_dim != policy.meta.latent_dim:
        raise ConfigurationError(
            f"policy expects latent {policy.meta.latent_dim}, model has {model.latent_dim}"
        )
    kind = world_kind or policy.meta.world_kind
    lvl = policy.meta.curriculum_level if level is None else float(level)
    t_budget = policy.meta.t_global if t_global is None else float(t_global)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 17)))
    terrains = [
        generate_world(kind, seed * 50_021 + k, float(rng.uniform(*difficulty_range)))
        for k in range(n_rollouts)
    ]
    goals = np.stack([sample_goal(t, lvl, rng) for t in terrains])
    sim = EnvBatch(terrains, seed=seed + 7)
    boxes = [t.boxes for t in terrains]
    pipe = PerceptionPipeline(model, n_rollouts) if use_sensing else None
    heights = SensedHeights(n_rollouts) if use_sensing else None
    act_rng = np.random.default_rng(np.random.SeedSequence((seed, 19)))

    n = n_rollouts
    t_left = np.full(n, t_budget)
    reached = np.zeros(n, dtype=bool)
    failed = np.zeros(n, dtype=bool)
    time_to_goal = np.full(n, np.nan)
    skill_counts = np.zeros(len(SKILLS), dtype=np.int64)
    trajs = [{"skills": [], "poses": []} for _ in range(n)] if traj_path else None

    max_outer = int(np.ceil(t_budget / OUTER_DT))
    for step in range(max_outer):
        yaw = quat_yaw(sim.quat)
        if use_sensing:
            pts, ok = sim.sense_pointcloud()
            out = pipe.step(pts, ok, sim.pos, yaw)
            latent = out["latent"]
            heights.update(out["fine_occ"], sim.pos, yaw)
            h_fn = heights
        else:
            gt = ground_truth_channels(boxes, sim.pos, yaw)
            latent = model.encode_latent(gt, gt)
            h_fn = None
        obs = build_nav_observation(sim, goals, t_left, latent)
        act = policy.act(obs, act_rng, deterministic=not stochastic)
        active = ~(reached | failed)
        for sk in act.skill[active]:
            skill_counts[int(sk)] += 1
        if trajs is not None:
            for i in np.flatnonzero(active):
                trajs[i]["skills"].append(SKILLS[int(act.skill[i])])
                trajs[i]["poses"].append([round(float(v), 4) for v in (
                    sim.pos[i, 0], sim.pos[i, 1], sim.pos[i, 2], yaw[i])])
        offset, dpsi, t_star = decode_command(act.cmd, policy.space)
        cmd = command_targets(offset, dpsi, t_star, sim)
        term = hierarchical_step(sim, catalog, act.skill, cmd, h_fn=h_fn)
        t_left = t_left - OUTER_DT
        failed |= term.any & ~reached
        dist = np.linalg.norm(sim.pos - goals, axis=1)
        hit = (dist < GOAL_RADIUS) & active & ~term.any
        reached |= hit
        time_to_goal[hit] = (step + 1) * OUTER_DT
        if np.all(reached | failed | (t_left <= 0.0)):
            break

    result = {
        "world_kind": kind,
        "level": lvl,
        "n_rollouts": n_rollouts,
        "success_rate": float(np.mean(reached)),
        "mean_time_to_goal": float(np.nanmean(time_to_goal)) if reached.any() else float("nan"),
        "skill_histogram": _skill_histogram(skill_counts),
        "use_sensing": bool(use_sensing),
    }
    if traj_path:
        with open(traj_path, "w") as f:
            for i, t in enumerate(terrains):
                row = {
                    "kind": t.kind, "seed": t.seed, "difficulty": t.difficulty,
                    "goal": [round(float(v), 4) for v in goals[i]],
                    "success": bool(reached[i]),
                    "time_to_goal": None if np.isnan(time_to_goal[i]) else float(time_to_goal[i]),
                    **trajs[i],
                }
                f.write(json.dumps(row) + "\n")
        result["trajectories"] = traj_path
    return result


# ---------------------------------------------------------- manual baseline ----


@dataclass
class ScriptLeg:
    """One scripted command: run a skill toward a fixed world waypoint."""

    skill: int
    target: np.ndarray   # [3] world
    heading: float
    duration: float


def _arc_position(path_xy: np.ndarray, p: np.ndarray) -> float:
    """Arc-length coordinate of the closest point on the polyline to p."""
    best = (np.inf, 0.0)
    acc = 0.0
    for a, b in zip(path_xy[:-1], path_xy[1:]):
        seg = b - a
        L = float(np.linalg.norm(seg))
        if L < 1e-9:
            continue
        u = float(np.clip(np.dot(p - a, seg) / (L * L), 0.0, 1.0))
        d = float(np.linalg.norm(a + u * seg - p))
        if d < best[0]:
            best = (d, acc + u * L)
        acc += L
    return best[1]


def manual_baseline(terrain: Terrain, speed: float = 0.8) -> list[ScriptLeg]:
    """Hard-coded skill+waypoint script from the terrain's obstacle list:
    walk between obstacles along the nominal route, climb onto and off
    boxes, jump gaps, crouch through passages (aiming at the far side), walk
    for anything unrecognized, then walk to the goal."""
    path_xy = terrain.path[:, :2].astype(np.float64)
    points = []  # (arc_s, x, y, z_or_None, skill)
    for i, p in enumerate(terrain.path):
        points.append((_arc_position(path_xy, p[:2].astype(np.float64)),
                       float(p[0]), float(p[1]), float(p[2]), "walk"))
    for o in terrain.obstacles:
        mx, my = (o["x0"] + o["x1"]) / 2.0, (o["y0"] + o["y1"]) / 2.0
        entry = np.array([o["x0"] - 0.5, my])
        exit_ = np.array([o["x1"] + 0.6, my])
        typ = o.get("type")
        if typ == "box":
            mid = np.array([mx, my])
            points.append((_arc_position(path_xy, entry), *entry, None, "walk"))
            points.append((_arc_position(path_xy, mid), mx, my, float(o["top_z"]), "climb_up"))
            points.append((_arc_position(path_xy, exit_), *exit_, None, "climb_down"))
        elif typ == "gap":
            points.append((_arc_position(path_xy, entry), *entry, None, "walk"))
            points.append((_arc_position(path_xy, exit_), *exit_, None, "jump"))
        elif typ == "table":
            entry = np.array([o["x0"] - 0.6, my])
            points.append((_arc_position(path_xy, entry), *entry, None, "walk"))
            points.append((_arc_position(path_xy, exit_), *exit_, None, "crouch"))
        else:
            points.append((_arc_position(path_xy, np.array([mx, my])), mx, my, None, "walk"))
    points.sort(key=lambda r: r[0])
    # drop route vertices that duplicate an obstacle waypoint
    kept = []
    for r in points:
        dup = any(
            r[4] == "walk" and k[4] != "walk"
            and abs(r[0] - k[0]) < 0.4
            and np.hypot(r[1] - k[1], r[2] - k[2]) < 0.6
            for k in points
        )
        if not dup:
            kept.append(r)

    legs: list[ScriptLeg] = []
    cursor = np.array([terrain.spawn.mean(axis=0)[0], terrain.spawn.mean(axis=0)[1],
                       float(terrain.path[0, 2])])

    def add(skill: str, x: float, y: float, z) -> None:
        nonlocal cursor
        if z is None:
            z = float(support_height(terrain, x, y, 10.0)[0])
        dist = float(np.hypot(x - cursor[0], y - cursor[1]))
        if dist < 0.15 and legs:
            return
        heading = float(np.arctan2(y - cursor[1], x - cursor[0]))
        legs.append(ScriptLeg(skill=SKILLS.index(skill),
                              target=np.array([x, y, float(z)]),
                              heading=heading,
                              duration=float(np.clip(dist / speed, T_RANGE[0], T_RANGE[1]))))
        cursor = np.array([x, y, float(z)])

    for _, x, y, z, skill in kept:
        dist = np.hypot(x - cursor[0], y - cursor[1])
        if skill == "walk" and dist > 3.2:
            n_sub = int(np.ceil(dist / 3.2))
            for j in range(1, n_sub):
                u = j / n_sub
                add("walk", cursor[0] + u * (x - cursor[0]),
                    cursor[1] + u * (y - cursor[1]), None)
        add(skill, x, y, z)
    goal = terrain.goal
    add("walk", float(goal[0]), float(goal[1]), float(goal[2]))
    return legs


def evaluate_manual(catalog: SkillCatalog, n_rollouts: int, seed: int = 0,
                    world_kind: str = "world_a", difficulty_range=(0.3, 0.9),
                    t_global: float = 30.0, speed: float = 0.8) -> dict:
    """Run the scripted baseline on freshly generated terrains; same success
    rule and metrics as the learned policy."""
    rng = np.random.default_rng(np.random.SeedSequence((seed, 23)))
    terrains = [
        generate_world(world_kind, seed * 50_021 + k, float(rng.uniform(*difficulty_range)))
        for k in range(n_rollouts)
    ]
    scripts = [manual_baseline(t, speed) for t in terrains]
    goals = np.stack([
        np.concatenate([t.goal[:2], [float(support_height(
            t, t.goal[0], t.goal[1], t.goal[2] + 0.3)[0]) + STAND_HEIGHT]])
        for t in terrains
    ])
    sim = EnvBatch(terrains, seed=seed + 7)
    n = n_rollouts
    leg_idx = np.zeros(n, dtype=np.int64)
    leg_left = np.array([s[0].duration for s in scripts])
    reached = np.zeros(n, dtype=bool)
    failed = np.zeros(n, dtype=bool)
    time_to_goal = np.full(n, np.nan)
    skill_counts = np.zeros(len(SKILLS), dtype=np.int64)

    def current_cmd():
        tgt = np.zeros((n, 3))
        hd = np.zeros(n)
        sk = np.zeros(n, dtype=np.int64)
        for i in range(n):
            leg = scripts[i][min(leg_idx[i], len(scripts[i]) - 1)]
            tgt[i] = leg.target
            hd[i] = leg.heading
            sk[i] = leg.skill
        return sk, Command(target=tgt, heading=hd, t_remaining=leg_left.copy())

    max_outer = int(np.ceil(t_global / OUTER_DT))
    for step in range(max_outer):
        sk, cmd = current_cmd()
        active = ~(reached | failed)
        for s in sk[active]:
            skill_counts[int(s)] += 1
        term = hierarchical_step(sim, catalog, sk, cmd)
        leg_left = np.maximum(leg_left - OUTER_DT, 0.0)
        failed |= term.any & ~reached
        dist = np.linalg.norm(sim.pos - goals, axis=1)
        hit = (dist < GOAL_RADIUS) & active & ~term.any
        reached |= hit
        time_to_goal[hit] = (step + 1) * OUTER_DT
        adv = leg_left <= 0.0
        for i in np.flatnonzero(adv):
            if leg_idx[i] < len(scripts[i]) - 1:
                leg_idx[i] += 1
                leg_left[i] = scripts[i][leg_idx[i]].duration
            else:
                leg_left[i] = T_RANGE[1]  # hold the last leg until the clock ends
        if np.all(reached | failed):
            break
    return {
        "world_kind": world_kind,
        "n_rollouts": n_rollouts,
        "success_rate": float(np.mean(reached)),
        "mean_time_to_goal": float(np.nanmean(time_to_goal)) if reached.any() else float("nan"),
        "skill_histogram": _skill_histogram(skill_counts),
    }


def compare_navigation(checkpoints: dict, skills_dir: str, perception_ckpt: str,
                       out_csv: str, n_rollouts: int = 300, seed: int = 0,
                       difficulty_range=(0.3, 0.9)) -> list[dict]:
    """Learned-vs-scripted success table over full courses. checkpoints maps
    world kind -> trained checkpoint path. Writes one CSV row per
    (world, variant) and returns the rows."""
    catalog = SkillCatalog.load(skills_dir)
    model = _load_perception(perception_ckpt)
    rows = []
    for kind in sorted(checkpoints):
        policy = NavPolicy.load(checkpoints[kind])
        ours = evaluate_navigation(policy, catalog, model, n_rollouts, seed=seed,
                                   world_kind=kind, level=1.0,
                                   difficulty_range=difficulty_range)
        manual = evaluate_manual(catalog, n_rollouts, seed=seed, world_kind=kind,
                                 difficulty_range=difficulty_range)
        for variant, res in (("ours", ours), ("manual", manual)):
            rows.append({
                "terrain": kind, "variant": variant,
                "success_rate": res["success_rate"],
                "mean_time_to_goal": res["mean_time_to_goal"],
                "skill_histogram": res["skill_histogram"],
            })
    os.makedirs(os.path.dirname(out_csv) or ".", exist_ok=True)
    with open(out_csv, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        w.writeheader()
        w.writerows(rows)
    return rows


# ----------------------------------------------------- direct-path analysis ----


def direct_path_likelihood(policy: NavPolicy, catalog: SkillCatalog,
                           model: PerceptionModel, heights, direction: str = "up",
                           n_rollouts: int = 24, seed: int = 0,
                           corridor_halfwidth: float = 1.4,
                           t_global: float = 20.0) -> list[tuple[float, float]]:
    """For each box height, the fraction of stochastic rollouts that reach
    the goal while staying inside the straight corridor over the box (rather
    than detouring around it via the side ramp)."""
    if direction not in ("up", "down"):
        raise ConfigurationError(f"direction must be 'up' or 'down', got {direction!r}")
    kind = f"direct_{direction}"
    curve = []
    for h in heights:
        terrains = [generate_world(kind, seed * 9_203 + k, float(h))
                    for k in range(n_rollouts)]
        goals = np.stack([
            np.concatenate([t.goal[:2], [float(t.goal[2]) + STAND_HEIGHT]])
            for t in terrains
        ])
        sim = EnvBatch(terrains, seed=seed + 3)
        boxes = [t.boxes for t in terrains]
        act_rng = np.random.default_rng(np.random.SeedSequence((seed, 29, int(h * 1000))))
        n = n_rollouts
        t_left = np.full(n, t_global)
        reached = np.zeros(n, dtype=bool)
        failed = np.zeros(n, dtype=bool)
        in_corridor = np.abs(sim.pos[:, 1]) <= corridor_halfwidth
        for step in range(int(np.ceil(t_global / OUTER_DT))):
            yaw = quat_yaw(sim.quat)
            gt = ground_truth_channels(boxes, sim.pos, yaw)
            latent = model.encode_latent(gt, gt)
            obs = build_nav_observation(sim, goals, t_left, latent)
            act = policy.act(obs, act_rng, deterministic=False)
            offset, dpsi, t_star = decode_command(act.cmd, policy.space)
            cmd = command_targets(offset, dpsi, t_star, sim)
            term = hierarchical_step(sim, catalog, act.skill, cmd)
            t_left -= OUTER_DT
            active = ~(reached | failed)
            in_corridor &= (np.abs(sim.pos[:, 1]) <= corridor_halfwidth) | ~active
            failed |= term.any & ~reached
            dist = np.linalg.norm(sim.pos - goals, axis=1)
            reached |= (dist < GOAL_RADIUS) & active & ~term.any
            if np.all(reached | failed):
                break
        curve.append((float(h), float(np.mean(reached & in_corridor))))
    return curve
