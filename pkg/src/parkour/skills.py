"""The five locomotion skill tasks.

Each skill (walk, jump, climb_up, climb_down, crouch) is a PPO policy over
the same 230-entry observation and 8 joint targets, trained on its own arena
family with a difficulty curriculum. Observations are strictly relative,
robot-frame quantities, which is what makes the mirror augmentation a pure
permutation-with-signs job.

Observation layout (index ranges):
    0:3    base linear velocity, body frame
    3:6    base angular velocity, body frame
    6:9    gravity direction, body frame
    9:17   joint positions (hips LF RF LH RH, then leg lengths)
    17:25  joint velocities
    25:28  target offset, heading (yaw) frame
    28     remaining command time (s)
    29     heading error, wrapped
    30:230 height samples on a 20 x 10 grid (0.1 m spacing, x-major),
           relative to base height
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
from .rl import SymmetryTransform, RunningNorm
from .simulator import (
    EnvBatch, StepInfo, DEFAULT_Q, N_JOINTS, VEL_LIMIT, TORQUE_LIMIT,
    quat_rotate_inv, quat_yaw, gravity_direction_body, wrap_angle,
)
from .terrain import Terrain, TerrainBatch, generate_world

SKILLS = ("walk", "jump", "climb_up", "climb_down", "crouch")
OBS_DIM = 230
ACT_DIM = N_JOINTS
ACTION_SCALE = np.array([0.5] * 4 + [0.15] * 4, dtype=np.float64)

H_NX, H_NY = 20, 10
H_SPACING = 0.1

# observation block offsets
_OFF_V, _OFF_W, _OFF_G = 0, 3, 6
_OFF_Q, _OFF_QD = 9, 17
_OFF_REL, _OFF_T, _OFF_DPSI, _OFF_H = 25, 28, 29, 30


def height_grid_points() -> np.ndarray:
    """[200, 2] grid offsets in the heading frame, x-major."""
    xs = (np.arange(H_NX) - (H_NX - 1) / 2.0) * H_SPACING
    ys = (np.arange(H_NY) - (H_NY - 1) / 2.0) * H_SPACING
    gx, gy = np.meshgrid(xs, ys, indexing="ij")
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


_H_POINTS = height_grid_points()


@dataclass
class Command:
    """Per-env local command: world target, target heading, remaining time."""

    target: np.ndarray       # [N, 3]
    heading: np.ndarray      # [N]
    t_remaining: np.ndarray  # [N]


def sample_height_grid(batch: TerrainBatch, pos: np.ndarray, yaw: np.ndarray) -> np.ndarray:
    """Ground-truth surface heights (absolute z) under the 200 grid points."""
    c, s = np.cos(yaw), np.sin(yaw)
    px = pos[:, 0:1] + c[:, None] * _H_POINTS[:, 0] - s[:, None] * _H_POINTS[:, 1]
    py = pos[:, 1:2] + s[:, None] * _H_POINTS[:, 0] + c[:, None] * _H_POINTS[:, 1]
    return batch.elevation_height(px.astype(np.float32), py.astype(np.float32),
                                  np.broadcast_to(pos[:, 2:3], px.shape).astype(np.float32))


def build_observation(sim: EnvBatch, cmd: Command, heights: np.ndarray) -> np.ndarray:
    """Assemble the [N, 230] observation; heights are absolute surface z."""
    quat = sim.quat
    v_b = quat_rotate_inv(quat, sim.vel)
    w_b = quat_rotate_inv(quat, sim.omega)
    g_b = gravity_direction_body(quat)
    yaw = quat_yaw(quat)
    c, s = np.cos(yaw), np.sin(yaw)
    d = cmd.target - sim.pos
    rel = np.stack([c * d[:, 0] + s * d[:, 1],
                    -s * d[:, 0] + c * d[:, 1],
                    d[:, 2]], axis=1)
    dpsi = wrap_angle(cmd.heading - yaw)
    h_rel = heights - sim.pos[:, 2:3]
    obs = np.concatenate([
        v_b, w_b, g_b, sim.q, sim.qd, rel,
        cmd.t_remaining[:, None], dpsi[:, None], h_rel,
    ], axis=1).astype(np.float32)
    if obs.shape[1] != OBS_DIM:
        raise ContractViolation(f"observation has {obs.shape[1]} entries")
    return obs


# ---------------------------------------------------------------- rewards ----


@dataclass
class RewardInputs:
    """Everything the per-step reward reads, all [N, ...] arrays."""

    pos: np.ndarray
    yaw: np.ndarray
    v_base: np.ndarray        # world frame
    target: np.ndarray
    heading_target: np.ndarray
    t_remaining: np.ndarray
    q: np.ndarray
    qd: np.ndarray
    torque: np.ndarray        # applied
    torque_raw: np.ndarray    # before actuator clamping
    base_acc: np.ndarray
    ang_acc: np.ndarray
    feet_acc: np.ndarray      # [N, 4] magnitudes
    foot_forces: np.ndarray   # [N, 4, 3]
    action: np.ndarray
    prev_action: np.ndarray
    knee_contact: np.ndarray  # [N] bool
    terminated: np.ndarray    # [N] bool
    q_default: np.ndarray = field(default_factory=lambda: DEFAULT_Q.copy())


def locomotion_reward(inp: RewardInputs, collision_weight: float = -1.0):
    """Weighted sum of the sixteen locomotion terms; returns (total, terms)."""
    err_xy = np.linalg.norm((inp.target - inp.pos)[:, :2], axis=1)
    herr = np.abs(wrap_angle(inp.heading_target - inp.yaw))
    near_end = (inp.t_remaining < 1.0).astype(np.float64)

    terms = {}
    terms["position"] = 10.0 * near_end * (1.0 - 0.5 * err_xy)
    terms["heading"] = 5.0 * near_end * (1.0 - 0.5 * herr)
    terms["joint_velocity"] = -0.001 * np.sum(inp.qd**2, axis=1)
    terms["torque"] = -1e-5 * np.sum(inp.torque**2, axis=1)
    terms["velocity_limit"] = -1.0 * np.sum(
        np.maximum(np.abs(inp.qd) - VEL_LIMIT, 0.0), axis=1)
    terms["torque_limit"] = -0.2 * np.sum(
        np.maximum(np.abs(inp.torque_raw) - TORQUE_LIMIT, 0.0), axis=1)
    terms["base_acc"] = -0.001 * (
        np.sum(inp.base_acc**2, axis=1) + 0.02 * np.sum(inp.ang_acc**2, axis=1))
    terms["feet_acc"] = -0.002 * np.sum(inp.feet_acc, axis=1)
    terms["action_rate"] = -0.01 * np.sum((inp.action - inp.prev_action) ** 2, axis=1)
    fmag = np.linalg.norm(inp.foot_forces, axis=2)
    terms["contact_force"] = -1e-5 * np.sum(np.maximum(fmag - 700.0, 0.0) ** 2, axis=1)

    speed_xy = np.linalg.norm(inp.v_base[:, :2], axis=1)
    terms["dont_wait"] = -1.0 * (speed_xy < 0.2).astype(np.float64)

    to_target = inp.target - inp.pos
    dist = np.linalg.norm(to_target, axis=1)
    speed = np.linalg.norm(inp.v_base, axis=1)
    ok = (speed >= 0.05) & (dist > 1e-6)
    cosang = np.zeros(len(dist))
    cosang[ok] = np.sum(inp.v_base[ok] * to_target[ok], axis=1) / (speed[ok] * dist[ok])
    terms["move_direction"] = cosang

    reached = (err_xy < 0.25) & (herr < 0.5)
    terms["stand_at_target"] = -0.5 * reached * np.linalg.norm(inp.q - inp.q_default, axis=1)
    terms["collision"] = collision_weight * inp.knee_contact.astype(np.float64)
    f_xy = np.linalg.norm(inp.foot_forces[:, :, :2], axis=2)
    f_z = np.abs(inp.foot_forces[:, :, 2])
    terms["stumble"] = -1.0 * np.any(f_xy > 2.0 * f_z, axis=1).astype(np.float64)
    terms["termination"] = -200.0 * inp.terminated.astype(np.float64)

    total = np.zeros(len(err_xy))
    for v in terms.values():
        total += v
    return total, terms


def success_locomotion(pos: np.ndarray, yaw: np.ndarray, cmd: Command) -> np.ndarray:
    """Target reached: position error < 0.25 m and heading error < 0.5 rad."""
    err_xy = np.linalg.norm((cmd.target - pos)[:, :2], axis=1)
    herr = np.abs(wrap_angle(cmd.heading - yaw))
    return (err_xy < 0.25) & (herr < 0.5)


def update_curriculum(level: float, metric: float,
                      advance: float = 0.8, retreat: float = 0.4,
                      step: float = 0.05) -> float:
    if metric >= advance:
        level += step
    elif metric < retreat:
        level -= step
    return float(np.clip(level, 0.0, 1.0))


# --------------------------------------------------------------- symmetry ----


def _h_perm(flip_x: bool, flip_y: bool) -> np.ndarray:
    ix = np.arange(H_NX)[:, None]
    iy = np.arange(H_NY)[None, :]
    sx = (H_NX - 1 - ix) if flip_x else ix
    sy = (H_NY - 1 - iy) if flip_y else iy
    return (sx * H_NY + sy).ravel()


def symmetry_maps() -> list[SymmetryTransform]:
    """identity, mirror_lr, mirror_fb, mirror_both for the fixed layout."""
    ident = rl.identity_transform(OBS_DIM, ACT_DIM)

    def build(label, v_sign, w_sign, leg_perm, hip_sign, vec_sign, flip_x, flip_y):
        perm = np.arange(OBS_DIM)
        sign = np.ones(OBS_DIM, dtype=np.float32)
        sign[_OFF_V:_OFF_V + 3] = v_sign
        sign[_OFF_W:_OFF_W + 3] = w_sign
        sign[_OFF_G:_OFF_G + 3] = v_sign  # gravity maps like a plain vector
        joint_perm = np.concatenate([leg_perm, np.asarray(leg_perm) + 4])
        joint_sign = np.concatenate([np.full(4, hip_sign), np.ones(4)])
        for off in (_OFF_Q, _OFF_QD):
            perm[off:off + 8] = off + joint_perm
            sign[off:off + 8] = joint_sign
        sign[_OFF_REL:_OFF_REL + 3] = vec_sign
        sign[_OFF_DPSI] = -1.0
        perm[_OFF_H:] = _OFF_H + _h_perm(flip_x, flip_y)
        act_perm = joint_perm.copy()
        act_sign = joint_sign.astype(np.float32)
        return SymmetryTransform(label, perm, sign, act_perm, act_sign)

    lr = build("mirror_lr",
               v_sign=(1, -1, 1), w_sign=(-1, 1, -1),
               leg_perm=[1, 0, 3, 2], hip_sign=1.0, vec_sign=(1, -1, 1),
               flip_x=False, flip_y=True)
    fb = build("mirror_fb",
               v_sign=(-1, 1, 1), w_sign=(1, -1, -1),
               leg_perm=[2, 3, 0, 1], hip_sign=-1.0, vec_sign=(-1, 1, 1),
               flip_x=True, flip_y=False)
    both = rl.compose(lr, fb, "mirror_both")
    return [ident, lr, fb, both]


# ------------------------------------------------------- per-skill rules ----


@dataclass
class SkillRules:
    base_contact_terminates: bool = True
    impact_termination: bool = True
    impact_threshold: float = 1500.0
    collision_weight: float = -1.0


def skill_rules(skill: str, impact_termination=None) -> SkillRules:
    if skill not in SKILLS:
        raise ConfigurationError(f"unknown skill {skill!r}")
    rules = SkillRules()
    if skill == "climb_up":
        # sliding the base over the box edge is part of the skill
        rules.base_contact_terminates = False
        rules.collision_weight = -0.1
    if impact_termination is not None:
        rules.impact_termination = bool(impact_termination)
    return rules


def terminations(info: StepInfo, rules: SkillRules) -> np.ndarray:
    term = np.zeros(len(info.base_contact), dtype=bool)
    if rules.base_contact_terminates:
        term |= info.base_contact
    if rules.impact_termination:
        term |= info.foot_impact > rules.impact_threshold
    return term


# ------------------------------------------------------- command sampling ----


def sample_commands(skill: str, terrains: list[Terrain], pos: np.ndarray,
                    rng: np.random.Generator, t_range=(4.0, 8.0),
                    yaw: np.ndarray = None) -> Command:
    """Per-episode command draw. Obstacle skills aim at the arena goal (with
    jitter) and a heading along the travel direction. Walk picks a target in
    the frontal cone with the heading roughly aligned to travel; a quarter of
    the draws go behind the robot with a reversed heading, so backing up is
    part of the skill. Without yaw the direction is unconstrained."""
    n = len(terrains)
    target = np.zeros((n, 3))
    heading = np.zeros(n)
    t_star = np.zeros(n)
    from .terrain import support_height

    for i, t in enumerate(terrains):
        if skill == "walk" or t.kind == "flat":
            dist = rng.uniform(1.0, 3.0)
            if yaw is None:
                ang = rng.uniform(-np.pi, np.pi)
                h_extra = rng.uniform(-np.pi, np.pi)
                flip = 0.0
            else:
                flip = np.pi if rng.uniform() < 0.25 else 0.0
                ang = yaw[i] + flip + rng.uniform(-0.8, 0.8)
                h_extra = None
            xy = pos[i, :2] + dist * np.array([np.cos(ang), np.sin(ang)])
            xy = np.clip(xy, -7.0, 7.0)
            travel = np.arctan2(xy[1] - pos[i, 1], xy[0] - pos[i, 0])
            if h_extra is None:
                heading[i] = wrap_angle(travel + flip + rng.uniform(-0.5, 0.5))
            else:
                heading[i] = h_extra
            d_eff = np.linalg.norm(xy - pos[i, :2])
            t_star[i] = np.clip(d_eff / 0.55 + rng.uniform(1.0, 3.0),
                                t_range[0], t_range[1])
        else:
            xy = t.goal[:2] + rng.uniform(-0.3, 0.3, size=2)
            travel = np.arctan2(xy[1] - pos[i, 1], xy[0] - pos[i, 0])
            heading[i] = wrap_angle(travel + rng.uniform(-0.3, 0.3))
            t_star[i] = rng.uniform(t_range[0], t_range[1])
        z = support_height(t, xy[0], xy[1], 10.0)[0]
        target[i] = [xy[0], xy[1], z]
    return Command(target=target, heading=heading, t_remaining=t_star)


# ------------------------------------------------------------ checkpoints ----


@dataclass
class SkillMeta:
    skill: str
    hidden: list
    curriculum_level: float = 0.0
    obs_dim: int = OBS_DIM
    act_dim: int = ACT_DIM


def save_skill_checkpoint(path: str, policy: rl.GaussianPolicy, value: rl.ValueNet,
                          norm: RunningNorm, meta: SkillMeta) -> None:
    tensors = {}
    tensors.update({k: v.data for k, v in policy.params().items()})
    tensors.update({k: v.data for k, v in value.params().items()})
    tensors.update(norm.state_dict())
    save_checkpoint(path, tensors)
    with open(path + ".json", "w") as f:
        json.dump(asdict(meta), f, indent=1)


class SkillPolicy:
    """A frozen trained skill: policy net + obs normalizer + metadata."""

    def __init__(self, policy: rl.GaussianPolicy, norm: RunningNorm, meta: SkillMeta):
        self.policy = policy
        self.norm = norm
        self.meta = meta

    @classmethod
    def load(cls, path: str) -> "SkillPolicy":
        try:
            with open(path + ".json") as f:
                meta = SkillMeta(**json.load(f))
        except FileNotFoundError:
            raise ConfigurationError(f"missing checkpoint sidecar {path}.json")
        tensors = load_checkpoint(path)
        policy = rl.GaussianPolicy(meta.obs_dim, meta.act_dim,
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

    def act(self, obs: np.ndarray, rng=None, deterministic: bool = True) -> np.ndarray:
        dist = self.policy.dist(self.norm(obs))
        return dist.deterministic() if deterministic else dist.sample(rng)

    def param_hash(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for k in sorted(self.policy.params()):
            h.update(self.policy.params()[k].data.tobytes())
        h.update(self.norm.mean.tobytes())
        h.update(self.norm.var.tobytes())
        return h.hexdigest()


class SkillCatalog:
    """The ordered, frozen set of all five skills used by navigation."""

    def __init__(self, policies: dict):
        missing = [s for s in SKILLS if s not in policies]
        if missing:
            raise ConfigurationError(f"catalog missing skills: {missing}")
        self.policies = [policies[s] for s in SKILLS]

    @classmethod
    def load(cls, ckpt_dir: str) -> "SkillCatalog":
        return cls({
            s: SkillPolicy.load(os.path.join(ckpt_dir, f"skill_{s}.pkrl"))
            for s in SKILLS
        })

    def act(self, skill_idx: np.ndarray, obs: np.ndarray) -> np.ndarray:
        out = np.zeros((len(obs), ACT_DIM), dtype=np.float32)
        for s in np.unique(skill_idx):
            m = skill_idx == s
            out[m] = self.policies[int(s)].act(obs[m])
        return out

    def param_hash(self) -> str:
        return "".join(p.param_hash() for p in self.policies)


def decode_action(action: np.ndarray) -> np.ndarray:
    """Policy output -> PD joint targets around the default pose."""
    return DEFAULT_Q + ACTION_SCALE * action


class ReferenceGait:
    """Hand-built crawl-trot controller used to seed policy training.

    Reads the same relative quantities the policy observes. Diagonal leg
    pairs alternate: a linear hip sweep while grounded, a trapezoid lift on
    the way back. Forward speed comes from the sweep amplitude, steering from
    a left/right amplitude split, and driving in reverse is just a negative
    amplitude. The stride phase freezes once the command is satisfied, so
    standing at the target is exact.
    """

    FREQ = 1.75
    DUTY = 0.55
    LIFT = 0.26
    EXT = 0.07         # stance extension carrying the body at nominal height
    OFFSET = np.array([0.0, 0.5, 0.5, 0.0])   # LF+RH lead, RF+LH trail
    SIDE = np.array([1.0, -1.0, 1.0, -1.0])

    def __init__(self, n_envs: int, control_dt: float = 0.02):
        self.dt = control_dt
        self.u = np.full(n_envs, 0.5 * self.DUTY)

    def reset(self, ids) -> None:
        # mid-sweep start: every joint target begins at its standing value
        self.u[ids] = 0.5 * self.DUTY

    def _cycle(self, amp: np.ndarray, turn: np.ndarray) -> np.ndarray:
        """[N] amplitudes -> [N, 8] PD targets for the current phase."""
        amp_leg = amp[:, None] + turn[:, None] * self.SIDE[None]
        u = (self.u[:, None] + self.OFFSET[None]) % 1.0
        stance = u < self.DUTY
        s = u / self.DUTY
        w = (u - self.DUTY) / (1.0 - self.DUTY)
        theta = np.where(stance, amp_leg * (1 - 2 * s), amp_leg * (2 * w - 1))
        # load take-up ramp while grounded, trapezoid lift while swinging,
        # touchdown at nominal length so the foot never rams the floor
        take_up = self.EXT * np.clip(s / 0.25, 0.0, 1.0)
        bell = np.clip(np.minimum(w / 0.15, (0.85 - w) / 0.2), 0.0, 1.0)
        drop = self.EXT * np.clip(w / 0.1, 0.0, 1.0)
        delta = np.where(stance, take_up, self.EXT - drop - self.LIFT * bell)
        legs = DEFAULT_Q[None, 4:] + delta
        return np.concatenate([theta, legs], axis=1)

    def q_targets(self, rel: np.ndarray, dpsi: np.ndarray,
                  t_remaining: np.ndarray) -> np.ndarray:
        """rel [N,3] body-frame target offset, dpsi [N] heading error."""
        dist = np.linalg.norm(rel[:, :2], axis=1)
        bear = np.arctan2(rel[:, 1], rel[:, 0])
        reverse = np.abs(bear) > np.pi / 2
        steer_err = np.where(reverse, wrap_angle(bear + np.pi), bear)
        # arrive pre-aligned: blend from travel steering to heading alignment
        blend = np.clip(dist / 1.0, 0.0, 1.0)
        steer = blend * steer_err + (1 - blend) * dpsi
        turn = np.clip(0.9 * steer, -0.22, 0.22)

        v_des = np.clip(dist / np.maximum(t_remaining - 0.8, 0.8), 0.35, 0.95)
        amp = np.clip((v_des + 0.1) / 2.0, 0.15, 0.52)
        amp = np.where(np.abs(steer) > 1.1, 0.15, amp)
        amp = np.where(dist < 0.3, 0.12, amp)
        amp = np.where(reverse, -amp, amp)

        parked = (dist < 0.22) & (np.abs(dpsi) < 0.4)
        q = self._cycle(amp, turn)
        q[parked] = DEFAULT_Q
        self.u = np.where(parked, self.u, (self.u + self.FREQ * self.dt) % 1.0)
        return q

    def action(self, obs: np.ndarray) -> np.ndarray:
        """Normalized action for the observation layout above."""
        rel = obs[:, _OFF_REL:_OFF_REL + 3].astype(np.float64)
        t_rem = obs[:, _OFF_T].astype(np.float64)
        dpsi = obs[:, _OFF_DPSI].astype(np.float64)
        q = self.q_targets(rel, dpsi, t_rem)
        return ((q - DEFAULT_Q) / ACTION_SCALE).astype(np.float32)


# ---------------------------------------------------------------- training ----


@dataclass
class SkillTrainConfig:
    terrain_kind: str = ""        # default: arena_<skill>
    n_envs: int = 256
    horizon: int = 24
    total_env_steps: int = 2_000_000
    seed: int = 0
    hidden: tuple = (256, 128, 64)
    init_log_std: float = -1.2   # start exploration inside actuator limits
    n_workers: int = 1
    use_symmetry: bool = True
    curriculum_start: float = 0.0
    curriculum_every: int = 10    # updates between curriculum checks
    t_range: tuple = (4.0, 8.0)
    grace: float = 2.0
    h_noise: float = 0.02
    h_shift: float = 0.075
    impact_termination: object = None   # None -> per-skill default
    ppo: rl.PPOConfig = field(default_factory=rl.PPOConfig)
    out_dir: str = "runs/skill"
    csv_name: str = "train_stats.csv"


class SkillTask:
    """Owns the arena batch and per-episode command state for one skill."""

    def __init__(self, skill: str, cfg: SkillTrainConfig, level: float, seed_base: int):
        self.skill = skill
        self.cfg = cfg
        self.level = level
        self.kind = cfg.terrain_kind or f"arena_{skill}"
        self.rules = skill_rules(skill, cfg.impact_termination)
        self.rng = np.random.default_rng(np.random.SeedSequence((seed_base, 97)))
        self.terrains = [
            generate_world(self.kind, seed_base + i, level) for i in range(cfg.n_envs)
        ]
        self.sim = EnvBatch(self.terrains, seed=seed_base, n_workers=cfg.n_workers)
        n = cfg.n_envs
        self.cmd = Command(np.zeros((n, 3)), np.zeros(n), np.zeros(n))
        self.grace_left = np.zeros(n)
        self.h_offset = np.zeros(n)
        self.prev_action = np.zeros((n, ACT_DIM), dtype=np.float32)
        self.crossed = np.zeros(n, dtype=bool)
        self.success_now = np.zeros(n, dtype=bool)
        self._reset_episodes(np.arange(n))

    def _reset_episodes(self, ids: np.ndarray):
        if len(ids) == 0:
            return
        self.sim.reset(ids)
        if self.kind not in ("flat",) and self.skill != "walk":
            # arena episodes start roughly facing the obstacle
            goals = np.stack([self.terrains[i].goal for i in ids])
            d = goals[:, :2] - self.sim.pos[ids, :2]
            face = np.arctan2(d[:, 1], d[:, 0])
            face = face + self.rng.uniform(-0.4, 0.4, len(ids))
            self.sim.reset(ids, base_pos=self.sim.pos[ids].copy(), base_yaw=face)
        cmd = sample_commands(
            self.skill, [self.terrains[i] for i in ids], self.sim.pos[ids],
            self.rng, self.cfg.t_range, yaw=quat_yaw(self.sim.quat)[ids])
        self.cmd.target[ids] = cmd.target
        self.cmd.heading[ids] = cmd.heading
        self.cmd.t_remaining[ids] = cmd.t_remaining
        self.grace_left[ids] = self.cfg.grace
        self.h_offset[ids] = self.rng.uniform(-self.cfg.h_shift, self.cfg.h_shift, len(ids))
        self.prev_action[ids] = 0.0
        self.crossed[ids] = False
        self.success_now[ids] = False

    def observe(self) -> np.ndarray:
        h = sample_height_grid(self.sim.batch, self.sim.pos, quat_yaw(self.sim.quat))
        h = h + self.h_offset[:, None]
        if self.cfg.h_noise > 0:
            h = h + self.rng.normal(0.0, self.cfg.h_noise, h.shape)
        return build_observation(self.sim, self.cmd, h)

    def step(self, action: np.ndarray):
        """Advance one control period; returns (reward, done, successes_ended)."""
        sim = self.sim
        info = sim.step(decode_action(action))
        dt = sim.control_dt
        self.cmd.t_remaining = np.maximum(self.cmd.t_remaining - dt, 0.0)
        at_zero = self.cmd.t_remaining <= 0.0
        self.grace_left[at_zero] -= dt

        term = terminations(info, self.rules)
        yaw = quat_yaw(sim.quat)
        rew, _ = locomotion_reward(RewardInputs(
            pos=sim.pos, yaw=yaw, v_base=sim.vel,
            target=self.cmd.target, heading_target=self.cmd.heading,
            t_remaining=self.cmd.t_remaining,
            q=sim.q, qd=sim.qd, torque=info.torque, torque_raw=info.torque_raw,
            base_acc=info.base_acc, ang_acc=info.ang_acc, feet_acc=info.feet_acc,
            foot_forces=info.foot_forces, action=action,
            prev_action=self.prev_action,
            knee_contact=info.knee_contact.any(axis=1), terminated=term,
        ), collision_weight=self.rules.collision_weight)
        self.prev_action = action.copy()

        newly = at_zero & ~self.crossed
        self.success_now[newly] = success_locomotion(sim.pos, yaw, self.cmd)[newly]
        self.crossed |= at_zero

        timeout = at_zero & (self.grace_left <= 0.0)
        done = term | timeout
        results = [
            (bool(self.success_now[i]) and not term[i]) for i in np.where(done)[0]
        ]
        self._reset_episodes(np.where(done)[0])
        return rew, done.astype(np.float64), results


def train_skill(skill: str, cfg: SkillTrainConfig):
    """PPO training loop; returns a summary dict with the checkpoint path."""
    if skill not in SKILLS:
        raise ConfigurationError(f"unknown skill {skill!r}")
    os.makedirs(cfg.out_dir, exist_ok=True)
    ckpt_path = os.path.join(cfg.out_dir, f"skill_{skill}.pkrl")
    policy = rl.GaussianPolicy(OBS_DIM, ACT_DIM, hidden=cfg.hidden, seed=cfg.seed,
                               init_log_std=cfg.init_log_std)
    value = rl.ValueNet(OBS_DIM, hidden=cfg.hidden, seed=cfg.seed + 1)
    ppo = rl.PPO(policy, value, cfg.ppo, seed=cfg.seed + 2)
    norm = RunningNorm(OBS_DIM)
    transforms = symmetry_maps() if cfg.use_symmetry else \
        [rl.identity_transform(OBS_DIM, ACT_DIM)]

    level = cfg.curriculum_start
    task = SkillTask(skill, cfg, level, seed_base=cfg.seed * 100_003)
    act_rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 11)))
    recent = collections.deque(maxlen=200)
    n_updates = max(cfg.total_env_steps // (cfg.n_envs * cfg.horizon), 1)
    best = (-1.0, 0)
    csv_path = os.path.join(cfg.out_dir, cfg.csv_name)
    csv_f = open(csv_path, "w", newline="")
    writer = csv.writer(csv_f)
    writer.writerow(["update", "surrogate", "value_loss", "entropy", "kl",
                     "mean_reward", "curriculum_level"])

    obs_raw = task.observe()
    for update in range(n_updates):
        buf = rl.RolloutBuffer(cfg.horizon, cfg.n_envs, OBS_DIM, ACT_DIM)
        for _ in range(cfg.horizon):
            norm.update(obs_raw)
            obs = norm(obs_raw)
            dist = policy.dist(obs)
            action = dist.sample(act_rng)
            logp = dist.logprob(action)
            rew, done, results = task.step(action)
            recent.extend(results)
            buf.add(obs, action, logp, rew, value.value(obs), done)
            obs_raw = task.observe()
        last_v = value.value(norm(obs_raw))
        batch = buf.finish(last_v, cfg.ppo.gamma, cfg.ppo.lam)
        batch = rl.symmetry_augment(batch, transforms)
        stats = ppo.update(batch)
        if not np.isfinite(stats.value_loss):
            raise ContractViolation(f"training diverged (seed {cfg.seed})")
        mean_rew = float(buf.rew.mean()) if buf.rew.size else 0.0
        success_rate = float(np.mean(recent)) if recent else 0.0
        writer.writerow([update, f"{stats.surrogate:.6f}", f"{stats.value_loss:.6f}",
                         f"{stats.entropy:.6f}", f"{stats.kl:.6f}",
                         f"{mean_rew:.6f}", f"{level:.2f}"])
        if (update + 1) % cfg.curriculum_every == 0 and len(recent) >= 20:
            new_level = update_curriculum(level, success_rate)
            if success_rate > best[0]:
                best = (success_rate, update)
                save_skill_checkpoint(ckpt_path, policy, value, norm,
                                      SkillMeta(skill, list(cfg.hidden), level))
            if new_level != level:
                level = new_level
                task = SkillTask(skill, cfg, level, seed_base=cfg.seed * 100_003 + update + 1)
                obs_raw = task.observe()
                recent.clear()
    csv_f.close()
    # final save wins if it is at least as good as the best intermediate
    success_rate = float(np.mean(recent)) if recent else 0.0
    if success_rate >= best[0]:
        save_skill_checkpoint(ckpt_path, policy, value, norm,
                              SkillMeta(skill, list(cfg.hidden), level))
    return {
        "checkpoint": ckpt_path, "csv": csv_path, "final_level": level,
        "success_rate": success_rate, "updates": n_updates,
    }


# -------------------------------------------------------------- evaluation ----


def evaluate_skill(policy: SkillPolicy, skill: str, difficulties, n_rollouts: int,
                   seed: int = 0, t_range=(4.0, 8.0), terrain_kind: str = "",
                   impact_stats: bool = False, impact_termination=None):
    """Deterministic success sweep; returns list of (difficulty, success rate).

    With impact_stats=True also returns the pooled per-step peak foot forces
    (for impact-distribution comparisons)."""
    difficulties = list(difficulties)
    if n_rollouts == 0 or not difficulties:
        return ([], np.zeros(0)) if impact_stats else []
    kind = terrain_kind or f"arena_{skill}"
    rules = skill_rules(skill, impact_termination)
    terrains, owners = [], []
    for di, d in enumerate(difficulties):
        for k in range(n_rollouts):
            terrains.append(generate_world(kind, seed * 77_001 + di * 1000 + k, d))
            owners.append(di)
    owners = np.asarray(owners)
    sim = EnvBatch(terrains, seed=seed + 1)
    rng = np.random.default_rng(np.random.SeedSequence((seed, 5)))
    cmd = sample_commands(skill, terrains, sim.pos, rng, t_range)
    batch = sim.batch
    n = len(terrains)
    alive = np.ones(n, dtype=bool)
    success = np.zeros(n, dtype=bool)
    crossed = np.zeros(n, dtype=bool)
    impacts = []
    max_steps = int(np.ceil(t_range[1] / sim.control_dt)) + 1
    for _ in range(max_steps):
        h = sample_height_grid(batch, sim.pos, quat_yaw(sim.quat))
        obs = build_observation(sim, cmd, h)
        action = policy.act(obs)
        info = sim.step(decode_action(action))
        if impact_stats:
            impacts.append(info.foot_impact.copy())
        cmd.t_remaining = np.maximum(cmd.t_remaining - sim.control_dt, 0.0)
        term = terminations(info, rules)
        alive &= ~term
        at_zero = cmd.t_remaining <= 0.0
        hit = at_zero & ~crossed & alive  # judged once, the moment time runs out
        crossed |= at_zero
        if np.any(hit):
            yaw = quat_yaw(sim.quat)
            success[hit] = success_locomotion(sim.pos, yaw, cmd)[hit]
        if np.all(crossed | ~alive):
            break
    curve = [
        (float(d), float(success[owners == di].mean()))
        for di, d in enumerate(difficulties)
    ]
    if impact_stats:
        return curve, np.concatenate(impacts) if impacts else np.zeros(0)
    return curve
