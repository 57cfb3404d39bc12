"""Vectorized physics for a simplified quadruped on box terrain.

The robot is a single rigid box body with four massless telescoping legs.
Each leg has a hip pitch joint and a prismatic length joint driven by PD
control; joints carry small virtual inertias so contact reactions and motor
torques produce finite accelerations. Contact happens at 16 points (4 feet,
4 knee proxies, 8 base corners) against the terrain's boxes with a
spring-damper normal model and anchor-based Coulomb friction.

All state is stored struct-of-arrays so an environment batch can be stepped
as one vectorized program. Every operation is elementwise per environment,
which makes trajectories bitwise independent of how the batch is sharded
across workers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .terrain import Terrain, TerrainBatch

GRAVITY = -9.81
BASE_MASS = 55.0
BASE_INERTIA = np.array([1.558, 3.346, 4.079], dtype=np.float64)  # box 0.8x0.5x0.3
BASE_HALF = np.array([0.4, 0.25, 0.15], dtype=np.float64)

# legs ordered LF, RF, LH, RH; hip attach points on the base mid-plane
HIP_ATTACH = np.array(
    [[0.4, 0.25, 0.0], [0.4, -0.25, 0.0], [-0.4, 0.25, 0.0], [-0.4, -0.25, 0.0]],
    dtype=np.float64,
)
N_LEGS = 4
N_JOINTS = 8          # q[0:4] hip pitch, q[4:8] leg length
KNEE_FRAC = 0.6       # knee contact proxy sits at 60% of the leg length
LEG_RADIUS = 0.08     # capsule radius for self-occlusion

HIP_LIMIT = np.deg2rad(160.0)
LEG_MIN, LEG_MAX = 0.15, 0.65
DEFAULT_Q = np.array([0.0] * 4 + [0.5] * 4, dtype=np.float64)

KP = np.array([200.0] * 4 + [4000.0] * 4, dtype=np.float64)
KD = np.array([10.0] * 4 + [100.0] * 4, dtype=np.float64)
TORQUE_LIMIT = np.array([85.0] * 4 + [500.0] * 4, dtype=np.float64)
VEL_LIMIT = np.array([12.0] * 4 + [4.0] * 4, dtype=np.float64)
JOINT_INERTIA = np.array([0.4] * 4 + [4.0] * 4, dtype=np.float64)

CONTACT_K = 2.0e4
CONTACT_C = 500.0
FRICTION_K = 2.0e4
FRICTION_C = 200.0

N_POINTS = 16  # 0..3 feet, 4..7 knees, 8..15 base corners

_CORNER_SIGNS = np.array(
    [[sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)],
    dtype=np.float64,
)
BASE_CORNERS = _CORNER_SIGNS * BASE_HALF


# ------------------------------------------------------------ quaternions ----


def quat_identity(n: int) -> np.ndarray:
    q = np.zeros((n, 4))
    q[:, 0] = 1.0
    return q


def quat_from_yaw(yaw: np.ndarray) -> np.ndarray:
    yaw = np.asarray(yaw, dtype=np.float64)
    q = np.zeros(yaw.shape + (4,))
    q[..., 0] = np.cos(yaw / 2)
    q[..., 3] = np.sin(yaw / 2)
    return q


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    w1, x1, y1, z1 = a[..., 0], a[..., 1], a[..., 2], a[..., 3]
    w2, x2, y2, z2 = b[..., 0], b[..., 1], b[..., 2], b[..., 3]
    return np.stack(
        [
            w1 * w2 - x1 * x2 - y1 * y2 - z1 * z2,
            w1 * x2 + x1 * w2 + y1 * z2 - z1 * y2,
            w1 * y2 - x1 * z2 + y1 * w2 + z1 * x2,
            w1 * z2 + x1 * y2 - y1 * x2 + z1 * w2,
        ],
        axis=-1,
    )


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """[..., 4] -> [..., 3, 3] body-to-world rotation."""
    w, x, y, z = q[..., 0], q[..., 1], q[..., 2], q[..., 3]
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1 - 2 * (y * y + z * z)
    m[..., 0, 1] = 2 * (x * y - w * z)
    m[..., 0, 2] = 2 * (x * z + w * y)
    m[..., 1, 0] = 2 * (x * y + w * z)
    m[..., 1, 1] = 1 - 2 * (x * x + z * z)
    m[..., 1, 2] = 2 * (y * z - w * x)
    m[..., 2, 0] = 2 * (x * z - w * y)
    m[..., 2, 1] = 2 * (y * z + w * x)
    m[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return m


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate v by q. Shapes broadcast over leading axes; v [..., 3]."""
    w = q[..., 0:1]
    u = q[..., 1:4]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def quat_rotate_inv(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    qc = q.copy()
    qc[..., 1:4] = -qc[..., 1:4]
    return quat_rotate(qc, v)


def quat_yaw(q: np.ndarray) -> np.ndarray:
    """Heading: yaw of the body x axis projected to the ground plane."""
    fwd = quat_rotate(q, np.array([1.0, 0.0, 0.0]))
    return np.arctan2(fwd[..., 1], fwd[..., 0])


def quat_integrate(q: np.ndarray, omega_world: np.ndarray, dt: float) -> np.ndarray:
    """Exponential-map update with world-frame angular velocity."""
    ang = np.linalg.norm(omega_world, axis=-1, keepdims=True)
    half = 0.5 * dt * ang
    small = ang < 1e-12
    axis = omega_world / np.where(small, 1.0, ang)
    dq = np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)
    dq = np.where(small, np.array([1.0, 0.0, 0.0, 0.0]), dq)
    out = quat_mul(dq, q)
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


def gravity_direction_body(q: np.ndarray) -> np.ndarray:
    """Unit gravity vector expressed in the base frame."""
    return quat_rotate_inv(q, np.array([0.0, 0.0, -1.0]))


def tilt_angle(q: np.ndarray) -> np.ndarray:
    """Angle between the base +z axis and gravity; pi when upright, 0 when
    fully inverted."""
    up = quat_rotate(q, np.array([0.0, 0.0, 1.0]))
    d = np.clip(-up[..., 2], -1.0, 1.0)  # dot with (0,0,-1)
    return np.arccos(d)


def wrap_angle(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


# ------------------------------------------------------------- kinematics ----


def leg_points_body(q: np.ndarray):
    """Foot and knee positions in the base frame plus joint jacobians.

    q [B,8] -> dict of [B,4,3] arrays: foot, knee, dfoot_dtheta, dfoot_dlen.
    """
    th = q[:, 0:4]
    ln = q[:, 4:8]
    sin, cos = np.sin(th), np.cos(th)
    # leg unit direction in body frame: straight down at theta = 0,
    # swinging in the sagittal (x-z) plane
    dir_x = -sin
    dir_z = -cos
    zeros = np.zeros_like(sin)
    leg_dir = np.stack([dir_x, zeros, dir_z], axis=2)
    ddir_dth = np.stack([-cos, zeros, sin], axis=2)
    foot = HIP_ATTACH[None] + ln[:, :, None] * leg_dir
    knee = HIP_ATTACH[None] + (KNEE_FRAC * ln)[:, :, None] * leg_dir
    return {
        "foot": foot,
        "knee": knee,
        "leg_dir": leg_dir,
        "dfoot_dtheta": ln[:, :, None] * ddir_dth,
        "dknee_dtheta": (KNEE_FRAC * ln)[:, :, None] * ddir_dth,
        "dfoot_dlen": leg_dir,
        "dknee_dlen": KNEE_FRAC * leg_dir,
    }


# ---------------------------------------------------------------- contact ----


def _point_box_forces(points, vel, boxes, anchors, anchor_on, mu):
    """Spring-damper + anchored friction for a batch of contact points.

    points, vel [B,P,3]; boxes [B,n,6]; anchors [B,P,3] updated in place;
    mu [B]. Returns forces [B,P,3] and contact mask [B,P].
    """
    lo = boxes[:, None, :, 0:3]
    hi = boxes[:, None, :, 3:6]
    valid = (boxes[:, :, 3:6] > boxes[:, :, 0:3]).all(axis=2)[:, None, :]
    p = points[:, :, None, :]
    inside = (p > lo).all(axis=3) & (p < hi).all(axis=3) & valid
    # distance to each face; exit depth is the smallest
    d_lo = p - lo
    d_hi = hi - p
    d6 = np.concatenate([d_lo, d_hi], axis=3)
    d6 = np.where(inside[..., None], d6, np.inf)
    depth_per_box = d6.min(axis=3)
    face = d6.argmin(axis=3)
    box_pick = depth_per_box.argmin(axis=2)
    B, P = points.shape[:2]
    bi = np.arange(B)[:, None]
    pi = np.arange(P)[None, :]
    depth = depth_per_box[bi, pi, box_pick]
    contact = np.isfinite(depth)
    depth = np.where(contact, depth, 0.0)
    f = face[bi, pi, box_pick]
    axis = f % 3
    sign = np.where(f < 3, -1.0, 1.0)  # closest to a lo face -> outward is -axis
    normal = np.zeros((B, P, 3))
    np.put_along_axis(normal, axis[..., None], sign[..., None], axis=2)

    v_n = (vel * normal).sum(axis=2)
    fn_mag = CONTACT_K * depth + CONTACT_C * np.maximum(-v_n, 0.0)
    fn_mag = np.where(contact, np.maximum(fn_mag, 0.0), 0.0)

    # friction: spring to the anchor in the tangent plane, clamped to the cone
    new_contact = contact & ~anchor_on
    anchors[new_contact] = points[new_contact]
    t_off = points - anchors
    t_off = t_off - normal * (t_off * normal).sum(axis=2, keepdims=True)
    v_t = vel - normal * (vel * normal).sum(axis=2, keepdims=True)
    ft = -FRICTION_K * t_off - FRICTION_C * v_t
    ft_mag = np.linalg.norm(ft, axis=2)
    limit = mu[:, None] * fn_mag
    scale = np.where(ft_mag > limit, limit / np.maximum(ft_mag, 1e-12), 1.0)
    ft = ft * scale[..., None]
    # drag the anchor while sliding so the spring stays at the cone edge
    slid = contact & (ft_mag > limit)
    drag = points + ft / FRICTION_K
    anchors[slid] = drag[slid]
    anchors[~contact] = points[~contact]
    anchor_on[:] = contact

    force = normal * fn_mag[..., None] + np.where(contact[..., None], ft, 0.0)
    return force, contact


# ------------------------------------------------------------------ state ----


@dataclass
class StepInfo:
    """Per-control-step quantities the reward and termination logic reads."""

    torque_raw: np.ndarray       # [B,8] PD output before clamping
    torque: np.ndarray           # [B,8] applied
    base_acc: np.ndarray         # [B,3] linear, finite difference
    ang_acc: np.ndarray          # [B,3]
    feet_acc: np.ndarray         # [B,4] magnitude of foot acceleration
    contact_forces: np.ndarray   # [B,16,3] world, averaged over substeps
    foot_contact: np.ndarray     # [B,4] bool
    knee_contact: np.ndarray     # [B,4] bool
    base_contact: np.ndarray     # [B] bool
    foot_impact: np.ndarray      # [B] peak foot force norm over substeps
    foot_forces: np.ndarray      # [B,4,3] world, averaged


NAV_IMPACT_THRESHOLD = 2500.0


@dataclass
class NavTermination:
    """Episode-ending events for goal-directed runs."""

    flipped: np.ndarray  # [B] bool: base z-axis within 90 degrees of gravity
    impact: np.ndarray   # [B] bool: peak foot force above the hard limit

    @property
    def any(self) -> np.ndarray:
        return self.flipped | self.impact


def check_termination_navigation(quat: np.ndarray, info: StepInfo) -> NavTermination:
    """Goal-directed termination check: flipped when the base is inverted
    enough that its z-axis points within 90 degrees of gravity, impact when
    any foot force peak exceeds 2500 N. Both flags can fire on one step."""
    return NavTermination(
        flipped=tilt_angle(quat) < np.pi / 2,
        impact=info.foot_impact > NAV_IMPACT_THRESHOLD,
    )


class EnvBatch:
    """A batch of independent environments stepped in lockstep.

    Workers shard the batch; because the math is elementwise per
    environment, results are identical for any worker count.
    """

    def __init__(self, terrains: list[Terrain], seed: int = 0,
                 control_dt: float = 0.02, substeps: int = 4, n_workers: int = 1):
        if control_dt <= 0 or substeps < 1:
            raise ConfigurationError("bad control_dt/substeps")
        self.terrains = terrains
        self.batch = TerrainBatch(terrains)
        self.B = len(terrains)
        self.control_dt = control_dt
        self.substeps = substeps
        self.dt = control_dt / substeps
        self.n_workers = max(int(n_workers), 1)
        self.rng = np.random.default_rng(np.random.SeedSequence(seed))

        B = self.B
        self.pos = np.zeros((B, 3))
        self.quat = quat_identity(B)
        self.vel = np.zeros((B, 3))
        self.omega = np.zeros((B, 3))
        self.q = np.tile(DEFAULT_Q, (B, 1))
        self.qd = np.zeros((B, N_JOINTS))
        self.anchors = np.zeros((B, N_POINTS, 3))
        self.anchor_on = np.zeros((B, N_POINTS), dtype=bool)
        self.mu = self.batch.friction.astype(np.float64).copy()
        self._prev_foot_vel = np.zeros((B, 4, 3))
        self._rays_body, self._ray_origins_body = _sensor_rays()
        self.reset()

    # -------------------------------------------------------------- reset ----

    def reset(self, env_ids=None, base_pos=None, base_yaw=None, q=None):
        ids = np.arange(self.B) if env_ids is None else np.asarray(env_ids)
        if len(ids) == 0:
            return
        if base_pos is None:
            from .terrain import support_height

            lo = np.stack([self.terrains[i].spawn[0] for i in ids])
            hi = np.stack([self.terrains[i].spawn[1] for i in ids])
            xy = self.rng.uniform(lo, hi)
            gz = np.asarray([
                support_height(self.terrains[i], xy[k, 0], xy[k, 1], 10.0)[0]
                for k, i in enumerate(ids)
            ])
            base_pos = np.concatenate([xy, (gz + 0.5)[:, None]], axis=1)
        if base_yaw is None:
            base_yaw = self.rng.uniform(-np.pi, np.pi, size=len(ids))
        if q is None:
            q = np.tile(DEFAULT_Q, (len(ids), 1))
        self.pos[ids] = base_pos
        self.quat[ids] = quat_from_yaw(np.asarray(base_yaw))
        self.vel[ids] = 0.0
        self.omega[ids] = 0.0
        self.q[ids] = q
        self.qd[ids] = 0.0
        self.anchor_on[ids] = False
        self._prev_foot_vel[ids] = 0.0

    def set_friction(self, mu: np.ndarray):
        self.mu[:] = mu

    # --------------------------------------------------------------- step ----

    def step(self, q_target: np.ndarray) -> StepInfo:
        """Advance one control period with PD targets q_target [B,8]."""
        if q_target.shape != (self.B, N_JOINTS):
            raise ConfigurationError(f"q_target shape {q_target.shape}")
        chunks = self._chunks()
        infos = self._run_chunks(lambda sl: self._step_chunk(sl, q_target[sl]), chunks)
        return StepInfo(**{
            k: np.concatenate([getattr(i, k) for i in infos], axis=0)
            for k in StepInfo.__dataclass_fields__
        })

    def _chunks(self):
        n = min(self.n_workers, self.B)
        size = -(-self.B // n)
        return [slice(s, min(s + size, self.B)) for s in range(0, self.B, size)]

    def _run_chunks(self, fn, chunks):
        """Apply fn to every chunk, threaded when workers were requested.
        Chunks touch disjoint state slices and results are gathered in chunk
        order, so the worker count never changes the outcome."""
        if len(chunks) == 1:
            return [fn(chunks[0])]
        from concurrent.futures import ThreadPoolExecutor

        if not hasattr(self, "_pool") or self._pool is None:
            self._pool = ThreadPoolExecutor(max_workers=self.n_workers)
        return list(self._pool.map(fn, chunks))

    def _step_chunk(self, sl: slice, q_target: np.ndarray) -> StepInfo:
        dt = self.dt
        boxes = self.batch.boxes[sl].astype(np.float64)
        mu = self.mu[sl]
        pos, quat = self.pos[sl], self.quat[sl]
        vel, omega = self.vel[sl], self.omega[sl]
        q, qd = self.q[sl], self.qd[sl]
        anchors, anchor_on = self.anchors[sl], self.anchor_on[sl]
        Bc = pos.shape[0]

        v0 = vel.copy()
        w0 = omega.copy()
        force_accum = np.zeros((Bc, N_POINTS, 3))
        contact_any = np.zeros((Bc, N_POINTS), dtype=bool)
        foot_peak = np.zeros(Bc)
        tq_raw_first = None
        tq_applied_first = None

        for _ in range(self.substeps):
            R = quat_to_matrix(quat)
            kin = leg_points_body(q)
            foot_w = pos[:, None] + np.einsum("bij,bpj->bpi", R, kin["foot"])
            knee_w = pos[:, None] + np.einsum("bij,bpj->bpi", R, kin["knee"])
            corners_w = pos[:, None] + np.einsum("bij,pj->bpi", R, BASE_CORNERS)
            points = np.concatenate([foot_w, knee_w, corners_w], axis=1)

            # world-frame point velocities including joint motion
            arm = points - pos[:, None]
            v_rot = vel[:, None] + np.cross(omega[:, None], arm)
            jf = (kin["dfoot_dtheta"] * qd[:, 0:4, None]
                  + kin["dfoot_dlen"] * qd[:, 4:8, None])
            jk = (kin["dknee_dtheta"] * qd[:, 0:4, None]
                  + kin["dknee_dlen"] * qd[:, 4:8, None])
            v_joint = np.concatenate(
                [np.einsum("bij,bpj->bpi", R, jf),
                 np.einsum("bij,bpj->bpi", R, jk),
                 np.zeros((Bc, 8, 3))], axis=1)
            v_pts = v_rot + v_joint

            forces, contact = _point_box_forces(points, v_pts, boxes, anchors, anchor_on, mu)
            force_accum += forces
            contact_any |= contact
            foot_peak = np.maximum(
                foot_peak, np.linalg.norm(forces[:, 0:4], axis=2).max(axis=1))

            # PD joint drive
            tq_raw = KP[None] * (q_target - q) - KD[None] * qd
            tq = np.clip(tq_raw, -TORQUE_LIMIT[None], TORQUE_LIMIT[None])
            if tq_raw_first is None:
                tq_raw_first = tq_raw.copy()
                tq_applied_first = tq.copy()

            # generalized contact reactions on the leg joints
            f_foot = forces[:, 0:4]
            f_knee = forces[:, 4:8]
            jac_th = (np.einsum("bij,bpj->bpi", R, kin["dfoot_dtheta"]) * f_foot).sum(2) \
                + (np.einsum("bij,bpj->bpi", R, kin["dknee_dtheta"]) * f_knee).sum(2)
            jac_ln = (np.einsum("bij,bpj->bpi", R, kin["dfoot_dlen"]) * f_foot).sum(2) \
                + (np.einsum("bij,bpj->bpi", R, kin["dknee_dlen"]) * f_knee).sum(2)
            tau_contact = np.concatenate([jac_th, jac_ln], axis=1)

            # base dynamics: leg forces act at the hip attach points, corner
            # forces at the corners themselves
            hip_w_arm = np.einsum("bij,pj->bpi", R, HIP_ATTACH)
            leg_force = f_foot + f_knee
            torque_pts = np.cross(hip_w_arm, leg_force).sum(axis=1) \
                + np.cross(arm[:, 8:16], forces[:, 8:16]).sum(axis=1)
            total_force = forces.sum(axis=1)

            I_w = np.einsum("bij,j,bkj->bik", R, BASE_INERTIA, R)
            gyro = np.cross(omega, np.einsum("bij,bj->bi", I_w, omega))
            ang_rhs = torque_pts - gyro
            w_dot = np.linalg.solve(I_w, ang_rhs[..., None])[..., 0]

            vel = vel + dt * (total_force / BASE_MASS + np.array([0.0, 0.0, GRAVITY]))
            omega = omega + dt * w_dot
            qdd = (tq + tau_contact) / JOINT_INERTIA[None]
            qd = qd + dt * qdd
            q = q + dt * qd
            # hard joint limits
            low = np.concatenate([np.full(4, -HIP_LIMIT), np.full(4, LEG_MIN)])
            high = np.concatenate([np.full(4, HIP_LIMIT), np.full(4, LEG_MAX)])
            hit_lo = q < low[None]
            hit_hi = q > high[None]
            q = np.clip(q, low[None], high[None])
            qd = np.where(hit_lo & (qd < 0), 0.0, qd)
            qd = np.where(hit_hi & (qd > 0), 0.0, qd)

            pos = pos + dt * vel
            quat = quat_integrate(quat, omega, dt)

        # foot velocities for the acceleration penalty (control-rate diff)
        R = quat_to_matrix(quat)
        kin = leg_points_body(q)
        foot_w = pos[:, None] + np.einsum("bij,bpj->bpi", R, kin["foot"])
        arm = foot_w - pos[:, None]
        jf = (kin["dfoot_dtheta"] * qd[:, 0:4, None]
              + kin["dfoot_dlen"] * qd[:, 4:8, None])
        foot_vel = vel[:, None] + np.cross(omega[:, None], arm) \
            + np.einsum("bij,bpj->bpi", R, jf)
        feet_acc = np.linalg.norm(
            (foot_vel - self._prev_foot_vel[sl]) / self.control_dt, axis=2)
        self._prev_foot_vel[sl] = foot_vel

        self.pos[sl], self.quat[sl] = pos, quat
        self.vel[sl], self.omega[sl] = vel, omega
        self.q[sl], self.qd[sl] = q, qd

        mean_forces = force_accum / self.substeps
        return StepInfo(
            torque_raw=tq_raw_first,
            torque=tq_applied_first,
            base_acc=(vel - v0) / self.control_dt,
            ang_acc=(omega - w0) / self.control_dt,
            feet_acc=feet_acc,
            contact_forces=mean_forces,
            foot_contact=contact_any[:, 0:4],
            knee_contact=contact_any[:, 4:8],
            base_contact=contact_any[:, 8:16].any(axis=1),
            foot_impact=foot_peak,
            foot_forces=mean_forces[:, 0:4],
        )

    # ------------------------------------------------------------- helpers ----

    def foot_positions(self) -> np.ndarray:
        R = quat_to_matrix(self.quat)
        kin = leg_points_body(self.q)
        return self.pos[:, None] + np.einsum("bij,bpj->bpi", R, kin["foot"])

    def base_heading(self) -> np.ndarray:
        return quat_yaw(self.quat)

    def apply_push(self, env_ids, delta_v: np.ndarray):
        self.vel[env_ids] += delta_v

    # ------------------------------------------------------------- sensing ----

    def sense_pointcloud(self, max_range: float = 8.0):
        """Cast all sensor rays and return hit points in each robot's yaw
        frame (origin at the base, z world-aligned). Rays blocked by a leg
        produce no return. Returns (points [B,R,3], valid [B,R])."""
        chunks = self._chunks()
        outs = self._run_chunks(lambda sl: self._sense_chunk(sl, max_range), chunks)
        pts = np.concatenate([o[0] for o in outs], axis=0)
        ok = np.concatenate([o[1] for o in outs], axis=0)
        return pts, ok

    def _sense_chunk(self, sl: slice, max_range: float):
        from .terrain import raycast_boxes

        pos, quat = self.pos[sl], self.quat[sl]
        Bc = pos.shape[0]
        R = quat_to_matrix(quat)
        dirs = np.einsum("bij,rj->bri", R, self._rays_body)
        origins = pos[:, None] + np.einsum("bij,rj->bri", R, self._ray_origins_body)
        dist = raycast_boxes(self.batch.boxes[sl].astype(np.float64), origins, dirs, max_range)

        # self-occlusion: legs as capsules from hip to foot
        kin = leg_points_body(self.q[sl])
        hip_w = pos[:, None] + np.einsum("bij,pj->bpi", R, HIP_ATTACH)
        foot_w = pos[:, None] + np.einsum("bij,bpj->bpi", R, kin["foot"])
        t_leg = _ray_capsule(origins, dirs, hip_w, foot_w, LEG_RADIUS)
        blocked = t_leg < dist
        hit = np.isfinite(dist) & ~blocked
        dist = np.where(hit, dist, 0.0)
        world = origins + dist[..., None] * dirs
        rel = world - pos[:, None]
        yaw = quat_yaw(quat)
        c, s = np.cos(yaw)[:, None], np.sin(yaw)[:, None]
        out = np.empty_like(rel)
        out[..., 0] = c * rel[..., 0] + s * rel[..., 1]
        out[..., 1] = -s * rel[..., 0] + c * rel[..., 1]
        out[..., 2] = rel[..., 2]
        return out.astype(np.float32), hit


def _ray_capsule(origins, dirs, p0s, p1s, radius):
    """Smallest hit distance of rays against any of a set of capsules.

    origins/dirs [B,R,3]; p0s/p1s [B,L,3]. Returns [B,R] (inf if none).
    Uses the infinite-cylinder quadratic plus sphere caps.
    """
    o = origins[:, :, None, :]
    d = dirs[:, :, None, :]
    a0 = p0s[:, None, :, :]
    a1 = p1s[:, None, :, :]
    u = a1 - a0
    uu = (u * u).sum(-1)
    uu = np.maximum(uu, 1e-12)
    w = o - a0
    du = (d * u).sum(-1)
    wu = (w * u).sum(-1)
    dd = (d * d).sum(-1)
    dw = (d * w).sum(-1)
    ww = (w * w).sum(-1)
    A = dd - du * du / uu
    Bq = dw - du * wu / uu
    Cq = ww - wu * wu / uu - radius * radius
    disc = Bq * Bq - A * Cq
    ok = (disc >= 0) & (A > 1e-12)
    sq = np.sqrt(np.maximum(disc, 0.0))
    t_cyl = np.where(ok, (-Bq - sq) / np.where(A > 1e-12, A, 1.0), np.inf)
    s_hit = wu + t_cyl * du  # axial coordinate (times |u|^2) at the hit
    on_seg = (s_hit >= 0) & (s_hit <= uu) & (t_cyl >= 0)
    t_cyl = np.where(ok & on_seg, t_cyl, np.inf)
    t_best = t_cyl
    for cap in (a0, a1):
        oc = o - cap
        b = (d * oc).sum(-1)
        c = (oc * oc).sum(-1) - radius * radius
        disc = b * b - c
        okc = disc >= 0
        t = np.where(okc, -b - np.sqrt(np.maximum(disc, 0.0)), np.inf)
        t = np.where(t >= 0, t, np.inf)
        t_best = np.minimum(t_best, t)
    return t_best.min(axis=2)


def _sensor_rays():
    """Body-frame ray directions and per-ray origins for six depth cameras
    and a dome lidar. 6*24*18 + 16*64 = 3616 rays."""
    dirs = []
    orgs = []
    for k in range(6):
        yaw = k * np.pi / 3
        pitch = np.deg2rad(30.0)  # tilted down
        az = np.deg2rad(np.linspace(-30, 30, 24))
        el = np.deg2rad(np.linspace(-22.5, 22.5, 18))
        azg, elg = np.meshgrid(az, el, indexing="ij")
        # camera frame: x forward, then pitch down, then yaw around body z
        x = np.cos(elg) * np.cos(azg)
        y = np.cos(elg) * np.sin(azg)
        z = np.sin(elg)
        # pitch the camera axis down, then yaw it around the body z axis
        cp, sp = np.cos(-pitch), np.sin(-pitch)
        xr = cp * x + sp * z
        zr = -sp * x + cp * z
        cy, sy = np.cos(yaw), np.sin(yaw)
        dx = cy * xr - sy * y
        dy = sy * xr + cy * y
        d = np.stack([dx, dy, zr], axis=2).reshape(-1, 3)
        dirs.append(d)
        org = np.array([0.3 * np.cos(yaw), 0.3 * np.sin(yaw), 0.05])
        orgs.append(np.tile(org, (len(d), 1)))
    el = np.deg2rad(np.linspace(-45, 15, 16))
    az = np.linspace(-np.pi, np.pi, 64, endpoint=False)
    azg, elg = np.meshgrid(az, el, indexing="ij")
    d = np.stack(
        [np.cos(elg) * np.cos(azg), np.cos(elg) * np.sin(azg), np.sin(elg)], axis=2
    ).reshape(-1, 3)
    dirs.append(d)
    orgs.append(np.tile(np.array([0.0, 0.0, 0.25]), (len(d), 1)))
    dirs = np.concatenate(dirs)
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs, np.concatenate(orgs)
