"""Volumetric scene estimation from body-frame range returns.

Sensed point clouds are voxelized into occupancy plus in-cell centroid
features on two nested grids around the robot. A coarse encoder-decoder
network with an auto-regressive feedback input accumulates evidence over
time and exposes a compact scene latent; a fine network refines the
central volume using the coarse decoder's feature block. A 2.5D height
field for the locomotion policies is read off the thresholded occupancy.

Grids live in the robot's yaw-aligned frame (origin at the base, z
world-aligned), matching the simulator's range sensor. Channel layout is
always [occupancy, centroid_x, centroid_y, centroid_z] with centroids
normalized to the unit cube of their cell.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import (
    AdamState,
    Network,
    Tape,
    Tensor,
    activation,
    adam_step,
    backward,
    clip_grads,
    conv,
    deconv,
    dense,
)
from .checkpoint import (
    load_checkpoint,
    read_tensor_record,
    save_checkpoint,
    write_tensor_record,
)
from .errors import ConfigurationError, ContractViolation
from .simulator import EnvBatch, quat_from_yaw, quat_yaw
from .terrain import COARSE_GRID, FINE_GRID, GridSpec, generate_world, occupancy_ground_truth_batch

N_CHANNELS = 4  # occupancy + 3 centroid offsets
_BOTTLENECK = 64 * 4 * 4 * 2

# The fine volume (2 m x 2 m x 1 m) sits in the center of the coarse one
# (4 m x 4 m x 2 m): coarse cells 8..24 in x and y, 4..12 in z.
FINE_IN_COARSE = (slice(8, 24), slice(8, 24), slice(4, 12))


# ------------------------------------------------------------------ grids ----


@dataclass
class Pose:
    """World position of the robot base and its heading."""

    position: np.ndarray  # [3] float
    yaw: float

    def copy(self) -> "Pose":
        return Pose(np.array(self.position, dtype=np.float64), float(self.yaw))


@dataclass
class VoxelGrid:
    occupancy: np.ndarray  # [X, Y, Z] float32
    centroid: np.ndarray   # [3, X, Y, Z] float32, unit-cube offsets
    spec: GridSpec
    pose: Pose

    @property
    def dims(self):
        return self.spec.dims

    @property
    def voxel_size(self) -> float:
        return self.spec.voxel_size

    def channels(self) -> np.ndarray:
        """Stacked [4, X, Y, Z] feature block."""
        return np.concatenate([self.occupancy[None], self.centroid], axis=0)

    @classmethod
    def from_channels(cls, ch: np.ndarray, spec: GridSpec, pose: Pose) -> "VoxelGrid":
        return cls(np.ascontiguousarray(ch[0]), np.ascontiguousarray(ch[1:4]), spec, pose)


def voxelize_batch(points: np.ndarray, valid, spec: GridSpec):
    """Voxelize a batch of body-frame clouds.

    points: [B, P, 3]; valid: [B, P] bool or None (NaN rows are dropped
    either way). Returns (occ [B,X,Y,Z], cent [B,3,X,Y,Z]) float32 where
    occupancy is 1 for any cell holding at least one point and centroid is
    the mean point position normalized to the cell's unit cube.
    """
    pts = np.asarray(points, dtype=np.float32)
    if pts.ndim != 3 or pts.shape[-1] != 3:
        raise ConfigurationError(f"expected points [B,P,3], got {pts.shape}")
    B, P = pts.shape[:2]
    X, Y, Z = spec.dims
    vs = spec.voxel_size
    rel = (pts - np.asarray(spec.offset, dtype=np.float32)) / np.float32(vs)
    ok = np.isfinite(pts).all(axis=-1)
    if valid is not None:
        ok &= np.asarray(valid, dtype=bool)
    idx = np.floor(np.where(ok[..., None], rel, -1.0)).astype(np.int64)
    ok &= (
        (idx[..., 0] >= 0) & (idx[..., 0] < X)
        & (idx[..., 1] >= 0) & (idx[..., 1] < Y)
        & (idx[..., 2] >= 0) & (idx[..., 2] < Z)
    )
    n_cells = X * Y * Z
    lin = (
        np.arange(B, dtype=np.int64)[:, None] * n_cells
        + idx[..., 0] * (Y * Z) + idx[..., 1] * Z + idx[..., 2]
    )[ok]
    frac = (rel - idx)[ok].astype(np.float64)
    cnt = np.bincount(lin, minlength=B * n_cells)
    sums = np.empty((3, B * n_cells), dtype=np.float64)
    for a in range(3):
        sums[a] = np.bincount(lin, weights=frac[:, a], minlength=B * n_cells)
    occ = cnt > 0
    safe = np.where(occ, cnt, 1)
    cent = (sums / safe) * occ
    occ4 = occ.reshape(B, X, Y, Z).astype(np.float32)
    cent4 = cent.reshape(3, B, X, Y, Z).transpose(1, 0, 2, 3, 4).astype(np.float32)
    return occ4, np.ascontiguousarray(cent4)


def voxelize(points: np.ndarray, spec: GridSpec, pose: Pose) -> VoxelGrid:
    """Single-cloud wrapper around voxelize_batch; out-of-volume points are
    dropped, empty cells stay all-zero."""
    pts = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    occ, cent = voxelize_batch(pts[None], None, spec)
    return VoxelGrid(occ[0], cent[0], spec, pose.copy())


def _cell_centers_local(spec: GridSpec) -> np.ndarray:
    """[X*Y*Z, 3] centers of every cell in the grid's own yaw frame."""
    X, Y, Z = spec.dims
    ii, jj, kk = np.meshgrid(np.arange(X), np.arange(Y), np.arange(Z), indexing="ij")
    idx = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3).astype(np.float64)
    return np.asarray(spec.offset, dtype=np.float64) + (idx + 0.5) * spec.voxel_size


def _resample_map(old_pose: Pose, new_pose: Pose, spec: GridSpec):
    """Nearest-voxel lookup of each new cell's center in the old grid.

    Returns (flat_idx [X*Y*Z] into the old grid, valid [X*Y*Z] bool);
    invalid entries point at cell 0 and must be zeroed by the caller.
    """
    X, Y, Z = spec.dims
    local = _cell_centers_local(spec)
    cn, sn = np.cos(new_pose.yaw), np.sin(new_pose.yaw)
    wx = new_pose.position[0] + cn * local[:, 0] - sn * local[:, 1]
    wy = new_pose.position[1] + sn * local[:, 0] + cn * local[:, 1]
    wz = new_pose.position[2] + local[:, 2]
    co, so = np.cos(old_pose.yaw), np.sin(old_pose.yaw)
    dx = wx - old_pose.position[0]
    dy = wy - old_pose.position[1]
    lx = co * dx + so * dy
    ly = -so * dx + co * dy
    lz = wz - old_pose.position[2]
    off = spec.offset
    oi = np.floor((lx - off[0]) / spec.voxel_size).astype(np.int64)
    oj = np.floor((ly - off[1]) / spec.voxel_size).astype(np.int64)
    ok = np.floor((lz - off[2]) / spec.voxel_size).astype(np.int64)
    valid = (oi >= 0) & (oi < X) & (oj >= 0) & (oj < Y) & (ok >= 0) & (ok < Z)
    flat = np.where(valid, oi * (Y * Z) + oj * Z + ok, 0)
    return flat, valid


def transform_feedback(prev: VoxelGrid, new_pose: Pose) -> VoxelGrid:
    """Re-express a grid in a new robot frame by nearest-voxel resampling.
    Cells whose center falls outside the old volume become zeros; identical
    poses return the grid unchanged."""
    spec = prev.spec
    flat, valid = _resample_map(prev.pose, new_pose, spec)
    ch = prev.channels().reshape(N_CHANNELS, -1)
    out = ch[:, flat] * valid[None]
    X, Y, Z = spec.dims
    out = out.reshape(N_CHANNELS, X, Y, Z).astype(np.float32)
    return VoxelGrid.from_channels(out, spec, new_pose.copy())


def transform_feedback_batch(
    channels: np.ndarray,
    old_pos: np.ndarray,
    old_yaw: np.ndarray,
    new_pos: np.ndarray,
    new_yaw: np.ndarray,
    spec: GridSpec,
) -> np.ndarray:
    """Batch form over stacked [B, C, X, Y, Z] feature blocks."""
    B, C = channels.shape[:2]
    flat_ch = channels.reshape(B, C, -1)
    out = np.empty_like(flat_ch)
    for b in range(B):
        flat, valid = _resample_map(
            Pose(np.asarray(old_pos[b], dtype=np.float64), float(old_yaw[b])),
            Pose(np.asarray(new_pos[b], dtype=np.float64), float(new_yaw[b])),
            spec,
        )
        out[b] = flat_ch[b][:, flat] * valid[None]
    return out.reshape(channels.shape)


# ------------------------------------------------------------------ model ----


class PerceptionModel:
    """Coarse + fine reconstruction networks.

    The coarse net consumes 8 channels (4 measured + 4 fed back from its
    previous output), squeezes through a dense latent, and decodes back to
    full resolution without skip connections. The fine net consumes its own
    4 measured channels plus the coarse decoder's feature block cropped to
    the fine footprint and upsampled.
    """

    def __init__(self, seed: int = 0, latent_dim: int = 256, feature_channels: int = 16):
        self.latent_dim = int(latent_dim)
        self.feature_channels = int(feature_channels)
        fc = self.feature_channels
        relu = activation("relu")
        self.coarse_enc = Network(
            [conv(2 * N_CHANNELS, 16, stride=2), relu,
             conv(16, 32, stride=2), relu,
             conv(32, 64, stride=2), relu],
            seed, "coarse_enc",
        )
        self.to_latent = Network(
            [dense(_BOTTLENECK, self.latent_dim), activation("tanh")], seed + 1, "to_latent"
        )
        self.from_latent = Network(
            [dense(self.latent_dim, _BOTTLENECK), relu], seed + 2, "from_latent"
        )
        self.coarse_dec = Network(
            [deconv(64, 32), relu, deconv(32, 16), relu, deconv(16, fc), relu],
            seed + 3, "coarse_dec",
        )
        self.coarse_head = Network([conv(fc, N_CHANNELS, stride=1)], seed + 4, "coarse_head")
        self.fine_enc = Network(
            [conv(N_CHANNELS + fc, 16, stride=2), relu, conv(16, 32, stride=2), relu],
            seed + 5, "fine_enc",
        )
        self.fine_dec = Network(
            [deconv(32, 16), relu, deconv(16, 16), relu], seed + 6, "fine_dec"
        )
        self.fine_head = Network([conv(16, N_CHANNELS, stride=1)], seed + 7, "fine_head")
        self._nets = [
            self.coarse_enc, self.to_latent, self.from_latent, self.coarse_dec,
            self.coarse_head, self.fine_enc, self.fine_dec, self.fine_head,
        ]

    def params(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        for net in self._nets:
            out.update(net.params)
        return out

    @staticmethod
    def _tensor(x) -> Tensor:
        return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))

    def _encode(self, meas, feedback) -> Tensor:
        meas, feedback = self._tensor(meas), self._tensor(feedback)
        X, Y, Z = COARSE_GRID.dims
        want = (meas.data.shape[0], N_CHANNELS, X, Y, Z)
        if meas.data.shape != want or feedback.data.shape != want:
            raise ConfigurationError(
                f"coarse inputs must be {want}, got {meas.data.shape} / {feedback.data.shape}"
            )
        x = ad.concat([meas, feedback], axis=1)
        h = self.coarse_enc(x)
        return self.to_latent(ad.reshape(h, (h.data.shape[0], _BOTTLENECK)))

    def encode_latent(self, meas, feedback) -> np.ndarray:
        """Latent scene summary [B, latent_dim] without running the decoder
        half; the cheap path for consumers that only need the bottleneck."""
        return self._encode(meas, feedback).data

    def coarse_forward(self, meas, feedback):
        """(occ_logits [B,1,X,Y,Z], centroids [B,3,X,Y,Z], latent [B,L],
        decoder_features [B,fc,X,Y,Z]); meas and feedback are 4-channel
        blocks on the coarse grid."""
        latent = self._encode(meas, feedback)
        B = latent.data.shape[0]
        g = ad.reshape(self.from_latent(latent), (B, 64, 4, 4, 2))
        feats = self.coarse_dec(g)
        out = self.coarse_head(feats)
        occ_logits = ad.crop(out, (slice(None), slice(0, 1)))
        centroids = ad.sigmoid(ad.crop(out, (slice(None), slice(1, N_CHANNELS))))
        return occ_logits, centroids, latent, feats

    def fine_forward(self, meas_fine, coarse_features):
        """(occ_logits [B,1,X,Y,Z], centroids [B,3,X,Y,Z]) on the fine grid;
        coarse_features is the coarse decoder block, cropped to the fine
        footprint and upsampled here."""
        meas_fine = self._tensor(meas_fine)
        feats = self._tensor(coarse_features)
        X, Y, Z = FINE_GRID.dims
        if meas_fine.data.shape[1:] != (N_CHANNELS, X, Y, Z):
            raise ConfigurationError(f"fine measurement has shape {meas_fine.data.shape}")
        fx, fy, fz = FINE_IN_COARSE
        up = ad.upsample2(ad.crop(feats, (slice(None), slice(None), fx, fy, fz)))
        x = ad.concat([meas_fine, up], axis=1)
        out = self.fine_head(self.fine_dec(self.fine_enc(x)))
        occ_logits = ad.crop(out, (slice(None), slice(0, 1)))
        centroids = ad.sigmoid(ad.crop(out, (slice(None), slice(1, N_CHANNELS))))
        return occ_logits, centroids

    # ------------------------------------------------------------ storage

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {}
        for net in self._nets:
            out.update(net.state_dict())
        return out

    def load_state_dict(self, state) -> None:
        for net in self._nets:
            net.load_state_dict(state)

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name in sorted(self.state_dict()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.state_dict()[name]).tobytes())
        return h.hexdigest()

    def save(self, path: str) -> None:
        save_checkpoint(path, dict(sorted(self.state_dict().items())))
        meta = {
            "latent_dim": self.latent_dim,
            "feature_channels": self.feature_channels,
            "param_hash": self.param_hash(),
        }
        with open(path + ".json", "w") as f:
            json.dump(meta, f, indent=1)

    @classmethod
    def load(cls, path: str) -> "PerceptionModel":
        with open(path + ".json") as f:
            meta = json.load(f)
        model = cls(latent_dim=meta["latent_dim"], feature_channels=meta["feature_channels"])
        model.load_state_dict(load_checkpoint(path))
        return model


def reconstruction_terms(occ_logits, centroids, gt_occ: np.ndarray, gt_cent: np.ndarray):
    """(bce, cent): mean binary cross-entropy over every cell and mean
    Euclidean centroid distance over ground-truth-occupied cells only."""
    gt_occ = np.asarray(gt_occ, dtype=np.float32)
    gt_cent = np.asarray(gt_cent, dtype=np.float32)
    if gt_occ.ndim == occ_logits.data.ndim - 1:
        gt_occ = gt_occ[:, None]
    bce = ad.mean(ad.bce_with_logits(occ_logits, gt_occ))
    diff = centroids - Tensor(gt_cent)
    sq = ad.sum_(ad.square(diff), axis=1)  # [B, X, Y, Z]
    dist = ad.sqrt(sq + np.float32(1e-12))
    mask = (gt_occ.reshape(sq.data.shape) > 0.5).astype(np.float32)
    n_occ = max(float(mask.sum()), 1.0)
    cent = ad.sum_(dist * Tensor(mask)) * np.float32(1.0 / n_occ)
    return bce, cent


def reconstruction_loss(occ_logits, centroids, gt_occ: np.ndarray, gt_cent: np.ndarray):
    bce, cent = reconstruction_terms(occ_logits, centroids, gt_occ, gt_cent)
    return bce + cent


# ----------------------------------------------------------- augmentation ----


def augment_pointcloud(
    points: np.ndarray,
    pose: Pose,
    seed,
    jitter: float = 0.02,
    blob_prob: float = 0.3,
    patch_prob: float = 0.3,
    pos_noise: float = 0.05,
    yaw_noise: float = float(np.deg2rad(2.0)),
):
    """Corrupt a sensed cloud and the pose belief for training.

    Per-point jitter, occasional spurious blobs, occasional deleted disk
    patches, then a pose-belief error: the returned points are re-expressed
    in the (wrong) believed heading while ground-truth labels stay tied to
    the true pose, so the network learns to tolerate drift.
    """
    rng = np.random.default_rng(seed)
    pts = np.asarray(points, dtype=np.float32).reshape(-1, 3).copy()
    pts += rng.normal(0.0, jitter, size=pts.shape).astype(np.float32)
    lo = np.asarray(COARSE_GRID.offset)
    hi = lo + np.asarray(COARSE_GRID.dims) * COARSE_GRID.voxel_size
    if rng.uniform() < blob_prob:
        blobs = []
        for _ in range(int(rng.integers(1, 4))):
            center = rng.uniform(lo, hi)
            radius = rng.uniform(0.05, 0.2)
            n = int(rng.integers(10, 51))
            d = rng.normal(size=(n, 3))
            d /= np.maximum(np.linalg.norm(d, axis=1, keepdims=True), 1e-9)
            r = radius * np.cbrt(rng.uniform(size=(n, 1)))
            blobs.append((center + d * r).astype(np.float32))
        pts = np.concatenate([pts] + blobs, axis=0)
    if rng.uniform() < patch_prob:
        for _ in range(int(rng.integers(1, 4))):
            if len(pts) == 0:
                break
            center = pts[int(rng.integers(len(pts))), :2]
            radius = rng.uniform(0.1, 0.3)
            keep = np.linalg.norm(pts[:, :2] - center, axis=1) >= radius
            pts = pts[keep]
    dpos = rng.normal(0.0, pos_noise, size=3)
    dyaw = float(rng.normal(0.0, yaw_noise))
    c, s = np.float32(np.cos(dyaw)), np.float32(np.sin(dyaw))
    rx = c * pts[:, 0] + s * pts[:, 1]
    ry = -s * pts[:, 0] + c * pts[:, 1]
    out = np.stack([rx, ry, pts[:, 2]], axis=1).astype(np.float32)
    believed = Pose(np.asarray(pose.position, dtype=np.float64) + dpos, pose.yaw + dyaw)
    return out, believed


# -------------------------------------------------------------- elevation ----


def extract_elevation(grid: VoxelGrid, threshold: float = 0.5) -> np.ndarray:
    """2.5D height field at the locomotion sample points (2 m x 1 m body-
    frame window, 0.1 m spacing) from thresholded occupancy.

    Per column the reported surface is the top of the highest occupied cell
    that is part of a contiguous occupied stack reaching down to the base
    height, so a box or wall ahead reads its full top and a passage slab
    ahead reads as a wall, while a detached overhang strictly above the
    base (a ceiling) is ignored. The estimate is the cell's center height,
    which keeps the worst-case discretization error to half a voxel. Empty
    columns fall back to the world ground plane at z = 0.
    """
    from .skills import H_NX, H_NY, height_grid_points

    X, Y, Z = grid.dims
    vs = grid.voxel_size
    off = grid.spec.offset
    occ = grid.occupancy >= threshold
    z_bottom = off[2] + np.arange(Z) * vs
    grounded = np.zeros_like(occ)
    below = np.zeros(occ.shape[:2], dtype=bool)
    for k in range(Z):
        grounded[:, :, k] = occ[:, :, k] & ((z_bottom[k] <= 1e-3) | below)
        below = grounded[:, :, k]
    pts = height_grid_points()
    ix = np.floor((pts[:, 0] - off[0]) / vs).astype(np.int64)
    iy = np.floor((pts[:, 1] - off[1]) / vs).astype(np.int64)
    inb = (ix >= 0) & (ix < X) & (iy >= 0) & (iy < Y)
    cols = grounded[ix.clip(0, X - 1), iy.clip(0, Y - 1), :]  # [P, Z]
    has = cols.any(axis=1) & inb
    top = Z - 1 - np.argmax(cols[:, ::-1], axis=1)
    surface = grid.pose.position[2] + off[2] + (top + 0.5) * vs
    h = np.where(has, surface, 0.0).astype(np.float32)
    return h.reshape(H_NX, H_NY)


class NaiveElevation:
    """Comparison baseline: per-column running max of raw point heights in
    the world frame with exponential forgetting (time constant tau). Knows
    nothing about occlusion, so columns never observed stay at ground 0 and
    pose drift biases every estimate."""

    def __init__(self, cell: float = 0.1, tau: float = 2.0, extent: float = 12.0):
        self.cell = float(cell)
        self.tau = float(tau)
        self.extent = float(extent)
        n = int(round(2 * extent / cell))
        self.h = np.zeros((n, n), dtype=np.float64)
        self.known = np.zeros((n, n), dtype=bool)

    def _column(self, wx, wy):
        i = np.floor((wx + self.extent) / self.cell).astype(np.int64)
        j = np.floor((wy + self.extent) / self.cell).astype(np.int64)
        n = self.h.shape[0]
        ok = (i >= 0) & (i < n) & (j >= 0) & (j < n)
        return i, j, ok

    def update(self, points: np.ndarray, valid, pose: Pose, dt: float) -> None:
        self.h[self.known] *= np.exp(-dt / self.tau)
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        ok = np.isfinite(pts).all(axis=1)
        if valid is not None:
            ok &= np.asarray(valid, dtype=bool).reshape(-1)
        pts = pts[ok]
        c, s = np.cos(pose.yaw), np.sin(pose.yaw)
        wx = pose.position[0] + c * pts[:, 0] - s * pts[:, 1]
        wy = pose.position[1] + s * pts[:, 0] + c * pts[:, 1]
        wz = pose.position[2] + pts[:, 2]
        i, j, inb = self._column(wx, wy)
        i, j, wz = i[inb], j[inb], wz[inb]
        fresh = np.full_like(self.h, -np.inf)
        np.maximum.at(fresh, (i, j), wz)
        seen = np.isfinite(fresh)
        take = seen & (~self.known | (fresh > self.h))
        self.h[take] = fresh[take]
        self.known |= seen

    def query(self, pose: Pose) -> np.ndarray:
        """Heights [20, 10] at the locomotion sample points around a pose."""
        from .skills import H_NX, H_NY, height_grid_points

        pts = height_grid_points()
        c, s = np.cos(pose.yaw), np.sin(pose.yaw)
        wx = pose.position[0] + c * pts[:, 0] - s * pts[:, 1]
        wy = pose.position[1] + s * pts[:, 0] + c * pts[:, 1]
        i, j, inb = self._column(wx, wy)
        i, j = i.clip(0, self.h.shape[0] - 1), j.clip(0, self.h.shape[1] - 1)
        vals = np.where(self.known[i, j] & inb, self.h[i, j], 0.0)
        return vals.reshape(H_NX, H_NY).astype(np.float32)


# ---------------------------------------------------------------- dataset ----

_PKPD_MAGIC = b"PKPD"
_PKPD_VERSION = 1
_GT_NAMES = ("coarse_occ", "coarse_cent", "fine_occ", "fine_cent")


@dataclass
class PerceptionFrame:
    position: np.ndarray  # [3]
    quat: np.ndarray      # [4] wxyz
    points: np.ndarray    # [P, 3] body yaw frame
    coarse_occ: np.ndarray
    coarse_cent: np.ndarray
    fine_occ: np.ndarray
    fine_cent: np.ndarray

    @property
    def yaw(self) -> float:
        return float(quat_yaw(self.quat[None])[0])

    @property
    def pose(self) -> Pose:
        return Pose(np.asarray(self.position, dtype=np.float64), self.yaw)


def _write_frame(f, position, quat, points, gts: dict[str, np.ndarray]) -> None:
    buf = io.BytesIO()
    head = np.concatenate([np.asarray(position), np.asarray(quat)]).astype("<f4")
    buf.write(head.tobytes())
    pts = np.ascontiguousarray(points, dtype="<f4")
    buf.write(struct.pack("<I", pts.shape[0]))
    buf.write(pts.tobytes())
    for name in _GT_NAMES:
        write_tensor_record(buf, name, gts[name])
    payload = buf.getvalue()
    f.write(struct.pack("<I", len(payload)))
    f.write(payload)


class PerceptionDataset:
    """Reader for trajectory files of (pose, cloud, ground-truth grids).

    Frames are stored trajectory-major as length-prefixed records; an
    offset index built on open gives O(1) random access.
    """

    def __init__(self, path: str):
        self.path = path
        self._f = open(path, "rb")
        if self._f.read(4) != _PKPD_MAGIC:
            raise ContractViolation(f"{path}: not a perception dataset (bad magic)")
        (version,) = struct.unpack("<I", self._f.read(4))
        if version != _PKPD_VERSION:
            raise ContractViolation(f"{path}: unsupported dataset version {version}")
        self.n_traj, self.steps = struct.unpack("<II", self._f.read(8))
        self._offsets = np.zeros(self.n_traj * self.steps, dtype=np.int64)
        pos = self._f.tell()
        for k in range(self.n_traj * self.steps):
            self._offsets[k] = pos
            head = self._f.read(4)
            if len(head) != 4:
                raise ContractViolation(f"{path}: truncated at frame {k}")
            (n,) = struct.unpack("<I", head)
            pos += 4 + n
            self._f.seek(pos)
        self.meta = {}
        if os.path.exists(path + ".json"):
            with open(path + ".json") as f:
                self.meta = json.load(f)

    def close(self) -> None:
        self._f.close()

    def frame(self, traj: int, step: int) -> PerceptionFrame:
        if not (0 <= traj < self.n_traj and 0 <= step < self.steps):
            raise ConfigurationError(f"frame ({traj}, {step}) out of range")
        self._f.seek(self._offsets[traj * self.steps + step])
        (n,) = struct.unpack("<I", self._f.read(4))
        buf = io.BytesIO(self._f.read(n))
        head = np.frombuffer(buf.read(28), dtype="<f4")
        (count,) = struct.unpack("<I", buf.read(4))
        points = np.frombuffer(buf.read(12 * count), dtype="<f4").reshape(count, 3).copy()
        gts = {}
        for _ in _GT_NAMES:
            rec = read_tensor_record(buf)
            if rec is None:
                raise ContractViolation(f"{self.path}: frame ({traj}, {step}) missing grids")
            gts[rec[0]] = rec[1]
        return PerceptionFrame(
            head[:3].astype(np.float64), head[3:7].astype(np.float64), points,
            gts["coarse_occ"], gts["coarse_cent"], gts["fine_occ"], gts["fine_cent"],
        )


def _script_trajectory(t, steps: int, dt: float, speed: float, rng):
    """Kinematic poses gliding along the terrain's nominal route: positions
    [S, 3] (base height 0.5 above the surface) and yaws [S]."""
    path = np.asarray(t.path, dtype=np.float64)
    if len(path) < 2:
        path = np.vstack([path, path[-1] + [1.0, 0.0, 0.0]])
    seg = np.diff(path[:, :2], axis=0)
    seg_len = np.maximum(np.linalg.norm(seg, axis=1), 1e-9)
    cum = np.concatenate([[0.0], np.cumsum(seg_len)])
    s = np.minimum(np.arange(steps) * dt * speed, cum[-1] - 1e-6)
    k = np.clip(np.searchsorted(cum, s, side="right") - 1, 0, len(seg) - 1)
    frac = (s - cum[k]) / seg_len[k]
    pos = path[k] + (path[k + 1] - path[k]) * frac[:, None]
    pos[:, 2] += 0.5
    yaw = np.arctan2(seg[k, 1], seg[k, 0])
    phase = rng.uniform(0.0, 2 * np.pi)
    yaw = yaw + 0.15 * np.sin(2 * np.pi * np.arange(steps) * dt / 4.0 + phase)
    return pos, yaw


def generate_dataset(
    path: str,
    n_traj: int,
    steps: int,
    seed: int = 0,
    dt: float = 0.1,
    speed: float = 0.6,
    worlds: tuple = ("world_a", "world_b", "world_c"),
    difficulty_range: tuple = (0.2, 1.0),
) -> PerceptionDataset:
    """Write a PerceptionDataset of scripted fly-through trajectories, split
    equally across the world kinds, and return a reader for it.

    Every frame stores the sensed cloud, the true pose, and exact
    occupancy/centroid grids recomputed from the terrain at that pose, so
    the file contents are a pure function of the arguments.
    """
    infos = []
    with open(path, "wb") as f:
        f.write(_PKPD_MAGIC)
        f.write(struct.pack("<III", _PKPD_VERSION, n_traj, steps))
        for i in range(n_traj):
            kind = worlds[i % len(worlds)]
            rng = np.random.default_rng(np.random.SeedSequence([seed, i]))
            tseed = int(rng.integers(2**31 - 1))
            diff = float(rng.uniform(*difficulty_range))
            t = generate_world(kind, tseed, diff)
            pos, yaw = _script_trajectory(t, steps, dt, speed, rng)
            # Quantize poses to their stored float32 representation up front
            # so grids recomputed from the file match byte for byte.
            pos = pos.astype(np.float32).astype(np.float64)
            quat = quat_from_yaw(yaw).astype(np.float32).astype(np.float64)
            yaw = quat_yaw(quat)
            env = EnvBatch([t] * steps, seed=tseed, n_workers=1)
            env.pos[:] = pos
            env.quat[:] = quat
            pts, ok = env.sense_pointcloud()
            boxes = [t.boxes] * steps
            co, cc = occupancy_ground_truth_batch(boxes, pos, yaw, COARSE_GRID)
            fo, fc = occupancy_ground_truth_batch(boxes, pos, yaw, FINE_GRID)
            for s in range(steps):
                gts = {
                    "coarse_occ": co[s], "coarse_cent": cc[s],
                    "fine_occ": fo[s], "fine_cent": fc[s],
                }
                _write_frame(f, pos[s], env.quat[s], pts[s][ok[s]], gts)
            infos.append({"kind": kind, "seed": tseed, "difficulty": diff})
    sidecar = {
        "version": _PKPD_VERSION, "n_traj": n_traj, "steps": steps,
        "dt": dt, "speed": speed, "trajectories": infos,
    }
    with open(path + ".json", "w") as f:
        json.dump(sidecar, f, indent=1)
    return PerceptionDataset(path)


# --------------------------------------------------------------- training ----


@dataclass
class PerceptionTrainConfig:
    updates: int = 300
    batch: int = 2
    unroll: int = 8
    lr: float = 1e-3
    seed: int = 0
    grad_clip: float = 5.0
    backprop_through_feedback: bool = False
    augment: bool = True
    latent_dim: int = 256
    out_dir: str = "runs/perception"
    csv_name: str = "train_log.csv"
    checkpoint_name: str = "perception.pkrl"


def _pad_clouds(clouds: list) -> np.ndarray:
    """Stack ragged clouds into [B, Pmax, 3] with NaN padding (dropped by
    voxelize_batch)."""
    pmax = max((len(c) for c in clouds), default=0)
    out = np.full((len(clouds), max(pmax, 1), 3), np.nan, dtype=np.float32)
    for b, c in enumerate(clouds):
        out[b, : len(c)] = c
    return out


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-np.clip(x, -30.0, 30.0)))


def _resample_feedback_tensor(fb, old_poses, new_poses, spec):
    """Differentiable counterpart of transform_feedback_batch: gathers the
    previous output Tensor through the nearest-voxel map so gradients flow
    across the unroll."""
    B, C = fb.data.shape[:2]
    X, Y, Z = spec.dims
    n = X * Y * Z
    idx = np.empty((B, n), dtype=np.int64)
    val = np.empty((B, n), dtype=np.float32)
    for b in range(B):
        flat, valid = _resample_map(old_poses[b], new_poses[b], spec)
        idx[b], val[b] = flat, valid.astype(np.float32)
    base = (np.arange(B)[:, None, None] * C + np.arange(C)[None, :, None]) * n
    gathered = ad.take_flat(fb, base + idx[:, None, :])
    out = ad.reshape(gathered, (B, C, X, Y, Z))
    mask = np.broadcast_to(val.reshape(B, 1, X, Y, Z), out.data.shape).astype(np.float32)
    return out * Tensor(np.ascontiguousarray(mask))


def train_perception(dataset: PerceptionDataset, cfg: PerceptionTrainConfig) -> dict:
    """Train both reconstruction networks by truncated unrolls with the
    auto-regressive feedback active (detached between steps unless
    backprop_through_feedback is set). Returns checkpoint and log paths."""
    if dataset.steps < cfg.unroll:
        raise ConfigurationError(
            f"unroll {cfg.unroll} longer than trajectories ({dataset.steps} steps)"
        )
    model = PerceptionModel(seed=cfg.seed, latent_dim=cfg.latent_dim)
    params = model.params()
    opt = AdamState.for_params(params, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    os.makedirs(cfg.out_dir, exist_ok=True)
    csv_path = os.path.join(cfg.out_dir, cfg.csv_name)
    ckpt_path = os.path.join(cfg.out_dir, cfg.checkpoint_name)
    X, Y, Z = COARSE_GRID.dims
    last = float("nan")
    with open(csv_path, "w") as log:
        log.write("update,loss,coarse_bce,coarse_cent,fine_bce,fine_cent\n")
        for u in range(cfg.updates):
            trajs = rng.integers(0, dataset.n_traj, size=cfg.batch)
            starts = rng.integers(0, dataset.steps - cfg.unroll + 1, size=cfg.batch)
            fb_np = np.zeros((cfg.batch, N_CHANNELS, X, Y, Z), dtype=np.float32)
            fb_t = None
            prev_poses = None
            comps = np.zeros(4)
            with Tape() as tape:
                total = None
                for s in range(cfg.unroll):
                    frames = [dataset.frame(int(t), int(st) + s) for t, st in zip(trajs, starts)]
                    clouds, poses = [], []
                    for fr in frames:
                        if cfg.augment:
                            pc, bel = augment_pointcloud(fr.points, fr.pose, rng)
                        else:
                            pc, bel = fr.points, fr.pose
                        clouds.append(pc)
                        poses.append(bel)
                    padded = _pad_clouds(clouds)
                    mo, mc = voxelize_batch(padded, None, COARSE_GRID)
                    meas_c = np.concatenate([mo[:, None], mc], axis=1)
                    fo, fc = voxelize_batch(padded, None, FINE_GRID)
                    meas_f = np.concatenate([fo[:, None], fc], axis=1)
                    if prev_poses is not None:
                        if cfg.backprop_through_feedback:
                            fb = _resample_feedback_tensor(fb_t, prev_poses, poses, COARSE_GRID)
                        else:
                            fb = Tensor(transform_feedback_batch(
                                fb_np,
                                np.stack([p.position for p in prev_poses]),
                                np.array([p.yaw for p in prev_poses]),
                                np.stack([p.position for p in poses]),
                                np.array([p.yaw for p in poses]),
                                COARSE_GRID,
                            ))
                    else:
                        fb = Tensor(fb_np)
                    lo, lc, _, feats = model.coarse_forward(Tensor(meas_c), fb)
                    flo, flc = model.fine_forward(Tensor(meas_f), feats)
                    gt_co = np.stack([fr.coarse_occ for fr in frames])
                    gt_cc = np.stack([fr.coarse_cent for fr in frames])
                    gt_fo = np.stack([fr.fine_occ for fr in frames])
                    gt_fc = np.stack([fr.fine_cent for fr in frames])
                    cb, ccst = reconstruction_terms(lo, lc, gt_co, gt_cc)
                    fbce, fcst = reconstruction_terms(flo, flc, gt_fo, gt_fc)
                    step_loss = (cb + ccst) + (fbce + fcst)
                    total = step_loss if total is None else total + step_loss
                    comps += [float(cb.data), float(ccst.data), float(fbce.data), float(fcst.data)]
                    if cfg.backprop_through_feedback:
                        fb_t = ad.concat([ad.sigmoid(lo), lc], axis=1)
                    else:
                        fb_np = np.concatenate([_sigmoid_np(lo.data), lc.data], axis=1)
                    prev_poses = poses
                total = total * np.float32(1.0 / cfg.unroll)
                last = float(total.data)
                if not np.isfinite(last):
                    raise ContractViolation(f"training diverged (seed {cfg.seed})")
                backward(tape, total)
            clip_grads(params, cfg.grad_clip)
            adam_step(opt, params)
            comps /= cfg.unroll
            log.write(f"{u},{last:.6f},{comps[0]:.6f},{comps[1]:.6f},"
                      f"{comps[2]:.6f},{comps[3]:.6f}\n")
    model.save(ckpt_path)
    return {
        "checkpoint": ckpt_path,
        "csv": csv_path,
        "final_loss": last,
        "updates": cfg.updates,
        "param_hash": model.param_hash(),
    }


# --------------------------------------------------------------- pipeline ----


class PerceptionPipeline:
    """Streaming inference over a batch of robots: voxelize each sensed
    cloud, transform the previous output into the new frame, run both
    networks, and keep the outputs for the next feedback step."""

    def __init__(self, model: PerceptionModel, n_envs: int):
        self.model = model
        self.n_envs = int(n_envs)
        X, Y, Z = COARSE_GRID.dims
        self._fb = np.zeros((self.n_envs, N_CHANNELS, X, Y, Z), dtype=np.float32)
        self._pos = np.zeros((self.n_envs, 3))
        self._yaw = np.zeros(self.n_envs)
        self._has_prev = np.zeros(self.n_envs, dtype=bool)
        self.last = None

    def reset(self, env_ids=None) -> None:
        ids = np.arange(self.n_envs) if env_ids is None else np.asarray(env_ids)
        self._fb[ids] = 0.0
        self._has_prev[ids] = False

    def step(self, points: np.ndarray, valid, pos: np.ndarray, yaw: np.ndarray) -> dict:
        """points [B,R,3] body yaw frame, valid [B,R], pos [B,3], yaw [B].
        Returns occupancy probabilities, centroids, and the scene latent."""
        pos = np.asarray(pos, dtype=np.float64)
        yaw = np.asarray(yaw, dtype=np.float64)
        mo, mc = voxelize_batch(points, valid, COARSE_GRID)
        meas_c = np.concatenate([mo[:, None], mc], axis=1)
        fo, fc = voxelize_batch(points, valid, FINE_GRID)
        meas_f = np.concatenate([fo[:, None], fc], axis=1)
        fb = np.zeros_like(self._fb)
        live = np.flatnonzero(self._has_prev)
        if live.size:
            fb[live] = transform_feedback_batch(
                self._fb[live], self._pos[live], self._yaw[live], pos[live], yaw[live],
                COARSE_GRID,
            )
        lo, lc, latent, feats = self.model.coarse_forward(Tensor(meas_c), Tensor(fb))
        flo, flc = self.model.fine_forward(Tensor(meas_f), feats)
        self._fb = np.concatenate([_sigmoid_np(lo.data), lc.data], axis=1)
        self._pos, self._yaw = pos.copy(), yaw.copy()
        self._has_prev[:] = True
        self.last = {
            "latent": latent.data.copy(),
            "coarse_occ": _sigmoid_np(lo.data[:, 0]),
            "coarse_cent": lc.data.copy(),
            "fine_occ": _sigmoid_np(flo.data[:, 0]),
            "fine_cent": flc.data.copy(),
        }
        return self.last

    def elevation(self, threshold: float = 0.5) -> np.ndarray:
        """Height fields [B, 20, 10] from the latest fine occupancy."""
        if self.last is None:
            raise ContractViolation("elevation queried before any step")
        out = []
        for b in range(self.n_envs):
            grid = VoxelGrid(
                self.last["fine_occ"][b], self.last["fine_cent"][b], FINE_GRID,
                Pose(self._pos[b], float(self._yaw[b])),
            )
            out.append(extract_elevation(grid, threshold))
        return np.stack(out)
