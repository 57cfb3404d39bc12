"""Procedural terrain: every world is a set of static axis-aligned boxes.

Three navigation world kinds (open boxes with walls, an elevated winding
platform, a straight obstacle line), single-obstacle arenas for each
locomotion skill, and a direct-vs-detour evaluation arena. Also the spatial
queries everything else leans on: support height, elevation with overhang
handling, batched ray casting, and exact voxel occupancy ground truth for
grids aligned with the robot's yaw frame.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError

WORLD_KINDS = ("world_a", "world_b", "world_c")
SKILLS = ("walk", "jump", "climb_up", "climb_down", "crouch")

# obstacle parameter ranges: value at difficulty 0 -> value at difficulty 1,
# linear, extrapolated past 1
_PARAM_RANGES = {
    "gap_width": (0.20, 1.00),
    "box_height": (0.20, 1.00),
    "passage_height": (0.80, 0.40),
    "step_height": (0.05, 0.25),
    "slope_angle": (0.0, float(np.deg2rad(40.0))),
}


@dataclass
class ObstacleParams:
    gap_width: float
    box_height: float
    passage_height: float
    step_height: float
    slope_angle: float


def difficulty_map(skill: str, d: float) -> ObstacleParams:
    """Map a difficulty scalar to obstacle dimensions. Monotone and linear in
    d; d may exceed 1 for out-of-range evaluation."""
    if d < 0.0:
        raise ConfigurationError(f"difficulty must be >= 0, got {d}")
    if skill not in SKILLS and skill != "any":
        raise ConfigurationError(f"unknown skill {skill!r}")
    vals = {k: lo + (hi - lo) * d for k, (lo, hi) in _PARAM_RANGES.items()}
    return ObstacleParams(**vals)


@dataclass
class Terrain:
    kind: str
    seed: int
    difficulty: float
    boxes: np.ndarray          # [n, 6] float32: lo_x lo_y lo_z hi_x hi_y hi_z
    roles: list[str]           # per box: ground|obstacle|wall|distractor|platform
    friction: float
    spawn: np.ndarray          # [2, 2] float32 xy bounds of the spawn region
    path: np.ndarray           # [k, 3] float32 nominal route polyline (on-surface)
    obstacles: list[dict] = field(default_factory=list)
    platform_top: float = 0.0  # for fall-off termination on elevated worlds

    @property
    def goal(self) -> np.ndarray:
        return self.path[-1]

    def to_json(self) -> str:
        return json.dumps(
            {
                "kind": self.kind,
                "seed": self.seed,
                "difficulty": self.difficulty,
                "friction": self.friction,
                "platform_top": self.platform_top,
                "boxes": [[float(v) for v in row] for row in self.boxes],
                "roles": self.roles,
                "spawn": [[float(v) for v in row] for row in self.spawn],
                "path": [[float(v) for v in row] for row in self.path],
                "obstacles": self.obstacles,
            }
        )

    @classmethod
    def from_json(cls, text: str) -> "Terrain":
        d = json.loads(text)
        return cls(
            kind=d["kind"],
            seed=d["seed"],
            difficulty=d["difficulty"],
            boxes=np.asarray(d["boxes"], dtype=np.float32).reshape(-1, 6),
            roles=list(d["roles"]),
            friction=d["friction"],
            spawn=np.asarray(d["spawn"], dtype=np.float32),
            path=np.asarray(d["path"], dtype=np.float32),
            obstacles=d["obstacles"],
            platform_top=d.get("platform_top", 0.0),
        )


class _Builder:
    def __init__(self):
        self.rows: list[list[float]] = []
        self.roles: list[str] = []

    def add(self, lo, hi, role: str) -> None:
        lo = [float(v) for v in lo]
        hi = [float(v) for v in hi]
        if any(h <= l for l, h in zip(lo, hi)):
            raise ConfigurationError(f"degenerate box {lo} {hi}")
        self.rows.append(lo + hi)
        self.roles.append(role)

    def array(self) -> np.ndarray:
        return np.asarray(self.rows, dtype=np.float32)


def _surface_path(boxes: np.ndarray, xy_points: list[tuple[float, float]]) -> np.ndarray:
    """Lift a 2D polyline onto the terrain surface."""
    out = []
    for x, y in xy_points:
        z = _support_height_rows(boxes, x, y, 10.0)
        out.append([x, y, z])
    return np.asarray(out, dtype=np.float32)


def _support_height_rows(boxes: np.ndarray, x: float, y: float, z_ref: float) -> float:
    eps = 1e-3
    m = (
        (boxes[:, 0] <= x) & (x <= boxes[:, 3])
        & (boxes[:, 1] <= y) & (y <= boxes[:, 4])
        & (boxes[:, 5] <= z_ref + eps)
    )
    return float(boxes[m, 5].max()) if m.any() else 0.0


# ------------------------------------------------------------- generators ----


def generate_world(kind: str, seed: int, difficulty: float) -> Terrain:
    """Deterministic procedural terrain for a world kind, a skill arena
    (kind 'arena_<skill>'), 'flat', or 'direct_up'/'direct_down' evaluation
    arenas. Same inputs always produce an identical Terrain."""
    rng = np.random.default_rng(np.random.SeedSequence((hash_kind(kind), seed)))
    friction = float(rng.uniform(0.5, 1.0))
    p = difficulty_map("any", difficulty)
    if kind == "world_a":
        t = _world_a(rng, p, difficulty)
    elif kind == "world_b":
        t = _world_b(rng, p, difficulty)
    elif kind == "world_c":
        t = _world_c(rng, p, difficulty)
    elif kind == "flat":
        t = _flat(rng)
    elif kind.startswith("arena_"):
        skill = kind[len("arena_"):]
        if skill not in SKILLS:
            raise ConfigurationError(f"unknown arena skill {skill!r}")
        t = _arena(skill, rng, p, difficulty)
    elif kind in ("direct_up", "direct_down"):
        t = _direct_arena(kind, rng, difficulty)
    else:
        raise ConfigurationError(f"unknown world kind {kind!r}")
    builder, spawn, path, obstacles, platform_top = t
    return Terrain(
        kind=kind,
        seed=seed,
        difficulty=float(difficulty),
        boxes=builder.array(),
        roles=builder.roles,
        friction=friction,
        spawn=np.asarray(spawn, dtype=np.float32),
        path=path,
        obstacles=obstacles,
        platform_top=platform_top,
    )


def hash_kind(kind: str) -> int:
    return int.from_bytes(kind.encode("utf-8")[:8].ljust(8, b"\0"), "little") % (2**31)


def _flat(rng):
    b = _Builder()
    b.add((-8.0, -8.0, -1.0), (8.0, 8.0, 0.0), "ground")
    spawn = [[-2.0, -2.0], [2.0, 2.0]]
    path = _surface_path(b.array(), [(0.0, 0.0), (4.0, 0.0)])
    return b, spawn, path, [], 0.0


def _world_a(rng, p: ObstacleParams, d: float):
    """Open ground with pallet boxes, gaps between some of them, plus walls
    and small distractors off the route."""
    b = _Builder()
    half = 8.0
    b.add((-half, -half, -1.0), (half, half, 0.0), "ground")
    obstacles = []
    n_boxes = int(rng.integers(2, 5))
    x = -2.0
    goal_top = 0.0
    for i in range(n_boxes):
        depth = float(rng.uniform(1.2, 2.0))
        width = float(rng.uniform(2.0, 3.2))
        height = float(p.box_height * rng.uniform(0.5, 1.0))
        y0 = float(rng.uniform(-1.5, 1.5) - width / 2)
        x += float(rng.uniform(1.6, 2.6))
        b.add((x, y0, 0.0), (x + depth, y0 + width, height), "obstacle")
        obstacles.append({"type": "box", "x0": x, "x1": x + depth,
                          "y0": y0, "y1": y0 + width, "height": height, "top_z": height})
        # sometimes a jump-partner box across a gap
        if rng.uniform() < 0.5 and i < n_boxes - 1:
            gap = float(p.gap_width * rng.uniform(0.6, 1.0))
            x2 = x + depth + gap
            depth2 = float(rng.uniform(1.0, 1.6))
            b.add((x2, y0, 0.0), (x2 + depth2, y0 + width, height), "obstacle")
            obstacles.append({"type": "gap", "x0": x + depth, "x1": x2,
                              "y0": y0, "y1": y0 + width, "height": height,
                              "top_z": height, "gap": gap})
            x = x2 + depth2 - depth
        x += depth
        goal_top = height
    # perimeter-ish walls and distractors, away from the route
    for _ in range(int(rng.integers(0, 3))):
        wx = float(rng.uniform(-half + 1, half - 2))
        wy = float(rng.choice([-1.0, 1.0]) * rng.uniform(4.0, 6.5))
        b.add((wx, wy, 0.0), (wx + rng.uniform(1.5, 3.0), wy + 0.3, 2.0), "wall")
    for _ in range(int(rng.integers(0, 5))):
        dx = float(rng.uniform(-half + 1, half - 1))
        dy = float(rng.choice([-1.0, 1.0]) * rng.uniform(3.0, 6.0))
        s = float(rng.uniform(0.2, 0.6))
        b.add((dx, dy, 0.0), (dx + s, dy + s, s), "distractor")
    spawn = [[-4.0, -1.2], [-2.6, 1.2]]
    pts = [[-3.3, 0.0, 0.0]]
    for o in obstacles:
        pts.append([(o["x0"] + o["x1"]) / 2, (o["y0"] + o["y1"]) / 2, o["top_z"]])
    if not (obstacles and rng.uniform() < 0.7):
        pts.append([min(x + 2.0, half - 1), 0.0, 0.0])  # ground goal past the boxes
    path = np.asarray(pts, dtype=np.float32)
    return b, spawn, path, obstacles, 0.0


def _world_b(rng, p: ObstacleParams, d: float):
    """Winding elevated platform with steps, gaps, and overhead slabs; edges
    drop off to a floor far below."""
    b = _Builder()
    top = 0.8
    width = float(rng.uniform(1.8, 2.4))
    b.add((-20.0, -20.0, -1.0), (20.0, 20.0, 0.0), "ground")
    # build segments with 90 degree turns; track the centerline
    n_seg = int(rng.integers(4, 7))
    heading = 0  # 0:+x 1:+y -1:-y
    cx, cy = 0.0, 0.0
    centers = [(-1.0, 0.0)]
    obstacles = []
    seg_boxes = []
    for i in range(n_seg):
        length = float(rng.uniform(3.0, 4.5))
        if heading == 0:
            lo = (cx - (width / 2 if i else 1.5), cy - width / 2, top - 0.25)
            hi = (cx + length, cy + width / 2, top)
            nx, ny = cx + length, cy
        else:
            sgn = heading
            y_end = cy + sgn * length
            lo = (cx - width / 2, (y_end if sgn < 0 else cy - width / 2), top - 0.25)
            hi = (cx + width / 2, (cy + width / 2 if sgn < 0 else y_end), top)
            nx, ny = cx, y_end
        seg_boxes.append((lo, hi))
        b.add(lo, hi, "platform")
        centers.append((nx, ny))
        cx, cy = nx, ny
        heading = 0 if heading != 0 else int(rng.choice([1, -1]))
    # obstacles on straight x segments: step boxes, overhead slabs, gaps
    for (lo, hi) in seg_boxes:
        if hi[0] - lo[0] < 3.0 or rng.uniform() > 0.8:
            continue
        ox = float(rng.uniform(lo[0] + 1.5, hi[0] - 1.5))
        typ = rng.choice(["step", "table"])
        if typ == "step":
            h = float(p.step_height + 0.05)
            b.add((ox, lo[1], top), (ox + 0.8, hi[1], top + h), "obstacle")
            obstacles.append({"type": "box", "x0": ox, "x1": ox + 0.8, "y0": lo[1],
                              "y1": hi[1], "height": h, "top_z": top + h})
        else:
            ph = float(p.passage_height)
            b.add((ox, lo[1], top + ph), (ox + 0.8, hi[1], top + ph + 0.25), "obstacle")
            obstacles.append({"type": "table", "x0": ox, "x1": ox + 0.8, "y0": lo[1],
                              "y1": hi[1], "height": ph, "top_z": top + ph})
    spawn = [[-1.2, -0.6], [0.2, 0.6]]
    path = np.asarray([[x, y, top] for x, y in centers], dtype=np.float32)
    return b, spawn, path, obstacles, top


def _world_c(rng, p: ObstacleParams, d: float):
    """Straight obstacle line between two walls: boxes to climb, pits to
    jump, overhead slabs to crouch under."""
    b = _Builder()
    wall_y = 1.6
    x_end = 16.0
    b.add((-3.0, -wall_y - 2.0, -1.6), (x_end + 2.0, wall_y + 2.0, -0.6), "ground")
    b.add((-3.0, wall_y, -0.6), (x_end + 2.0, wall_y + 0.4, 1.4), "wall")
    b.add((-3.0, -wall_y - 0.4, -0.6), (x_end + 2.0, -wall_y, 1.4), "wall")
    obstacles = []
    n_obs = int(rng.integers(3, 6))
    kinds = [str(rng.choice(["box", "gap", "table"])) for _ in range(n_obs)]
    x = 2.0
    segments = [-3.0]  # ground segment breakpoints (for pits)
    pits = []
    for typ in kinds:
        runway = float(rng.uniform(1.6, 2.4))
        x += runway
        if typ == "box":
            h = float(p.box_height * rng.uniform(0.6, 1.0))
            depth = float(rng.uniform(0.8, 1.2))
            b.add((x, -wall_y, 0.0), (x + depth, wall_y, h), "obstacle")
            obstacles.append({"type": "box", "x0": x, "x1": x + depth,
                              "y0": -wall_y, "y1": wall_y, "height": h, "top_z": h})
            x += depth
        elif typ == "gap":
            gap = float(p.gap_width * rng.uniform(0.7, 1.0))
            pits.append((x, x + gap))
            obstacles.append({"type": "gap", "x0": x, "x1": x + gap,
                              "y0": -wall_y, "y1": wall_y, "height": 0.0,
                              "top_z": 0.0, "gap": gap})
            x += gap
        else:
            ph = float(p.passage_height)
            depth = float(rng.uniform(0.7, 1.0))
            b.add((x, -wall_y, ph), (x + depth, wall_y, ph + 0.25), "obstacle")
            obstacles.append({"type": "table", "x0": x, "x1": x + depth,
                              "y0": -wall_y, "y1": wall_y, "height": ph, "top_z": ph})
            x += depth
    # ground level built as segments broken at pits
    prev = -3.0
    for (px0, px1) in pits:
        b.add((prev, -wall_y - 2.0, -0.6), (px0, wall_y + 2.0, 0.0), "ground")
        prev = px1
    b.add((prev, -wall_y - 2.0, -0.6), (x_end + 2.0, wall_y + 2.0, 0.0), "ground")
    spawn = [[-0.8, -0.9], [0.8, 0.9]]
    goal_x = min(x + 2.0, x_end)
    # route altitude per obstacle: on top of boxes, at ground level over
    # gaps and under tables
    pts = [[0.0, 0.0, 0.0]]
    for o in obstacles:
        z = o["top_z"] if o["type"] == "box" else 0.0
        pts.append([(o["x0"] + o["x1"]) / 2, 0.0, z])
    pts.append([goal_x, 0.0, 0.0])
    path = np.asarray(pts, dtype=np.float32)
    return b, spawn, path, obstacles, 0.0


def _arena(skill: str, rng, p: ObstacleParams, d: float):
    b = _Builder()
    obstacles = []
    if skill == "walk":
        b.add((-8.0, -8.0, -1.0), (8.0, 8.0, 0.0), "ground")
        style = rng.uniform()
        if style < 0.6:  # stairs up then down
            h = p.step_height
            x = 1.0
            n = 3
            for i in range(1, n + 1):
                b.add((x, -3.0, 0.0), (x + 0.35, 3.0, i * h), "obstacle")
                x += 0.35
            b.add((x, -3.0, 0.0), (x + 1.2, 3.0, n * h), "obstacle")
            x += 1.2
            for i in range(n, 0, -1):
                b.add((x, -3.0, 0.0), (x + 0.35, 3.0, i * h), "obstacle")
                x += 0.35
            obstacles.append({"type": "stairs", "x0": 1.0, "x1": x, "y0": -3.0,
                              "y1": 3.0, "height": n * h, "top_z": n * h})
        elif style < 0.8:  # staircase slope approximation
            ang = max(p.slope_angle, 0.02)
            rise = float(np.tan(ang) * 0.3)
            x = 1.0
            n = 5
            for i in range(1, n + 1):
                b.add((x, -3.0, 0.0), (x + 0.3, 3.0, i * rise), "obstacle")
                x += 0.3
            for i in range(n, 0, -1):
                b.add((x, -3.0, 0.0), (x + 0.3, 3.0, i * rise), "obstacle")
                x += 0.3
            obstacles.append({"type": "slope", "x0": 1.0, "x1": x, "y0": -3.0,
                              "y1": 3.0, "height": n * rise, "top_z": n * rise})
        else:  # scattered low clutter
            for _ in range(int(rng.integers(3, 7))):
                cx = float(rng.uniform(-3.0, 5.0))
                cy = float(rng.uniform(-3.0, 3.0))
                s = float(rng.uniform(0.3, 0.8))
                b.add((cx, cy, 0.0), (cx + s, cy + s, rng.uniform(0.05, p.step_height + 0.05)),
                      "obstacle")
            obstacles.append({"type": "rough", "x0": -3.0, "x1": 5.0, "y0": -3.0,
                              "y1": 3.0, "height": p.step_height, "top_z": 0.0})
        spawn = [[-3.0, -2.0], [-1.0, 2.0]]
        path = _surface_path(b.array(), [(-2.0, 0.0), (3.0, 0.0)])
    elif skill == "jump":
        top = 0.5
        gap = p.gap_width
        b.add((-6.0, -6.0, -1.0), (8.0, 6.0, 0.0), "ground")
        b.add((-4.0, -2.5, 0.0), (0.0, 2.5, top), "platform")
        b.add((gap, -2.5, 0.0), (gap + 4.0, 2.5, top), "platform")
        obstacles.append({"type": "gap", "x0": 0.0, "x1": gap, "y0": -2.5,
                          "y1": 2.5, "height": top, "top_z": top, "gap": gap})
        spawn = [[-3.2, -1.5], [-1.0, 1.5]]
        path = np.asarray([[-2.0, 0.0, top], [gap + 2.0, 0.0, top]], dtype=np.float32)
    elif skill == "climb_up":
        h = p.box_height
        b.add((-6.0, -6.0, -1.0), (8.0, 6.0, 0.0), "ground")
        b.add((1.0, -2.5, 0.0), (4.0, 2.5, h), "obstacle")
        obstacles.append({"type": "box", "x0": 1.0, "x1": 4.0, "y0": -2.5,
                          "y1": 2.5, "height": h, "top_z": h})
        spawn = [[-2.5, -1.5], [-0.5, 1.5]]
        path = np.asarray([[-1.5, 0.0, 0.0], [2.5, 0.0, h]], dtype=np.float32)
    elif skill == "climb_down":
        h = p.box_height
        b.add((-6.0, -6.0, -1.0), (8.0, 6.0, 0.0), "ground")
        b.add((-4.0, -2.5, 0.0), (1.0, 2.5, h), "obstacle")
        obstacles.append({"type": "box", "x0": -4.0, "x1": 1.0, "y0": -2.5,
                          "y1": 2.5, "height": h, "top_z": h})
        spawn = [[-2.5, -1.5], [-0.5, 1.5]]
        path = np.asarray([[-1.5, 0.0, h], [3.0, 0.0, 0.0]], dtype=np.float32)
    elif skill == "crouch":
        ph = p.passage_height
        b.add((-6.0, -6.0, -1.0), (8.0, 6.0, 0.0), "ground")
        b.add((1.0, -3.0, ph), (2.0, 3.0, ph + 0.25), "obstacle")
        obstacles.append({"type": "table", "x0": 1.0, "x1": 2.0, "y0": -3.0,
                          "y1": 3.0, "height": ph, "top_z": ph})
        spawn = [[-2.5, -1.5], [-0.5, 1.5]]
        path = np.asarray([[-1.5, 0.0, 0.0], [3.5, 0.0, 0.0]], dtype=np.float32)
    else:
        raise ConfigurationError(f"no arena for skill {skill!r}")
    return b, spawn, path, obstacles, 0.0


def _direct_arena(kind: str, rng, height: float):
    """Direct-vs-detour study: a box straddles the straight route; open
    ground on one side allows a detour. 'difficulty' is the box height in
    meters here."""
    b = _Builder()
    b.add((-4.0, -6.0, -1.0), (10.0, 6.0, 0.0), "ground")
    h = max(float(height), 0.01)
    obstacles = []
    if kind == "direct_up":
        # goal on top of the box; a low staircase on the far side offers the
        # detour route up
        b.add((3.0, -1.4, 0.0), (4.4, 1.4, h), "obstacle")
        obstacles.append({"type": "box", "x0": 3.0, "x1": 4.4, "y0": -1.4,
                          "y1": 1.4, "height": h, "top_z": h})
        n_steps = 4
        for i in range(1, n_steps + 1):
            y0 = 1.4 + (n_steps - i) * 0.5
            b.add((3.0, y0, 0.0), (4.4, y0 + 0.5, i * h / n_steps), "obstacle")
        spawn = [[-1.0, -0.6], [0.4, 0.6]]
        path = np.asarray([[0.0, 0.0, 0.0], [3.7, 0.0, h]], dtype=np.float32)
    else:
        # start on the box; goal on the ground past it; staircase detour
        b.add((-1.4, -1.4, 0.0), (1.4, 1.4, h), "obstacle")
        obstacles.append({"type": "box", "x0": -1.4, "x1": 1.4, "y0": -1.4,
                          "y1": 1.4, "height": h, "top_z": h})
        n_steps = 4
        for i in range(1, n_steps + 1):
            y0 = 1.4 + (i - 1) * 0.5
            b.add((-1.4, y0, 0.0), (1.4, y0 + 0.5, h - i * h / n_steps + 0.01), "obstacle")
        spawn = [[-0.6, -0.6], [0.6, 0.6]]
        path = np.asarray([[0.0, 0.0, h], [4.5, 0.0, 0.0]], dtype=np.float32)
    return b, spawn, path, obstacles, 0.0


# ---------------------------------------------------------------- queries ----


def support_height(t: Terrain, x, y, z_ref) -> np.ndarray:
    """Highest box top at (x, y) no higher than z_ref (plus a hair), else 0.
    Vectorized over points."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float32))
    y = np.atleast_1d(np.asarray(y, dtype=np.float32))
    z_ref = np.broadcast_to(np.asarray(z_ref, dtype=np.float32), x.shape)
    bx = t.boxes
    eps = 1e-3
    m = (
        (bx[None, :, 0] <= x[:, None]) & (x[:, None] <= bx[None, :, 3])
        & (bx[None, :, 1] <= y[:, None]) & (y[:, None] <= bx[None, :, 4])
        & (bx[None, :, 5] <= z_ref[:, None] + eps)
    )
    tops = np.where(m, bx[None, :, 5], -np.inf)
    out = tops.max(axis=1)
    return np.where(np.isfinite(out), out, 0.0).astype(np.float32)


def elevation_height(t: Terrain, x, y, base_z) -> np.ndarray:
    """Elevation with overhang handling: count boxes whose bottom is at or
    below the robot base height, report their top. A crouch slab ahead reads
    as a wall; a ceiling far overhead is ignored."""
    x = np.atleast_1d(np.asarray(x, dtype=np.float32))
    y = np.atleast_1d(np.asarray(y, dtype=np.float32))
    base_z = np.broadcast_to(np.asarray(base_z, dtype=np.float32), x.shape)
    bx = t.boxes
    eps = 1e-3
    m = (
        (bx[None, :, 0] <= x[:, None]) & (x[:, None] <= bx[None, :, 3])
        & (bx[None, :, 1] <= y[:, None]) & (y[:, None] <= bx[None, :, 4])
        & (bx[None, :, 2] <= base_z[:, None] + eps)
    )
    tops = np.where(m, bx[None, :, 5], -np.inf)
    out = tops.max(axis=1)
    return np.where(np.isfinite(out), out, 0.0).astype(np.float32)


def goal_at(t: Terrain, frac: float) -> np.ndarray:
    """Point a fraction of the way along the nominal route, by arc length.
    Lets the goal curriculum start near the spawn and extend to the far end."""
    path = t.path.astype(np.float64)
    if len(path) == 1 or frac <= 0.0:
        return path[0].astype(np.float32)
    seg = np.diff(path[:, :2], axis=0)
    lens = np.linalg.norm(seg, axis=1)
    total = lens.sum()
    if total <= 0.0:
        return path[-1].astype(np.float32)
    target = min(max(frac, 0.0), 1.0) * total
    acc = 0.0
    for i, ln in enumerate(lens):
        if acc + ln >= target or i == len(lens) - 1:
            u = 0.0 if ln == 0 else (target - acc) / ln
            return (path[i] + u * (path[i + 1] - path[i])).astype(np.float32)
        acc += ln
    return path[-1].astype(np.float32)


def raycast(t: Terrain, origins: np.ndarray, dirs: np.ndarray, max_range: float = 10.0):
    """Slab-method ray vs box set. origins/dirs [R,3]; returns distances [R]
    with inf for misses. Directions need not be normalized but should be."""
    return raycast_boxes(t.boxes[None], origins[None], dirs[None], max_range)[0]


def raycast_boxes(boxes: np.ndarray, origins: np.ndarray, dirs: np.ndarray,
                  max_range: float) -> np.ndarray:
    """Batched slab test. boxes [B,n,6] (padded rows allowed as all-zero,
    excluded via hi<=lo), origins/dirs [B,R,3] -> [B,R] distances."""
    o = origins[:, :, None, :]
    d = dirs[:, :, None, :]
    lo = boxes[:, None, :, 0:3]
    hi = boxes[:, None, :, 3:6]
    valid = (boxes[:, :, 3:6] > boxes[:, :, 0:3]).all(axis=2)[:, None, :]
    par = np.abs(d) <= 1e-12
    inv = 1.0 / np.where(par, 1.0, d)
    t1 = (lo - o) * inv
    t2 = (hi - o) * inv
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    # parallel rays: inside slab -> (-inf, inf), outside -> empty
    inside = (o >= lo) & (o <= hi)
    tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
    t_enter = tmin.max(axis=3)
    t_exit = tmax.min(axis=3)
    hit = (t_enter <= t_exit) & (t_exit >= 0.0) & (t_enter <= max_range) & valid
    t_enter = np.maximum(t_enter, 0.0)
    dist = np.where(hit, t_enter, np.inf)
    return dist.min(axis=2)


class TerrainBatch:
    """Stacked per-env terrains with padded box arrays for vectorized queries."""

    def __init__(self, terrains: list[Terrain]):
        self.terrains = terrains
        n = max(len(t.boxes) for t in terrains)
        B = len(terrains)
        self.boxes = np.zeros((B, n, 6), dtype=np.float32)
        for i, t in enumerate(terrains):
            self.boxes[i, : len(t.boxes)] = t.boxes
        self.friction = np.asarray([t.friction for t in terrains], dtype=np.float32)

    def __len__(self):
        return len(self.terrains)

    def support_height(self, x: np.ndarray, y: np.ndarray, z_ref) -> np.ndarray:
        """x, y [B, P] -> [B, P]."""
        bx = self.boxes
        z = np.broadcast_to(np.asarray(z_ref, dtype=np.float32), x.shape)
        eps = 1e-3
        m = (
            (bx[:, None, :, 0] <= x[:, :, None]) & (x[:, :, None] <= bx[:, None, :, 3])
            & (bx[:, None, :, 1] <= y[:, :, None]) & (y[:, :, None] <= bx[:, None, :, 4])
            & (bx[:, None, :, 5] <= z[:, :, None] + eps)
            & (bx[:, None, :, 5] > bx[:, None, :, 2])
        )
        tops = np.where(m, bx[:, None, :, 5], -np.inf)
        out = tops.max(axis=2)
        return np.where(np.isfinite(out), out, 0.0).astype(np.float32)

    def elevation_height(self, x: np.ndarray, y: np.ndarray, base_z: np.ndarray) -> np.ndarray:
        bx = self.boxes
        eps = 1e-3
        m = (
            (bx[:, None, :, 0] <= x[:, :, None]) & (x[:, :, None] <= bx[:, None, :, 3])
            & (bx[:, None, :, 1] <= y[:, :, None]) & (y[:, :, None] <= bx[:, None, :, 4])
            & (bx[:, None, :, 2] <= base_z[:, :, None] + eps)
            & (bx[:, None, :, 5] > bx[:, None, :, 2])
        )
        tops = np.where(m, bx[:, None, :, 5], -np.inf)
        out = tops.max(axis=2)
        return np.where(np.isfinite(out), out, 0.0).astype(np.float32)


# ------------------------------------------------- voxel occupancy ground truth


@dataclass
class GridSpec:
    """Robot-centered grid, axis-aligned with the yaw frame. origin is the
    world position of the grid's (0,0,0) corner expressed so that grid
    coordinates g map to world = origin + R_yaw(g)."""

    dims: tuple[int, int, int]
    voxel_size: float
    offset: tuple[float, float, float]  # grid corner relative to base, yaw frame

    def origin_yaw(self, base_pos: np.ndarray, yaw: float):
        c, s = np.cos(yaw), np.sin(yaw)
        ox = base_pos[0] + c * self.offset[0] - s * self.offset[1]
        oy = base_pos[1] + s * self.offset[0] + c * self.offset[1]
        oz = base_pos[2] + self.offset[2]
        return np.asarray([ox, oy, oz], dtype=np.float64), float(yaw)


COARSE_GRID = GridSpec(dims=(32, 32, 16), voxel_size=0.125, offset=(-2.0, -2.0, -1.3))
FINE_GRID = GridSpec(dims=(32, 32, 16), voxel_size=0.0625, offset=(-1.0, -1.0, -0.8))


def occupancy_ground_truth_batch(
    boxes_list: list[np.ndarray],
    base_pos: np.ndarray,
    yaw: np.ndarray,
    grid: GridSpec,
    binarize: bool = True,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact occupancy + centroid grids for a batch of poses.

    Returns (occ [B,X,Y,Z] float32 in {0,1}, cent [B,3,X,Y,Z] float32 with
    per-axis centroid in [0,1] for occupied cells, 0 elsewhere). With
    binarize=False the first return holds the raw filled volume fraction.
    """
    B = len(boxes_list)
    X, Y, Z = grid.dims
    vs = grid.voxel_size
    vol_acc = np.zeros((B, X, Y, Z), dtype=np.float64)
    cx_acc = np.zeros((B, X, Y, Z), dtype=np.float64)
    cy_acc = np.zeros((B, X, Y, Z), dtype=np.float64)
    cz_acc = np.zeros((B, X, Y, Z), dtype=np.float64)

    # Phase 1: per (env, box), enumerate candidate xy columns and classify
    # them against the rotated footprint. Columns fully inside contribute a
    # whole cell (centroid at the center); only the thin band of straddling
    # columns needs the exact polygon clip, which runs batched in phase 2.
    entries = []
    bnd_rects, bnd_lo, bnd_hi = [], [], []
    bnd_cursor = 0
    for b in range(B):
        origin, psi = grid.origin_yaw(base_pos[b], float(yaw[b]))
        c, s = np.cos(psi), np.sin(psi)
        for row in boxes_list[b]:
            lo, hi = row[:3].astype(np.float64), row[3:].astype(np.float64)
            if not np.all(hi > lo):
                continue
            # z overlap per grid row (yaw leaves z alone)
            z0 = lo[2] - origin[2]
            z1 = hi[2] - origin[2]
            k0 = max(int(np.floor(z0 / vs)), 0)
            k1 = min(int(np.ceil(z1 / vs)), Z)
            if k1 <= k0:
                continue
            ks = np.arange(k0, k1)
            ov_lo = np.maximum(z0, ks * vs)
            ov_hi = np.minimum(z1, (ks + 1) * vs)
            ln = np.maximum(ov_hi - ov_lo, 0.0)
            zf = ln / vs
            zc = np.where(ln > 0, ((ov_lo + ov_hi) / 2 - ks * vs) / vs, 0.0)
            # xy rectangle corners rotated into the grid frame (stays CCW)
            wx = np.asarray([lo[0], hi[0], hi[0], lo[0]]) - origin[0]
            wy = np.asarray([lo[1], lo[1], hi[1], hi[1]]) - origin[1]
            gx = c * wx + s * wy
            gy = -s * wx + c * wy
            i0 = max(int(np.floor(gx.min() / vs)), 0)
            i1 = min(int(np.ceil(gx.max() / vs)), X)
            j0 = max(int(np.floor(gy.min() / vs)), 0)
            j1 = min(int(np.ceil(gy.max() / vs)), Y)
            if i1 <= i0 or j1 <= j0:
                continue
            ii, jj = np.meshgrid(np.arange(i0, i1), np.arange(j0, j1), indexing="ij")
            ii = ii.ravel()
            jj = jj.ravel()
            # signed distance of each cell center to the 4 edges (positive
            # inside) and the square's support radius along each edge normal
            cx = (ii + 0.5) * vs
            cy = (jj + 0.5) * vs
            sd_min = np.full(len(ii), np.inf)
            sd_classify = np.zeros(len(ii), dtype=bool)
            for e in range(4):
                x0e, y0e = gx[e], gy[e]
                exv = gx[(e + 1) % 4] - x0e
                eyv = gy[(e + 1) % 4] - y0e
                elen = float(np.hypot(exv, eyv))
                sd = (exv * (cy - y0e) - eyv * (cx - x0e)) / elen
                r = 0.5 * vs * (abs(eyv) + abs(exv)) / elen
                sd_min = np.minimum(sd_min, sd - r)
                sd_classify |= sd <= -r
            inside = sd_min >= 0.0
            outside = sd_classify & ~inside
            boundary = ~inside & ~outside
            nb = int(boundary.sum())
            rect = np.stack([gx, gy], axis=1)
            if nb:
                bi, bj = ii[boundary], jj[boundary]
                bnd_rects.append(np.repeat(rect[None], nb, axis=0))
                bnd_lo.append(np.stack([bi * vs, bj * vs], axis=1))
                bnd_hi.append(np.stack([(bi + 1) * vs, (bj + 1) * vs], axis=1))
            entries.append(
                (b, ii[inside], jj[inside], ii[boundary], jj[boundary],
                 k0, k1, zf, zc, bnd_cursor)
            )
            bnd_cursor += nb
    frac_b = cent_b = None
    if bnd_cursor:
        area, cent = _clip_rects_to_cells(
            np.concatenate(bnd_rects), np.concatenate(bnd_lo), np.concatenate(bnd_hi)
        )
        frac_b = area / (vs * vs)
        cent_b = cent

    # Phase 3: accumulate. Within one entry the (ix, iy) pairs are unique,
    # so plain fancy-indexed adds are safe; overlap across boxes still sums.
    for (b, ii_in, jj_in, ii_bd, jj_bd, k0, k1, zf, zc, cur) in entries:
        zvol = zf
        zcz = zf * zc
        if len(ii_in):
            vol_acc[b, ii_in, jj_in, k0:k1] += zvol[None]
            cx_acc[b, ii_in, jj_in, k0:k1] += 0.5 * zvol[None]
            cy_acc[b, ii_in, jj_in, k0:k1] += 0.5 * zvol[None]
            cz_acc[b, ii_in, jj_in, k0:k1] += zcz[None]
        nb = len(ii_bd)
        if nb:
            fr = frac_b[cur : cur + nb]
            ce = cent_b[cur : cur + nb]
            keep = fr > 1e-9
            if keep.any():
                fr = fr[keep]
                bi = ii_bd[keep]
                bj = jj_bd[keep]
                cxn = (ce[keep, 0] - bi * vs) / vs
                cyn = (ce[keep, 1] - bj * vs) / vs
                vol = fr[:, None] * zvol[None]
                vol_acc[b, bi, bj, k0:k1] += vol
                cx_acc[b, bi, bj, k0:k1] += vol * cxn[:, None]
                cy_acc[b, bi, bj, k0:k1] += vol * cyn[:, None]
                cz_acc[b, bi, bj, k0:k1] += fr[:, None] * zcz[None]
    occ = (vol_acc > 1e-9)
    safe = np.where(occ, vol_acc, 1.0)
    cent = np.stack([cx_acc / safe, cy_acc / safe, cz_acc / safe], axis=1)
    cent *= occ[:, None].astype(np.float64)
    first = occ.astype(np.float32) if binarize else vol_acc.astype(np.float32)
    return first, cent.astype(np.float32)


def _clip_rects_to_cells(rects: np.ndarray, win_lo: np.ndarray, win_hi: np.ndarray):
    """Like _clip_rect_to_cells but each entry has its own rectangle.
    rects [M,4,2]."""
    M = rects.shape[0]
    K = 9
    verts = np.zeros((M, K, 2), dtype=np.float64)
    verts[:, :4] = rects
    count = np.full(M, 4, dtype=np.int64)
    rows = np.arange(M)
    for axis, bound, keep_ge in ((0, win_lo[:, 0], True), (0, win_hi[:, 0], False),
                                 (1, win_lo[:, 1], True), (1, win_hi[:, 1], False)):
        new_verts = np.zeros_like(verts)
        new_count = np.zeros(M, dtype=np.int64)
        coord = verts[:, :, axis]
        inside = coord >= bound[:, None] if keep_ge else coord <= bound[:, None]
        for k in range(K):
            cur_valid = k < count
            nxt = np.where(k + 1 < count, k + 1, 0)
            cur = verts[rows, k]
            nxt_v = verts[rows, nxt]
            cur_in = inside[rows, k] & cur_valid
            nxt_in = inside[rows, nxt] & cur_valid
            slot = np.minimum(new_count, K - 1)
            sel = cur_in[:, None]
            new_verts[rows, slot] = np.where(sel, cur, new_verts[rows, slot])
            new_count = new_count + cur_in
            crossing = (cur_in != nxt_in) & cur_valid
            denom = nxt_v[:, axis] - cur[:, axis]
            safe = np.where(np.abs(denom) > 1e-30, denom, 1.0)
            tpar = (bound - cur[:, axis]) / safe
            inter = cur + tpar[:, None] * (nxt_v - cur)
            slot = np.minimum(new_count, K - 1)
            sel = crossing[:, None]
            new_verts[rows, slot] = np.where(sel, inter, new_verts[rows, slot])
            new_count = new_count + crossing
        verts, count = new_verts, new_count
    area = np.zeros(M, dtype=np.float64)
    cx = np.zeros(M, dtype=np.float64)
    cy = np.zeros(M, dtype=np.float64)
    for k in range(K):
        valid = k < count
        nxt = np.where(k + 1 < count, k + 1, 0)
        x0 = verts[rows, k, 0]
        y0 = verts[rows, k, 1]
        x1 = verts[rows, nxt, 0]
        y1 = verts[rows, nxt, 1]
        cross = np.where(valid, x0 * y1 - x1 * y0, 0.0)
        area += cross
        cx += np.where(valid, (x0 + x1) * cross, 0.0)
        cy += np.where(valid, (y0 + y1) * cross, 0.0)
    area *= 0.5
    good = np.abs(area) > 1e-12
    denom = 6.0 * np.where(good, area, 1.0)
    cx = np.where(good, cx / denom, 0.0)
    cy = np.where(good, cy / denom, 0.0)
    return np.abs(area), np.stack([cx, cy], axis=1)


def occupancy_ground_truth(
    t: Terrain, base_pos: np.ndarray, yaw: float, grid: GridSpec
) -> tuple[np.ndarray, np.ndarray]:
    """Single-pose convenience wrapper; see occupancy_ground_truth_batch."""
    occ, cent = occupancy_ground_truth_batch(
        [t.boxes], np.asarray(base_pos, dtype=np.float64)[None], np.asarray([yaw]), grid
    )
    return occ[0], cent[0]
