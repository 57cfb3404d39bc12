"""Run orchestration: manifests, metric CSVs, SVG plots, and the pipelines
behind each CLI subcommand.

Every run directory ends up with config.json (the exact configuration),
manifest.json (hashes and artifact paths), metrics.csv where applicable, and
any SVG plots. A manifest is enough to reproduce the run: it stores the
config hash and every artifact is hash-verified on load."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import __version__, navigation
from .config import (
    ExperimentConfig, config_hash, config_to_dict, save_config,
)
from .errors import ConfigurationError, ContractViolation
from .navigation import NavPolicy, train_navigation
from .perception import (
    PerceptionDataset, PerceptionModel, generate_dataset, train_perception,
)
from .skills import SkillCatalog, SkillPolicy, evaluate_skill, train_skill
from .terrain import Terrain, generate_world


def file_sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------- manifest ----


@dataclass
class RunManifest:
    """What a run produced and how to check it hasn't rotted."""

    command: str
    config_hash: str
    code_version: str = __version__
    checkpoints: dict = field(default_factory=dict)  # name -> {path, sha256}
    metrics: dict = field(default_factory=dict)      # name -> path
    wall_clock_s: float = 0.0

    def add_checkpoint(self, name: str, path: str) -> None:
        self.checkpoints[name] = {"path": path, "sha256": file_sha256(path)}

    def save(self, path: str) -> None:
        with open(path, "w") as f:
            json.dump(dataclasses.asdict(self), f, indent=1, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path: str) -> "RunManifest":
        with open(path) as f:
            m = cls(**json.load(f))
        for name, entry in m.checkpoints.items():
            if not os.path.exists(entry["path"]):
                raise ContractViolation(f"manifest checkpoint {name} missing: {entry['path']}")
            if file_sha256(entry["path"]) != entry["sha256"]:
                raise ContractViolation(f"manifest checkpoint {name} hash mismatch")
        for name, p in m.metrics.items():
            if not os.path.exists(p):
                raise ContractViolation(f"manifest metric file {name} missing: {p}")
        return m


def _manifest(command: str, cfg: ExperimentConfig, out_dir: str, t0: float,
              checkpoints: dict, metrics: dict) -> RunManifest:
    os.makedirs(out_dir, exist_ok=True)
    save_config(cfg, os.path.join(out_dir, "config.json"))
    m = RunManifest(command=command, config_hash=config_hash(cfg),
                    wall_clock_s=round(time.time() - t0, 2))
    for name, path in checkpoints.items():
        m.add_checkpoint(name, path)
    m.metrics = dict(metrics)
    m.save(os.path.join(out_dir, "manifest.json"))
    return m


# ------------------------------------------------------------- metrics CSV ----


def write_metrics_csv(path: str, fieldnames: list, rows: list) -> None:
    import csv as _csv

    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as f:
        w = _csv.DictWriter(f, fieldnames=fieldnames)
        w.writeheader()
        w.writerows(rows)


# --------------------------------------------------------------- SVG plots ----

_W, _H = 640, 400
_ML, _MR, _MT, _MB = 56, 16, 28, 44
_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")


def _fmt(v: float) -> str:
    s = f"{v:.6g}"
    return "0" if s == "-0" else s


def _ticks(lo: float, hi: float, n: int = 5) -> list:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / (n - 1)
    mag = 10.0 ** np.floor(np.log10(raw))
    step = min(s for s in (1 * mag, 2 * mag, 2.5 * mag, 5 * mag, 10 * mag) if s >= raw)
    start = np.ceil(lo / step) * step
    out = []
    t = start
    while t <= hi + 1e-9 * step:
        out.append(round(float(t), 10))
        t += step
    return out or [lo]


def emit_svg(curves: list, labels: list = None, title: str = "",
             xlabel: str = "", ylabel: str = "") -> str:
    """Standalone line/marker plot. curves is a list of (xs, ys) pairs;
    layout is deterministic, so identical input yields identical bytes.
    Empty input produces an empty plot with axes."""
    labels = list(labels or [])
    pts = [(float(x), float(y)) for xs, ys in curves for x, y in zip(xs, ys)]
    if pts:
        xlo, xhi = min(p[0] for p in pts), max(p[0] for p in pts)
        ylo, yhi = min(p[1] for p in pts), max(p[1] for p in pts)
        if xhi == xlo:
            xlo, xhi = xlo - 0.5, xhi + 0.5
        if yhi == ylo:
            ylo, yhi = ylo - 0.5, yhi + 0.5
    else:
        xlo, xhi, ylo, yhi = 0.0, 1.0, 0.0, 1.0
    pw = _W - _ML - _MR
    ph = _H - _MT - _MB

    def sx(x):
        return _ML + (x - xlo) / (xhi - xlo) * pw

    def sy(y):
        return _H - _MB - (y - ylo) / (yhi - ylo) * ph

    e = []
    e.append(f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
             f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="12">')
    e.append(f'<rect width="{_W}" height="{_H}" fill="white"/>')
    if title:
        e.append(f'<text x="{_W / 2:.1f}" y="18" text-anchor="middle" '
                 f'font-size="14">{title}</text>')
    # axes
    x0, y0 = _ML, _H - _MB
    e.append(f'<line x1="{x0}" y1="{y0}" x2="{_W - _MR}" y2="{y0}" stroke="black"/>')
    e.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{_MT}" stroke="black"/>')
    for t in _ticks(xlo, xhi):
        if xlo - 1e-9 <= t <= xhi + 1e-9:
            e.append(f'<line x1="{sx(t):.1f}" y1="{y0}" x2="{sx(t):.1f}" '
                     f'y2="{y0 + 4}" stroke="black"/>')
            e.append(f'<text x="{sx(t):.1f}" y="{y0 + 16}" '
                     f'text-anchor="middle">{_fmt(t)}</text>')
    for t in _ticks(ylo, yhi):
        if ylo - 1e-9 <= t <= yhi + 1e-9:
            e.append(f'<line x1="{x0 - 4}" y1="{sy(t):.1f}" x2="{x0}" '
                     f'y2="{sy(t):.1f}" stroke="black"/>')
            e.append(f'<text x="{x0 - 6}" y="{sy(t) + 4:.1f}" '
                     f'text-anchor="end">{_fmt(t)}</text>')
    if xlabel:
        e.append(f'<text x="{_ML + pw / 2:.1f}" y="{_H - 8}" '
                 f'text-anchor="middle">{xlabel}</text>')
    if ylabel:
        e.append(f'<text x="14" y="{_MT + ph / 2:.1f}" text-anchor="middle" '
                 f'transform="rotate(-90 14 {_MT + ph / 2:.1f})">{ylabel}</text>')
    # data
    for i, (xs, ys) in enumerate(curves):
        color = _COLORS[i % len(_COLORS)]
        coords = [(sx(float(x)), sy(float(y))) for x, y in zip(xs, ys)]
        if len(coords) >= 2:
            path = " ".join(f"{cx:.1f},{cy:.1f}" for cx, cy in coords)
            e.append(f'<polyline points="{path}" fill="none" stroke="{color}" '
                     f'stroke-width="1.5"/>')
        for cx, cy in coords:
            e.append(f'<circle cx="{cx:.1f}" cy="{cy:.1f}" r="3" fill="{color}"/>')
    # legend
    for i, label in enumerate(labels[: len(curves)]):
        color = _COLORS[i % len(_COLORS)]
        ly = _MT + 8 + 16 * i
        e.append(f'<rect x="{_W - _MR - 130}" y="{ly - 8}" width="10" height="10" '
                 f'fill="{color}"/>')
        e.append(f'<text x="{_W - _MR - 116}" y="{ly + 1}">{label}</text>')
    e.append("</svg>")
    return "\n".join(e) + "\n"


def emit_topdown_svg(terrain: Terrain, poses: list, goal=None) -> str:
    """Top-down view of a terrain's boxes with a base trajectory drawn over
    it; used by the replay subcommand."""
    boxes = np.asarray(terrain.boxes, dtype=np.float64)
    xs = list(boxes[:, 0]) + list(boxes[:, 3]) + [p[0] for p in poses]
    ys = list(boxes[:, 1]) + list(boxes[:, 4]) + [p[1] for p in poses]
    xlo, xhi = min(xs), max(xs)
    ylo, yhi = min(ys), max(ys)
    scale = min((_W - 40) / max(xhi - xlo, 1e-6), (_H - 40) / max(yhi - ylo, 1e-6))

    def sx(x):
        return 20 + (x - xlo) * scale

    def sy(y):
        return _H - 20 - (y - ylo) * scale

    fill = {"ground": "#e8e8e8", "platform": "#d0d0d0", "obstacle": "#c08040",
            "wall": "#888888", "distractor": "#b0c4de"}
    e = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" '
         f'viewBox="0 0 {_W} {_H}" font-family="sans-serif" font-size="11">',
         f'<rect width="{_W}" height="{_H}" fill="white"/>']
    order = sorted(range(len(boxes)), key=lambda i: boxes[i, 5])
    for i in order:
        b = boxes[i]
        role = terrain.roles[i] if i < len(terrain.roles) else "obstacle"
        e.append(f'<rect x="{sx(b[0]):.1f}" y="{sy(b[4]):.1f}" '
                 f'width="{(b[3] - b[0]) * scale:.1f}" height="{(b[4] - b[1]) * scale:.1f}" '
                 f'fill="{fill.get(role, "#c08040")}" stroke="#555" stroke-width="0.5"/>')
    if len(poses) >= 2:
        path = " ".join(f"{sx(p[0]):.1f},{sy(p[1]):.1f}" for p in poses)
        e.append(f'<polyline points="{path}" fill="none" stroke="#1f77b4" '
                 f'stroke-width="2"/>')
    if poses:
        e.append(f'<circle cx="{sx(poses[0][0]):.1f}" cy="{sy(poses[0][1]):.1f}" '
                 f'r="4" fill="#2ca02c"/>')
    if goal is not None:
        e.append(f'<circle cx="{sx(goal[0]):.1f}" cy="{sy(goal[1]):.1f}" r="5" '
                 f'fill="none" stroke="#d62728" stroke-width="2"/>')
    e.append("</svg>")
    return "\n".join(e) + "\n"


# ---------------------------------------------------------------- pipelines ----


def _module_cfg(block, cfg: ExperimentConfig, out_dir: str, **extra):
    """Module config with the run-level seed and output directory applied."""
    return dataclasses.replace(block, seed=cfg.seed, out_dir=out_dir, **extra)


def run_train_skill(cfg: ExperimentConfig) -> RunManifest:
    t0 = time.time()
    out = os.path.join(cfg.out_dir, f"skill_{cfg.skill}")
    sub = _module_cfg(cfg.skill_train, cfg, out)
    result = train_skill(cfg.skill, sub)
    return _manifest("train-skill", cfg, out, t0,
                     {f"skill_{cfg.skill}": result["checkpoint"]},
                     {"train_stats": result["csv"]})


def run_gen_dataset(cfg: ExperimentConfig) -> RunManifest:
    t0 = time.time()
    d = cfg.dataset
    out = os.path.dirname(d.path) or "."
    os.makedirs(out, exist_ok=True)
    generate_dataset(d.path, d.n_traj, d.steps, seed=d.seed, dt=d.dt,
                     speed=d.speed, worlds=tuple(d.worlds),
                     difficulty_range=tuple(d.difficulty_range))
    return _manifest("gen-dataset", cfg, out, t0, {}, {"dataset": d.path})


def run_train_perception(cfg: ExperimentConfig) -> RunManifest:
    t0 = time.time()
    d = cfg.dataset
    if not os.path.exists(d.path):
        run_gen_dataset(cfg)
    out = os.path.join(cfg.out_dir, "perception")
    sub = _module_cfg(cfg.perception_train, cfg, out)
    result = train_perception(PerceptionDataset(d.path), sub)
    return _manifest("train-perception", cfg, out, t0,
                     {"perception": result["checkpoint"]},
                     {"train_log": result["csv"]})


def run_train_nav(cfg: ExperimentConfig) -> RunManifest:
    t0 = time.time()
    out = os.path.join(cfg.out_dir, "nav")
    sub = _module_cfg(cfg.nav_train, cfg, out, variant=cfg.variant)
    result = train_navigation(cfg.world_kind, sub)
    name = f"nav_{cfg.world_kind}" + ("" if cfg.variant == "full" else f"_{cfg.variant}")
    return _manifest("train-nav", cfg, out, t0,
                     {name: result["checkpoint"]},
                     {"train_stats": result["csv"]})


def _parse_sweep(spec: str) -> list:
    """'0:1.2:0.1' -> [0.0, 0.1, ..., 1.2]; a bare number -> [value]."""
    parts = spec.split(":")
    try:
        if len(parts) == 1:
            return [float(parts[0])]
        if len(parts) != 3:
            raise ValueError
        lo, hi, step = (float(p) for p in parts)
        if step <= 0 or hi < lo:
            raise ValueError
    except ValueError:
        raise ConfigurationError(f"bad sweep spec {spec!r}, want lo:hi:step")
    n = int(np.floor((hi - lo) / step + 1e-9)) + 1
    return [round(lo + i * step, 10) for i in range(n)]


def run_eval_skill(cfg: ExperimentConfig, checkpoint: str, sweep: str = "0:1.2:0.1",
                   n_rollouts: int = 32, n_threads: int = 1) -> RunManifest:
    t0 = time.time()
    difficulties = _parse_sweep(sweep)
    policy = SkillPolicy.load(checkpoint)
    skill = policy.meta.skill

    def one(d):
        curve = evaluate_skill(policy, skill, [d], n_rollouts=n_rollouts,
                               seed=cfg.seed)
        return {"skill": skill, "difficulty": d, "success_rate": curve[0][1],
                "n_rollouts": n_rollouts}

    if n_threads > 1:
        with ThreadPoolExecutor(max_workers=n_threads) as pool:
            rows = list(pool.map(one, difficulties))
    else:
        rows = [one(d) for d in difficulties]
    out = os.path.join(cfg.out_dir, f"eval_skill_{skill}")
    os.makedirs(out, exist_ok=True)
    csv_path = os.path.join(out, "metrics.csv")
    write_metrics_csv(csv_path, ["skill", "difficulty", "success_rate", "n_rollouts"], rows)
    svg_path = os.path.join(out, "success_curve.svg")
    with open(svg_path, "w") as f:
        f.write(emit_svg([([r["difficulty"] for r in rows],
                           [r["success_rate"] for r in rows])],
                         [skill], title=f"{skill} success vs difficulty",
                         xlabel="difficulty", ylabel="success rate"))
    return _manifest("eval-skill", cfg, out, t0, {f"skill_{skill}": checkpoint},
                     {"metrics": csv_path, "plot": svg_path})


def run_eval_nav(cfg: ExperimentConfig, checkpoint: str, skills_dir: str,
                 perception: str, n_rollouts: int = 32, use_sensing: bool = False,
                 level: float = None, traj: bool = False) -> RunManifest:
    t0 = time.time()
    policy = NavPolicy.load(checkpoint)
    catalog = SkillCatalog.load(skills_dir)
    model = navigation._load_perception(perception)
    out = os.path.join(cfg.out_dir, f"eval_nav_{policy.meta.world_kind}")
    os.makedirs(out, exist_ok=True)
    traj_path = os.path.join(out, "trajectories.jsonl") if traj else None
    res = navigation.evaluate_navigation(
        policy, catalog, model, n_rollouts=n_rollouts, seed=cfg.seed,
        level=level, use_sensing=use_sensing, traj_path=traj_path)
    csv_path = os.path.join(out, "metrics.csv")
    write_metrics_csv(csv_path,
                      ["world_kind", "level", "n_rollouts", "success_rate",
                       "mean_time_to_goal", "skill_histogram", "use_sensing"],
                      [{k: res[k] for k in
                        ("world_kind", "level", "n_rollouts", "success_rate",
                         "mean_time_to_goal", "skill_histogram", "use_sensing")}])
    metrics = {"metrics": csv_path}
    if traj_path:
        metrics["trajectories"] = traj_path
    return _manifest("eval-nav", cfg, out, t0, {"nav": checkpoint}, metrics)


def run_sweep(cfg: ExperimentConfig, checkpoints: list, sweep: str = "0:1.2:0.1",
              n_rollouts: int = 16, n_threads: int = 2) -> RunManifest:
    """Difficulty sweep fanned out over several skill checkpoints at once."""
    t0 = time.time()
    difficulties = _parse_sweep(sweep)
    policies = [SkillPolicy.load(c) for c in checkpoints]

    def one(args):
        pol, d = args
        curve = evaluate_skill(pol, pol.meta.skill, [d], n_rollouts=n_rollouts,
                               seed=cfg.seed)
        return {"skill": pol.meta.skill, "difficulty": d,
                "success_rate": curve[0][1], "n_rollouts": n_rollouts}

    jobs = [(p, d) for p in policies for d in difficulties]
    with ThreadPoolExecutor(max_workers=max(n_threads, 1)) as pool:
        rows = list(pool.map(one, jobs))
    out = os.path.join(cfg.out_dir, "sweep")
    os.makedirs(out, exist_ok=True)
    csv_path = os.path.join(out, "metrics.csv")
    write_metrics_csv(csv_path, ["skill", "difficulty", "success_rate", "n_rollouts"], rows)
    curves, labels = [], []
    for pol in policies:
        sub = [r for r in rows if r["skill"] == pol.meta.skill]
        curves.append(([r["difficulty"] for r in sub], [r["success_rate"] for r in sub]))
        labels.append(pol.meta.skill)
    svg_path = os.path.join(out, "sweep.svg")
    with open(svg_path, "w") as f:
        f.write(emit_svg(curves, labels, title="success vs difficulty",
                         xlabel="difficulty", ylabel="success rate"))
    ckpts = {f"skill_{p.meta.skill}": c for p, c in zip(policies, checkpoints)}
    return _manifest("sweep", cfg, out, t0, ckpts,
                     {"metrics": csv_path, "plot": svg_path})


def run_plot_table(cfg: ExperimentConfig, table: str, skills_dir: str,
                   perception: str, nav_checkpoints: dict,
                   n_rollouts: int = 300) -> RunManifest:
    """Emit one of the summary tables as CSV (+ bar SVG)."""
    t0 = time.time()
    out = os.path.join(cfg.out_dir, f"table_{table}")
    os.makedirs(out, exist_ok=True)
    csv_path = os.path.join(out, "metrics.csv")
    if table == "comparison":
        rows = navigation.compare_navigation(
            nav_checkpoints, skills_dir, perception, csv_path,
            n_rollouts=n_rollouts, seed=cfg.seed)
    else:
        raise ConfigurationError(f"unknown table {table!r}; available: comparison")
    svg_path = os.path.join(out, f"{table}.svg")
    kinds = sorted({r["terrain"] for r in rows})
    curves, labels = [], []
    for variant in ("ours", "manual"):
        ys = [next(r["success_rate"] for r in rows
                   if r["terrain"] == k and r["variant"] == variant) for k in kinds]
        curves.append((list(range(len(kinds))), ys))
        labels.append(variant)
    with open(svg_path, "w") as f:
        f.write(emit_svg(curves, labels, title=f"success by terrain ({', '.join(kinds)})",
                         xlabel="terrain index", ylabel="success rate"))
    return _manifest("plot", cfg, out, t0, {}, {"metrics": csv_path, "plot": svg_path})


def run_plot_csv(cfg: ExperimentConfig, csv_file: str, x: str, y: str) -> RunManifest:
    """Plot one CSV column against another, grouped by nothing."""
    import csv as _csv

    t0 = time.time()
    try:
        with open(csv_file) as f:
            rows = list(_csv.DictReader(f))
    except FileNotFoundError:
        raise ConfigurationError(f"no such CSV: {csv_file}")
    if rows and (x not in rows[0] or y not in rows[0]):
        raise ConfigurationError(f"CSV lacks columns {x!r}/{y!r}")
    xs = [float(r[x]) for r in rows]
    ys = [float(r[y]) for r in rows]
    out = os.path.join(cfg.out_dir, "plot")
    os.makedirs(out, exist_ok=True)
    svg_path = os.path.join(out, "plot.svg")
    with open(svg_path, "w") as f:
        f.write(emit_svg([(xs, ys)] if xs else [], [y], xlabel=x, ylabel=y))
    return _manifest("plot", cfg, out, t0, {}, {"plot": svg_path})


def run_replay(cfg: ExperimentConfig, traj_file: str, index: int = 0) -> RunManifest:
    """Re-draw one recorded rollout over its regenerated terrain."""
    t0 = time.time()
    try:
        with open(traj_file) as f:
            lines = f.read().splitlines()
    except FileNotFoundError:
        raise ConfigurationError(f"no such trajectory file: {traj_file}")
    if not (0 <= index < len(lines)):
        raise ConfigurationError(f"trajectory index {index} out of range 0..{len(lines) - 1}")
    row = json.loads(lines[index])
    terrain = generate_world(row["kind"], row["seed"], row["difficulty"])
    out = os.path.join(cfg.out_dir, "replay")
    os.makedirs(out, exist_ok=True)
    svg_path = os.path.join(out, f"replay_{index}.svg")
    with open(svg_path, "w") as f:
        f.write(emit_topdown_svg(terrain, row.get("poses", []), row.get("goal")))
    return _manifest("replay", cfg, out, t0, {}, {"plot": svg_path})
