"""Independent reference implementations used to pin expected values.

Everything here is written the slow, obvious way (python loops, float64)
and must stay free of imports from the library internals it checks, apart
from type constructors where unavoidable.
"""

from __future__ import annotations

import numpy as np


def fd_grad(loss_fn, buf: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of loss_fn() wrt the float32 buffer buf,
    perturbing it in place."""
    g = np.zeros(buf.size, dtype=np.float64)
    flat = buf.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + np.float32(h)
        lp = float(loss_fn())
        flat[i] = old - np.float32(h)
        lm = float(loss_fn())
        flat[i] = old
        g[i] = (lp - lm) / (2.0 * h)
    return g.reshape(buf.shape)


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / denom))


def conv3d_direct(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> np.ndarray:
    """Seven explicit loops, float64."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    B, C, D, H, W = x.shape
    F = w.shape[0]
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    Do = (D + 2 * pad - 3) // stride + 1
    Ho = (H + 2 * pad - 3) // stride + 1
    Wo = (W + 2 * pad - 3) // stride + 1
    out = np.zeros((B, F, Do, Ho, Wo))
    for b in range(B):
        for f in range(F):
            for od in range(Do):
                for oh in range(Ho):
                    for ow in range(Wo):
                        acc = 0.0
                        for c in range(C):
                            patch = x[
                                b, c,
                                od * stride : od * stride + 3,
                                oh * stride : oh * stride + 3,
                                ow * stride : ow * stride + 3,
                            ]
                            acc += float(np.sum(patch * w[f, c]))
                        out[b, f, od, oh, ow] = acc
    return out


def convT3d_direct(
    x: np.ndarray, w: np.ndarray, stride: int, pad: int, out_pad: int
) -> np.ndarray:
    """Scatter form of the transposed convolution, float64."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    B, C, D, H, W = x.shape
    F = w.shape[1]
    Do = (D - 1) * stride + 3 - 2 * pad + out_pad
    Ho = (H - 1) * stride + 3 - 2 * pad + out_pad
    Wo = (W - 1) * stride + 3 - 2 * pad + out_pad
    full = np.zeros((B, F, Do + 2 * pad, Ho + 2 * pad, Wo + 2 * pad))
    for b in range(B):
        for c in range(C):
            for t in range(D):
                for u in range(H):
                    for v in range(W):
                        for f in range(F):
                            full[
                                b, f,
                                t * stride : t * stride + 3,
                                u * stride : u * stride + 3,
                                v * stride : v * stride + 3,
                            ] += x[b, c, t, u, v] * w[c, f]
    if pad:
        full = full[:, :, pad:-pad, pad:-pad, pad:-pad]
    return full


def adam_reference(
    param: np.ndarray, grads: list[np.ndarray], lr: float, b1: float, b2: float, eps: float
) -> np.ndarray:
    """Textbook Adam applied step by step in float32."""
    p = param.astype(np.float32).copy()
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        g = g.astype(np.float32)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        p = p - (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(np.float32)
    return p


def gae_reference(
    rewards: np.ndarray, values: np.ndarray, last_value: float, dones: np.ndarray,
    gamma: float, lam: float,
) -> np.ndarray:
    """Advantage at t as the explicit sum of discounted TD residuals,
    truncated at episode boundaries."""
    T = len(rewards)
    vals = np.concatenate([values, [last_value]]).astype(np.float64)
    adv = np.zeros(T)
    for t in range(T):
        acc = 0.0
        coef = 1.0
        for k in range(t, T):
            next_nonterminal = 1.0 - float(dones[k])
            delta = rewards[k] + gamma * vals[k + 1] * next_nonterminal - vals[k]
            acc += coef * delta
            if dones[k]:
                break
            coef *= gamma * lam
        adv[t] = acc
    return adv


def ray_aabb_reference(origin, direction, boxes, max_range):
    """Per-box slab test in a python loop; returns (hit distance or inf)."""
    best = np.inf
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    for box in boxes:
        lo, hi = np.asarray(box[:3], dtype=np.float64), np.asarray(box[3:], dtype=np.float64)
        tmin, tmax = 0.0, max_range
        ok = True
        for ax in range(3):
            if abs(d[ax]) < 1e-12:
                if o[ax] < lo[ax] or o[ax] > hi[ax]:
                    ok = False
                    break
            else:
                t1 = (lo[ax] - o[ax]) / d[ax]
                t2 = (hi[ax] - o[ax]) / d[ax]
                if t1 > t2:
                    t1, t2 = t2, t1
                tmin = max(tmin, t1)
                tmax = min(tmax, t2)
                if tmin > tmax:
                    ok = False
                    break
        if ok and tmin <= tmax and tmin < best:
            best = tmin
    return best


def box_cell_overlap_mc(
    box_lo, box_hi, cell_lo, cell_hi, yaw, grid_origin, rng, n=200_000
):
    """Monte-Carlo volume fraction and centroid of (world box) intersected
    with a grid cell, where the grid is rotated by yaw about grid_origin.
    Samples are drawn in the cell (grid frame); a sample is inside the box if
    its world-frame image lies in the box."""
    lo = np.asarray(cell_lo, dtype=np.float64)
    hi = np.asarray(cell_hi, dtype=np.float64)
    pts = rng.uniform(lo, hi, size=(n, 3))
    c, s = np.cos(yaw), np.sin(yaw)
    world = np.empty_like(pts)
    world[:, 0] = grid_origin[0] + c * pts[:, 0] - s * pts[:, 1]
    world[:, 1] = grid_origin[1] + s * pts[:, 0] + c * pts[:, 1]
    world[:, 2] = grid_origin[2] + pts[:, 2]
    inside = np.all((world >= np.asarray(box_lo)) & (world <= np.asarray(box_hi)), axis=1)
    frac = inside.mean()
    if not inside.any():
        return 0.0, np.full(3, np.nan)
    cent = (pts[inside] - lo).mean(axis=0) / (hi - lo)
    return float(frac), cent
