"""Forward and backward EWA splatting of Gaussian scenes.

Forward model, per camera:

* Gaussian means are moved to the camera frame; means with depth <= near are
  skipped.
* The world covariance R S S^T R^T is pushed through the first-order projection
  Jacobian: Sigma2D = (J W) Sigma (J W)^T + dilation * I, where the dilation
  term is the EWA screen-space low-pass filter (keeps sub-pixel splats from
  aliasing).
* Per pixel, contributions composite front to back in increasing order of mean
  camera depth (ties broken by Gaussian index). The per-splat opacity is
  opacity * exp(-Q/2) * (1 - Q/9)^2 for Q = d^T Sigma2D^{-1} d < 9 and zero
  beyond: a Gaussian falloff with a C1 window truncating at 3 sigma.
* Expected depth is sum(w_i z_i) / max(sum w_i, 1e-8); pixels no splat touches
  report the far plane.

The backward pass is analytic and exact for this forward model (the truncation
window included); it is validated against central finite differences in the
test suite. Compositing runs in numba kernels; per-pixel order is depth-sorted,
so output is bit-identical regardless of the tile decomposition.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .gaussians import (
    GaussianScene,
    GroupGradients,
    SceneGradients,
    sigmoid,
)
from .geometry import CameraModel, rot_z

DEPTH_WEIGHT_EPS = 1e-8


@dataclass
class RenderOutput:
    """Rendered color, expected depth, accumulated alpha, per-agent alpha."""

    color: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) meters
    alpha: np.ndarray  # (H, W) in [0, 1]
    agent_alpha: dict  # agent_id -> (H, W)


@dataclass(frozen=True)
class FieldLearningRates:
    means: float = 0.0
    log_scales: float = 0.0
    rotations: float = 0.0
    logit_opacities: float = 0.0
    colors: float = 0.0


# ---------------------------------------------------------------------------
# Quaternion <-> rotation with gradients


def quat_to_rot(q: np.ndarray) -> np.ndarray:
    """Rotation matrices (n, 3, 3) from quaternions (n, 4); normalizes inside."""
    q = np.asarray(q, dtype=np.float64).reshape(-1, 4)
    n = q / np.linalg.norm(q, axis=1, keepdims=True)
    w, x, y, z = n[:, 0], n[:, 1], n[:, 2], n[:, 3]
    R = np.empty((q.shape[0], 3, 3))
    R[:, 0, 0] = 1 - 2 * (y * y + z * z)
    R[:, 0, 1] = 2 * (x * y - w * z)
    R[:, 0, 2] = 2 * (x * z + w * y)
    R[:, 1, 0] = 2 * (x * y + w * z)
    R[:, 1, 1] = 1 - 2 * (x * x + z * z)
    R[:, 1, 2] = 2 * (y * z - w * x)
    R[:, 2, 0] = 2 * (x * z - w * y)
    R[:, 2, 1] = 2 * (y * z + w * x)
    R[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_rot_backward(q: np.ndarray, G: np.ndarray) -> np.ndarray:
    """Pull a rotation-matrix cotangent (n, 3, 3) back to raw quaternions,
    including the normalization chain."""
    q = np.asarray(q, dtype=np.float64).reshape(-1, 4)
    nrm = np.linalg.norm(q, axis=1, keepdims=True)
    n = q / nrm
    w, x, y, z = n[:, 0], n[:, 1], n[:, 2], n[:, 3]
    g = G
    gw = (-2 * z * g[:, 0, 1] + 2 * y * g[:, 0, 2]
          + 2 * z * g[:, 1, 0] - 2 * x * g[:, 1, 2]
          - 2 * y * g[:, 2, 0] + 2 * x * g[:, 2, 1])
    gx = (2 * y * g[:, 0, 1] + 2 * z * g[:, 0, 2]
          + 2 * y * g[:, 1, 0] - 4 * x * g[:, 1, 1] - 2 * w * g[:, 1, 2]
          + 2 * z * g[:, 2, 0] + 2 * w * g[:, 2, 1] - 4 * x * g[:, 2, 2])
    gy = (-4 * y * g[:, 0, 0] + 2 * x * g[:, 0, 1] + 2 * w * g[:, 0, 2]
          + 2 * x * g[:, 1, 0] + 2 * z * g[:, 1, 2]
          - 2 * w * g[:, 2, 0] + 2 * z * g[:, 2, 1] - 4 * y * g[:, 2, 2])
    gz = (-4 * z * g[:, 0, 0] - 2 * w * g[:, 0, 1] + 2 * x * g[:, 0, 2]
          + 2 * w * g[:, 1, 0] - 4 * z * g[:, 1, 1] + 2 * y * g[:, 1, 2]
          + 2 * x * g[:, 2, 0] + 2 * y * g[:, 2, 1])
    gn = np.stack([gw, gx, gy, gz], axis=1)
    # project through normalization: d(n)/d(q) = (I - n n^T) / |q|
    return (gn - n * np.sum(n * gn, axis=1, keepdims=True)) / nrm


# ---------------------------------------------------------------------------
# Scene flattening


@dataclass
class _FlatScene:
    means_w: np.ndarray      # (N, 3)
    rot_w: np.ndarray        # (N, 3, 3)
    log_scales: np.ndarray   # (N, 3)
    opacities: np.ndarray    # (N,) sigmoid-decoded
    colors: np.ndarray       # (N, 3)
    channel: np.ndarray      # (N,) int64; -1 static, else agent slot
    agent_ids: list
    segments: list           # (kind, agent_id or None, start, end) slices into N
    track_rots: dict         # agent_id -> (3, 3) world rotation of the box pose


def _flatten_scene(scene: GaussianScene, frame_index: int) -> _FlatScene:
    means, rots, log_scales, opac, colors, chan = [], [], [], [], [], []
    segments = []
    track_rots = {}
    start = 0

    g = scene.static
    if len(g):
        means.append(g.means)
        rots.append(quat_to_rot(g.rotations))
        log_scales.append(g.log_scales)
        opac.append(sigmoid(g.logit_opacities))
        colors.append(g.colors)
        chan.append(np.full(len(g), -1, dtype=np.int64))
    segments.append(("static", None, start, start + len(g)))
    start += len(g)

    agent_ids = list(scene.agents.keys())
    for slot, aid in enumerate(agent_ids):
        agent = scene.agents[aid]
        box = agent.box_at(frame_index)
        rt = rot_z(box.yaw)
        track_rots[aid] = rt
        g = agent.gaussians
        if len(g):
            means.append(g.means @ rt.T + box.center)
            rots.append(np.einsum("ij,njk->nik", rt, quat_to_rot(g.rotations)))
            log_scales.append(g.log_scales)
            opac.append(sigmoid(g.logit_opacities))
            colors.append(g.colors)
            chan.append(np.full(len(g), slot, dtype=np.int64))
        segments.append(("agent", aid, start, start + len(g)))
        start += len(g)

    if start == 0:
        return _FlatScene(
            np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros((0, 3)), np.zeros(0),
            np.zeros((0, 3)), np.zeros(0, dtype=np.int64), agent_ids, segments, track_rots,
        )
    return _FlatScene(
        np.concatenate(means), np.concatenate(rots), np.concatenate(log_scales),
        np.concatenate(opac), np.concatenate(colors), np.concatenate(chan),
        agent_ids, segments, track_rots,
    )


# ---------------------------------------------------------------------------
# Camera-side preparation (shared by forward and backward)


@dataclass
class _Prepared:
    kept: np.ndarray        # indices into the flat scene, already depth-sorted
    m_cam: np.ndarray       # (M, 3) camera-frame means
    u: np.ndarray
    v: np.ndarray
    p00: np.ndarray
    p01: np.ndarray
    p11: np.ndarray
    P: np.ndarray           # (M, 2, 2)
    B: np.ndarray           # (M, 2, 3)
    U: np.ndarray           # (M, 2, 3)
    M3: np.ndarray          # (M, 3, 3)
    opac: np.ndarray
    colors: np.ndarray
    z: np.ndarray
    bbox: np.ndarray        # (M, 4) int64 inclusive pixel bounds x0, x1, y0, y1
    chan: np.ndarray
    tile_start: np.ndarray
    tile_items: np.ndarray
    n_tiles_x: int
    n_tiles_y: int
    max_tile_items: int


def _prepare(flat: _FlatScene, cam: CameraModel, dilation: float, tile_size: int):
    n = flat.means_w.shape[0]
    if n == 0:
        return None
    rcw = cam.pose.rotation
    t = cam.pose.translation
    m_all = (flat.means_w - t) @ rcw  # camera-frame means, row convention
    front = m_all[:, 2] > cam.near
    idx = np.nonzero(front)[0]
    if idx.size == 0:
        return None

    m = m_all[idx]
    x, y, z = m[:, 0], m[:, 1], m[:, 2]
    s = np.exp(flat.log_scales[idx])
    M3 = flat.rot_w[idx] * s[:, None, :]

    J = np.zeros((idx.size, 2, 3))
    J[:, 0, 0] = cam.fx / z
    J[:, 0, 2] = -cam.fx * x / (z * z)
    J[:, 1, 1] = cam.fy / z
    J[:, 1, 2] = -cam.fy * y / (z * z)
    U = np.einsum("nij,jk->nik", J, rcw.T)  # J @ W with W = rcw^T
    B = np.einsum("nij,njk->nik", U, M3)
    cov = np.einsum("nij,nkj->nik", B, B)
    cov[:, 0, 0] += dilation
    cov[:, 1, 1] += dilation

    det = cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2
    inv_det = 1.0 / det
    p00 = cov[:, 1, 1] * inv_det
    p01 = -cov[:, 0, 1] * inv_det
    p11 = cov[:, 0, 0] * inv_det
    P = np.empty_like(cov)
    P[:, 0, 0] = p00
    P[:, 0, 1] = p01
    P[:, 1, 0] = p01
    P[:, 1, 1] = p11

    u = cam.fx * x / z + cam.cx
    v = cam.fy * y / z + cam.cy
    # 3-sigma extent of the Q < 9 ellipse along the screen axes
    rx = 3.0 * np.sqrt(np.maximum(cov[:, 0, 0], 0.0))
    ry = 3.0 * np.sqrt(np.maximum(cov[:, 1, 1], 0.0))
    x0 = np.maximum(np.ceil(u - rx), 0.0).astype(np.int64)
    x1 = np.minimum(np.floor(u + rx), cam.width - 1).astype(np.int64)
    y0 = np.maximum(np.ceil(v - ry), 0.0).astype(np.int64)
    y1 = np.minimum(np.floor(v + ry), cam.height - 1).astype(np.int64)
    on_screen = (x0 <= x1) & (y0 <= y1)
    if not np.any(on_screen):
        return None

    def take(a):
        return np.ascontiguousarray(a[on_screen])

    m, u, v, z = take(m), take(u), take(v), take(z)
    p00, p01, p11 = take(p00), take(p01), take(p11)
    P, B, U, M3 = take(P), take(B), take(U), take(M3)
    bbox = np.stack([take(x0), take(x1), take(y0), take(y1)], axis=1)
    kept = idx[on_screen]

    # depth sort, ties broken by original Gaussian index
    order = np.lexsort((kept, z))
    kept = kept[order]
    m, u, v, z = m[order], u[order], v[order], z[order]
    p00, p01, p11 = p00[order], p01[order], p11[order]
    P, B, U, M3 = P[order], B[order], U[order], M3[order]
    bbox = np.ascontiguousarray(bbox[order])

    n_tiles_x = (cam.width + tile_size - 1) // tile_size
    n_tiles_y = (cam.height + tile_size - 1) // tile_size
    tile_start, tile_items = _build_tile_lists(bbox, tile_size, n_tiles_x, n_tiles_y)
    max_items = int(np.max(np.diff(tile_start))) if tile_items.size else 0

    return _Prepared(
        kept=kept, m_cam=m, u=u, v=v, p00=p00, p01=p01, p11=p11, P=P, B=B, U=U,
        M3=M3, opac=np.ascontiguousarray(flat.opacities[kept]),
        colors=np.ascontiguousarray(flat.colors[kept]), z=np.ascontiguousarray(z),
        bbox=bbox, chan=np.ascontiguousarray(flat.channel[kept]),
        tile_start=tile_start, tile_items=tile_items,
        n_tiles_x=n_tiles_x, n_tiles_y=n_tiles_y, max_tile_items=max_items,
    )


@njit(cache=True)
def _build_tile_lists(bbox, tile_size, n_tiles_x, n_tiles_y):
    m = bbox.shape[0]
    n_tiles = n_tiles_x * n_tiles_y
    counts = np.zeros(n_tiles + 1, dtype=np.int64)
    for g in range(m):
        tx0 = bbox[g, 0] // tile_size
        tx1 = bbox[g, 1] // tile_size
        ty0 = bbox[g, 2] // tile_size
        ty1 = bbox[g, 3] // tile_size
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                counts[ty * n_tiles_x + tx + 1] += 1
    for i in range(1, n_tiles + 1):
        counts[i] += counts[i - 1]
    items = np.empty(counts[n_tiles], dtype=np.int64)
    cursor = counts[:-1].copy()
    for g in range(m):
        tx0 = bbox[g, 0] // tile_size
        tx1 = bbox[g, 1] // tile_size
        ty0 = bbox[g, 2] // tile_size
        ty1 = bbox[g, 3] // tile_size
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                tid = ty * n_tiles_x + tx
                items[cursor[tid]] = g
                cursor[tid] += 1
    return counts, items


# ---------------------------------------------------------------------------
# Compositing kernels


@njit(cache=True)
def _forward_kernel(u, v, p00, p01, p11, opac, colors, z, bbox, chan,
                    tile_start, tile_items, tile_size, n_tiles_x, n_tiles_y,
                    height, width, n_chan):
    color = np.zeros((height, width, 3))
    wsum = np.zeros((height, width))
    dnum = np.zeros((height, width))
    trans = np.ones((height, width))
    chan_alpha = np.zeros((n_chan, height, width))
    for ty in range(n_tiles_y):
        for tx in range(n_tiles_x):
            t = ty * n_tiles_x + tx
            s_it = tile_start[t]
            e_it = tile_start[t + 1]
            if s_it == e_it:
                continue
            y_end = min((ty + 1) * tile_size, height)
            x_end = min((tx + 1) * tile_size, width)
            for py in range(ty * tile_size, y_end):
                for px in range(tx * tile_size, x_end):
                    T = 1.0
                    c0 = 0.0
                    c1 = 0.0
                    c2 = 0.0
                    ws = 0.0
                    dn = 0.0
                    for ii in range(s_it, e_it):
                        g = tile_items[ii]
                        if px < bbox[g, 0] or px > bbox[g, 1] or py < bbox[g, 2] or py > bbox[g, 3]:
                            continue
                        d0 = px - u[g]
                        d1 = py - v[g]
                        q = p00[g] * d0 * d0 + 2.0 * p01[g] * d0 * d1 + p11[g] * d1 * d1
                        if q >= 9.0:
                            continue
                        w9 = 1.0 - q / 9.0
                        a = opac[g] * np.exp(-0.5 * q) * w9 * w9
                        w = a * T
                        c0 += w * colors[g, 0]
                        c1 += w * colors[g, 1]
                        c2 += w * colors[g, 2]
                        ws += w
                        dn += w * z[g]
                        cc = chan[g]
                        if cc >= 0:
                            chan_alpha[cc, py, px] += w
                        T *= 1.0 - a
                    color[py, px, 0] = c0
                    color[py, px, 1] = c1
                    color[py, px, 2] = c2
                    wsum[py, px] = ws
                    dnum[py, px] = dn
                    trans[py, px] = T
    return color, wsum, dnum, trans, chan_alpha


@njit(cache=True)
def _backward_kernel(u, v, p00, p01, p11, opac, colors, z, bbox, chan,
                     tile_start, tile_items, tile_size, n_tiles_x, n_tiles_y,
                     height, width, bg, d_color, d_depth, eps, max_items):
    m = u.shape[0]
    g_col = np.zeros((m, 3))
    g_op = np.zeros(m)
    g_m2d = np.zeros((m, 2))
    g_p = np.zeros((m, 3))  # packed symmetric cotangent: (00, 01, 11)
    g_z = np.zeros(m)
    buf_idx = np.empty(max_items, dtype=np.int64)
    buf_a = np.empty(max_items)
    buf_t = np.empty(max_items)
    for ty in range(n_tiles_y):
        for tx in range(n_tiles_x):
            t = ty * n_tiles_x + tx
            s_it = tile_start[t]
            e_it = tile_start[t + 1]
            if s_it == e_it:
                continue
            y_end = min((ty + 1) * tile_size, height)
            x_end = min((tx + 1) * tile_size, width)
            for py in range(ty * tile_size, y_end):
                for px in range(tx * tile_size, x_end):
                    # replay the forward compositing, remembering (a, T_before)
                    cnt = 0
                    T = 1.0
                    ws = 0.0
                    dn = 0.0
                    for ii in range(s_it, e_it):
                        g = tile_items[ii]
                        if px < bbox[g, 0] or px > bbox[g, 1] or py < bbox[g, 2] or py > bbox[g, 3]:
                            continue
                        d0 = px - u[g]
                        d1 = py - v[g]
                        q = p00[g] * d0 * d0 + 2.0 * p01[g] * d0 * d1 + p11[g] * d1 * d1
                        if q >= 9.0:
                            continue
                        w9 = 1.0 - q / 9.0
                        a = opac[g] * np.exp(-0.5 * q) * w9 * w9
                        buf_idx[cnt] = g
                        buf_a[cnt] = a
                        buf_t[cnt] = T
                        cnt += 1
                        w = a * T
                        ws += w
                        dn += w * z[g]
                        T *= 1.0 - a
                    if cnt == 0:
                        continue
                    t_final = T
                    if ws > eps:
                        dd_dn = 1.0 / ws
                        dd_dw = -dn / (ws * ws)
                    else:
                        dd_dn = 1.0 / eps
                        dd_dw = 0.0
                    dlc0 = d_color[py, px, 0]
                    dlc1 = d_color[py, px, 1]
                    dlc2 = d_color[py, px, 2]
                    dld = d_depth[py, px]
                    sc0 = 0.0
                    sc1 = 0.0
                    sc2 = 0.0
                    sz = 0.0
                    sw = 0.0
                    for k in range(cnt - 1, -1, -1):
                        g = buf_idx[k]
                        a = buf_a[k]
                        tb = buf_t[k]
                        w = a * tb
                        om = 1.0 - a
                        g_col[g, 0] += w * dlc0
                        g_col[g, 1] += w * dlc1
                        g_col[g, 2] += w * dlc2
                        g_z[g] += dld * dd_dn * w
                        dcol_da0 = tb * colors[g, 0] - (sc0 + t_final * bg[0]) / om
                        dcol_da1 = tb * colors[g, 1] - (sc1 + t_final * bg[1]) / om
                        dcol_da2 = tb * colors[g, 2] - (sc2 + t_final * bg[2]) / om
                        dws_da = tb - sw / om
                        ddn_da = tb * z[g] - sz / om
                        dl_da = (dlc0 * dcol_da0 + dlc1 * dcol_da1 + dlc2 * dcol_da2
                                 + dld * (dd_dn * ddn_da + dd_dw * dws_da))
                        gauss = a / opac[g]
                        g_op[g] += dl_da * gauss
                        dl_dg = dl_da * opac[g]
                        d0 = px - u[g]
                        d1 = py - v[g]
                        q = p00[g] * d0 * d0 + 2.0 * p01[g] * d0 * d1 + p11[g] * d1 * d1
                        w9 = 1.0 - q / 9.0
                        dg_dq = np.exp(-0.5 * q) * (-0.5 * w9 * w9 - (2.0 / 9.0) * w9)
                        dl_dq = dl_dg * dg_dq
                        g_m2d[g, 0] += dl_dq * (-2.0) * (p00[g] * d0 + p01[g] * d1)
                        g_m2d[g, 1] += dl_dq * (-2.0) * (p01[g] * d0 + p11[g] * d1)
                        g_p[g, 0] += dl_dq * d0 * d0
                        g_p[g, 1] += dl_dq * d0 * d1
                        g_p[g, 2] += dl_dq * d1 * d1
                        sc0 += w * colors[g, 0]
                        sc1 += w * colors[g, 1]
                        sc2 += w * colors[g, 2]
                        sz += w * z[g]
                        sw += w
    return g_col, g_op, g_m2d, g_p, g_z


# ---------------------------------------------------------------------------
# Public API


def render(scene: GaussianScene, cam: CameraModel, frame_index: int, *,
           dilation: float = 0.3, tile_size: int = 16) -> RenderOutput:
    """Render the scene through `cam` at `frame_index`.

    Deterministic: identical inputs give bit-identical output, independent of
    `tile_size`.
    """
    flat = _flatten_scene(scene, frame_index)
    h, w = cam.height, cam.width
    bg = scene.background_color
    prep = _prepare(flat, cam, dilation, tile_size)
    if prep is None:
        return RenderOutput(
            color=np.tile(bg, (h, w, 1)),
            depth=np.full((h, w), cam.far),
            alpha=np.zeros((h, w)),
            agent_alpha={aid: np.zeros((h, w)) for aid in flat.agent_ids},
        )
    color_acc, wsum, dnum, trans, chan_alpha = _forward_kernel(
        prep.u, prep.v, prep.p00, prep.p01, prep.p11, prep.opac, prep.colors,
        prep.z, prep.bbox, prep.chan, prep.tile_start, prep.tile_items,
        tile_size, prep.n_tiles_x, prep.n_tiles_y, h, w, max(1, len(flat.agent_ids)),
    )
    color = color_acc + trans[:, :, None] * bg
    depth = np.where(wsum > 0.0, dnum / np.maximum(wsum, DEPTH_WEIGHT_EPS), cam.far)
    return RenderOutput(
        color=color,
        depth=depth,
        alpha=1.0 - trans,
        agent_alpha={aid: chan_alpha[slot] for slot, aid in enumerate(flat.agent_ids)},
    )


def render_backward(scene: GaussianScene, cam: CameraModel, frame_index: int,
                    d_color: np.ndarray, d_depth: np.ndarray | None = None, *,
                    dilation: float = 0.3, tile_size: int = 16) -> SceneGradients:
    """Gradients of a scalar loss w.r.t. every Gaussian parameter.

    `d_color` (H, W, 3) and optional `d_depth` (H, W) are the loss cotangents
    for the rendered color and expected-depth images. Agent track poses are
    fixed inputs and receive no gradient.
    """
    flat = _flatten_scene(scene, frame_index)
    grads = SceneGradients.zeros_like(scene)
    prep = _prepare(flat, cam, dilation, tile_size)
    if prep is None:
        return grads
    h, w = cam.height, cam.width
    d_color = np.ascontiguousarray(d_color, dtype=np.float64)
    if d_depth is None:
        d_depth = np.zeros((h, w))
    d_depth = np.ascontiguousarray(d_depth, dtype=np.float64)

    g_col, g_op, g_m2d, g_p_packed, g_z = _backward_kernel(
        prep.u, prep.v, prep.p00, prep.p01, prep.p11, prep.opac, prep.colors,
        prep.z, prep.bbox, prep.chan, prep.tile_start, prep.tile_items,
        tile_size, prep.n_tiles_x, prep.n_tiles_y, h, w,
        np.ascontiguousarray(scene.background_color), d_color, d_depth,
        DEPTH_WEIGHT_EPS, max(1, prep.max_tile_items),
    )

    # chain: precision matrix -> 2D covariance -> (B, projection Jacobian, world cov)
    gp = np.empty((g_p_packed.shape[0], 2, 2))
    gp[:, 0, 0] = g_p_packed[:, 0]
    gp[:, 0, 1] = g_p_packed[:, 1]
    gp[:, 1, 0] = g_p_packed[:, 1]
    gp[:, 1, 1] = g_p_packed[:, 2]
    g_cov = -np.einsum("nij,njk,nkl->nil", prep.P, gp, prep.P)
    g_b = 2.0 * np.einsum("nij,njk->nik", g_cov, prep.B)
    g_u = np.einsum("nij,nkj->nik", g_b, prep.M3)     # g_b @ M3^T
    g_m3 = np.einsum("nji,njk->nik", prep.U, g_b)     # U^T @ g_b
    rcw = cam.pose.rotation
    g_j = np.einsum("nij,kj->nik", g_u, rcw.T)        # g_u @ W^T, W = rcw^T

    x, y = prep.m_cam[:, 0], prep.m_cam[:, 1]
    z = prep.z
    fx, fy = cam.fx, cam.fy
    inv_z = 1.0 / z
    inv_z2 = inv_z * inv_z
    g_m = np.zeros((z.shape[0], 3))
    # projection of the mean
    g_m[:, 0] += g_m2d[:, 0] * fx * inv_z
    g_m[:, 1] += g_m2d[:, 1] * fy * inv_z
    g_m[:, 2] += -g_m2d[:, 0] * fx * x * inv_z2 - g_m2d[:, 1] * fy * y * inv_z2
    # composited depth value
    g_m[:, 2] += g_z
    # Jacobian entries J00 = fx/z, J02 = -fx x/z^2, J11 = fy/z, J12 = -fy y/z^2
    g_m[:, 0] += g_j[:, 0, 2] * (-fx * inv_z2)
    g_m[:, 1] += g_j[:, 1, 2] * (-fy * inv_z2)
    g_m[:, 2] += (g_j[:, 0, 0] * (-fx * inv_z2)
                  + g_j[:, 1, 1] * (-fy * inv_z2)
                  + g_j[:, 0, 2] * (2.0 * fx * x * inv_z2 * inv_z)
                  + g_j[:, 1, 2] * (2.0 * fy * y * inv_z2 * inv_z))

    g_mean_w = g_m @ rcw.T  # m = (mu - t) @ rcw (row form)

    s = np.exp(flat.log_scales[prep.kept])
    rot_w = flat.rot_w[prep.kept]
    g_rot_w = g_m3 * s[:, None, :]
    g_log_scales = np.einsum("nrk,nrk->nk", rot_w, g_m3) * s

    op = prep.opac
    g_logit = g_op * op * (1.0 - op)

    # scatter back to full flat-scene index space
    n_flat = flat.means_w.shape[0]
    full = {
        "mean_w": np.zeros((n_flat, 3)),
        "rot_w": np.zeros((n_flat, 3, 3)),
        "log_scales": np.zeros((n_flat, 3)),
        "logit": np.zeros(n_flat),
        "color": np.zeros((n_flat, 3)),
    }
    full["mean_w"][prep.kept] = g_mean_w
    full["rot_w"][prep.kept] = g_rot_w
    full["log_scales"][prep.kept] = g_log_scales
    full["logit"][prep.kept] = g_logit
    full["color"][prep.kept] = g_col

    for kind, aid, a, b in flat.segments:
        if b == a:
            continue
        if kind == "static":
            target = grads.static
            g_mean = full["mean_w"][a:b]
            g_rot = full["rot_w"][a:b]
            quats = scene.static.rotations
        else:
            target = grads.agents[aid]
            rt = flat.track_rots[aid]
            g_mean = full["mean_w"][a:b] @ rt       # mu_w = mu_l @ rt^T + c
            g_rot = np.einsum("ij,njk->nik", rt.T, full["rot_w"][a:b])
            quats = scene.agents[aid].gaussians.rotations
        target.means[:] = g_mean
        target.log_scales[:] = full["log_scales"][a:b]
        target.rotations[:] = quat_rot_backward(quats, g_rot)
        target.logit_opacities[:] = full["logit"][a:b]
        target.colors[:] = full["color"][a:b]
    return grads


def apply_gradients(scene: GaussianScene, grads: SceneGradients,
                    lrs: FieldLearningRates) -> GaussianScene:
    """One plain gradient-descent step with per-field learning rates.

    Quaternions are renormalized and colors clamped back to [0, 1] so the
    updated scene keeps its invariants.
    """
    out = scene.copy()

    def step(group, g: GroupGradients):
        group.means -= lrs.means * g.means
        group.log_scales -= lrs.log_scales * g.log_scales
        group.rotations -= lrs.rotations * g.rotations
        group.logit_opacities -= lrs.logit_opacities * g.logit_opacities
        group.colors -= lrs.colors * g.colors
        np.clip(group.colors, 0.0, 1.0, out=group.colors)
        norms = np.linalg.norm(group.rotations, axis=1, keepdims=True)
        group.rotations /= np.maximum(norms, 1e-12)

    step(out.static, grads.static)
    for aid, agent in out.agents.items():
        step(agent.gaussians, grads.agents[aid])
    return out
