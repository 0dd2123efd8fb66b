"""Numba kernels: tile binning, front-to-back compositing and its adjoint."""

import math
import os

import numba
import numpy as np
from numba import njit, prange

# the TBB layer shipped with some numba wheels is too old and only produces a warning
if os.environ.get("NUMBA_THREADING_LAYER") is None:
    numba.config.THREADING_LAYER = "workqueue"

CUTOFF = 9.0  # squared Mahalanobis radius of the 3-sigma footprint
E45 = math.exp(-4.5)
KNORM = 1.0 / (1.0 - 5.5 * E45)


@njit(cache=True, inline="always")
def footprint(p):
    # exp(-p/2) minus its first-order expansion at p = 9: value and slope vanish at the cutoff.
    return (math.exp(-0.5 * p) - E45 * (1.0 + 0.5 * (CUTOFF - p))) * KNORM


@njit(cache=True, inline="always")
def footprint_grad(p):
    return 0.5 * (E45 - math.exp(-0.5 * p)) * KNORM


@njit(cache=True)
def bin_gaussians(order, tile_rect, tiles_x, n_tiles):
    """Per-tile Gaussian lists. ``order`` is already depth-sorted, so every list is too."""
    counts = np.zeros(n_tiles + 1, np.int64)
    for k in range(order.shape[0]):
        g = order[k]
        for ty in range(tile_rect[g, 2], tile_rect[g, 3] + 1):
            for tx in range(tile_rect[g, 0], tile_rect[g, 1] + 1):
                counts[ty * tiles_x + tx + 1] += 1
    offsets = np.cumsum(counts)
    cursor = offsets[:-1].copy()
    items = np.empty(offsets[-1], np.int64)
    for k in range(order.shape[0]):
        g = order[k]
        for ty in range(tile_rect[g, 2], tile_rect[g, 3] + 1):
            for tx in range(tile_rect[g, 0], tile_rect[g, 1] + 1):
                t = ty * tiles_x + tx
                items[cursor[t]] = g
                cursor[t] += 1
    return offsets, items


@njit(cache=True)
def mark_tiles(index, tile_rect, tiles_x, n_tiles):
    active = np.zeros(n_tiles, np.bool_)
    for g in index:
        for ty in range(tile_rect[g, 2], tile_rect[g, 3] + 1):
            for tx in range(tile_rect[g, 0], tile_rect[g, 1] + 1):
                active[ty * tiles_x + tx] = True
    return active


@njit(cache=True, inline="always")
def _gather_tile(items, start, end, mean2d, conic):
    # contiguous copies of the per-tile means and conics keep the pixel loop cache friendly
    m = end - start
    lx = np.empty(m)
    ly = np.empty(m)
    c0 = np.empty(m)
    c1 = np.empty(m)
    c2 = np.empty(m)
    for k in range(m):
        g = items[start + k]
        lx[k] = mean2d[g, 0]
        ly[k] = mean2d[g, 1]
        c0[k] = conic[g, 0]
        c1[k] = conic[g, 1]
        c2[k] = conic[g, 2]
    return lx, ly, c0, c1, c2


@njit(cache=True, parallel=True)
def rasterize_forward(offsets, items, mean2d, conic, opacity, color, depth, ident,
                      height, width, tile, tiles_x):
    n_feat = ident.shape[1]
    rgb = np.zeros((height, width, 3))
    dacc = np.zeros((height, width))
    trans = np.ones((height, width))
    feat = np.zeros((height, width, n_feat))
    n_tiles = offsets.shape[0] - 1
    for t in prange(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = offsets[t]
        end = offsets[t + 1]
        lx, ly, c0, c1, c2 = _gather_tile(items, start, end, mean2d, conic)
        for py in range(ty * tile, min(height, (ty + 1) * tile)):
            for px in range(tx * tile, min(width, (tx + 1) * tile)):
                T = 1.0
                for k in range(end - start):
                    dx = px - lx[k]
                    dy = py - ly[k]
                    p = c0[k] * dx * dx + 2.0 * c1[k] * dx * dy + c2[k] * dy * dy
                    if p >= CUTOFF:
                        continue
                    g = items[start + k]
                    a = opacity[g] * footprint(p)
                    w = a * T
                    for c in range(3):
                        rgb[py, px, c] += w * color[g, c]
                    dacc[py, px] += w * depth[g]
                    for c in range(n_feat):
                        feat[py, px, c] += w * ident[g, c]
                    T *= 1.0 - a
                trans[py, px] = T
    return rgb, dacc, trans, feat


@njit(cache=True)
def rasterize_backward(offsets, items, mean2d, conic, opacity, color, depth, ident,
                       height, width, tile, tiles_x, g_rgb, g_dacc, g_cov, g_feat, tile_active):
    """Adjoint of :func:`rasterize_forward`.

    ``g_cov`` is the adjoint of coverage (1 - transmittance). Tiles with
    ``tile_active`` false are skipped. Runs serially so the per-Gaussian
    accumulation order, and hence the result, is deterministic.
    """
    n = mean2d.shape[0]
    n_feat = ident.shape[1]
    use_feat = g_feat.shape[2] == n_feat and n_feat > 0
    g_mean2d = np.zeros((n, 2))
    g_conic = np.zeros((n, 3))
    g_opacity = np.zeros(n)
    g_color = np.zeros((n, 3))
    g_depth = np.zeros(n)
    g_ident = np.zeros((n, n_feat))
    n_tiles = offsets.shape[0] - 1
    for t in range(n_tiles):
        ty = t // tiles_x
        tx = t - ty * tiles_x
        start = offsets[t]
        end = offsets[t + 1]
        m_cap = end - start
        if m_cap == 0 or not tile_active[t]:
            continue
        b_idx = np.empty(m_cap, np.int64)
        b_a = np.empty(m_cap)
        b_T = np.empty(m_cap)
        b_k = np.empty(m_cap)
        b_p = np.empty(m_cap)
        b_dx = np.empty(m_cap)
        b_dy = np.empty(m_cap)
        lx, ly, c0, c1, c2 = _gather_tile(items, start, end, mean2d, conic)
        for py in range(ty * tile, min(height, (ty + 1) * tile)):
            for px in range(tx * tile, min(width, (tx + 1) * tile)):
                m = 0
                T = 1.0
                for k in range(m_cap):
                    dx = px - lx[k]
                    dy = py - ly[k]
                    p = c0[k] * dx * dx + 2.0 * c1[k] * dx * dy + c2[k] * dy * dy
                    if p >= CUTOFF:
                        continue
                    g = items[start + k]
                    kern = footprint(p)
                    a = opacity[g] * kern
                    b_idx[m] = g
                    b_a[m] = a
                    b_T[m] = T
                    b_k[m] = kern
                    b_p[m] = p
                    b_dx[m] = dx
                    b_dy[m] = dy
                    m += 1
                    T *= 1.0 - a
                gr0 = g_rgb[py, px, 0]
                gr1 = g_rgb[py, px, 1]
                gr2 = g_rgb[py, px, 2]
                gd = g_dacc[py, px]
                gc = g_cov[py, px]
                B = 0.0
                for j in range(m - 1, -1, -1):
                    g = b_idx[j]
                    a = b_a[j]
                    Tj = b_T[j]
                    w = a * Tj
                    gw = gr0 * color[g, 0] + gr1 * color[g, 1] + gr2 * color[g, 2] + gd * depth[g] + gc
                    g_color[g, 0] += gr0 * w
                    g_color[g, 1] += gr1 * w
                    g_color[g, 2] += gr2 * w
                    g_depth[g] += gd * w
                    if use_feat:
                        for c in range(n_feat):
                            gf = g_feat[py, px, c]
                            gw += gf * ident[g, c]
                            g_ident[g, c] += gf * w
                    ga = Tj * (gw - B)
                    B = gw * a + (1.0 - a) * B
                    g_opacity[g] += ga * b_k[j]
                    gp = ga * opacity[g] * footprint_grad(b_p[j])
                    dx = b_dx[j]
                    dy = b_dy[j]
                    g_mean2d[g, 0] -= gp * 2.0 * (conic[g, 0] * dx + conic[g, 1] * dy)
                    g_mean2d[g, 1] -= gp * 2.0 * (conic[g, 1] * dx + conic[g, 2] * dy)
                    g_conic[g, 0] += gp * dx * dx
                    g_conic[g, 1] += gp * 2.0 * dx * dy
                    g_conic[g, 2] += gp * dy * dy
    return g_mean2d, g_conic, g_opacity, g_color, g_depth, g_ident


@njit(cache=True)
def project(positions, scales, rotations, W, tvec, fx, fy, cx, cy, width, height, blur, near, tile):
    """Per-Gaussian camera-space center, EWA screen covariance (as a conic) and tile bounds."""
    n = positions.shape[0]
    p_cam = np.zeros((n, 3))
    mean2d = np.zeros((n, 2))
    conic = np.zeros((n, 3))
    cov_cam = np.zeros((n, 3, 3))
    rot = np.zeros((n, 3, 3))
    q_unit = np.zeros((n, 4))
    q_norm = np.ones(n)
    tile_rect = np.zeros((n, 4), np.int64)
    visible = np.zeros(n, np.bool_)
    U = np.empty((3, 3))
    C3 = np.empty((3, 3))
    T1 = np.empty((3, 3))
    for i in range(n):
        for r in range(3):
            p_cam[i, r] = (W[r, 0] * positions[i, 0] + W[r, 1] * positions[i, 1]
                           + W[r, 2] * positions[i, 2] + tvec[r])
        x = p_cam[i, 0]
        y = p_cam[i, 1]
        z = p_cam[i, 2]
        in_front = z > near
        zs = z if in_front else 1.0
        qn = math.sqrt(rotations[i, 0] ** 2 + rotations[i, 1] ** 2 + rotations[i, 2] ** 2 + rotations[i, 3] ** 2)
        if qn <= 0.0:
            qn = 1.0
        q_norm[i] = qn
        qw = rotations[i, 0] / qn
        qx = rotations[i, 1] / qn
        qy = rotations[i, 2] / qn
        qz = rotations[i, 3] / qn
        q_unit[i, 0] = qw
        q_unit[i, 1] = qx
        q_unit[i, 2] = qy
        q_unit[i, 3] = qz
        R = rot[i]
        R[0, 0] = 1 - 2 * (qy * qy + qz * qz)
        R[0, 1] = 2 * (qx * qy - qw * qz)
        R[0, 2] = 2 * (qx * qz + qw * qy)
        R[1, 0] = 2 * (qx * qy + qw * qz)
        R[1, 1] = 1 - 2 * (qx * qx + qz * qz)
        R[1, 2] = 2 * (qy * qz - qw * qx)
        R[2, 0] = 2 * (qx * qz - qw * qy)
        R[2, 1] = 2 * (qy * qz + qw * qx)
        R[2, 2] = 1 - 2 * (qx * qx + qy * qy)
        for a in range(3):
            for b in range(3):
                U[a, b] = R[a, b] * scales[i, b]
        for a in range(3):
            for b in range(3):
                C3[a, b] = U[a, 0] * U[b, 0] + U[a, 1] * U[b, 1] + U[a, 2] * U[b, 2]
        for a in range(3):
            for b in range(3):
                T1[a, b] = W[a, 0] * C3[0, b] + W[a, 1] * C3[1, b] + W[a, 2] * C3[2, b]
        for a in range(3):
            for b in range(3):
                cov_cam[i, a, b] = T1[a, 0] * W[b, 0] + T1[a, 1] * W[b, 1] + T1[a, 2] * W[b, 2]
        j00 = fx / zs
        j02 = -fx * x / (zs * zs)
        j11 = fy / zs
        j12 = -fy * y / (zs * zs)
        S = cov_cam[i]
        A = j00 * (j00 * S[0, 0] + j02 * S[2, 0]) + j02 * (j00 * S[0, 2] + j02 * S[2, 2]) + blur
        B = j00 * (j11 * S[0, 1] + j12 * S[0, 2]) + j02 * (j11 * S[2, 1] + j12 * S[2, 2])
        Cc = j11 * (j11 * S[1, 1] + j12 * S[2, 1]) + j12 * (j11 * S[1, 2] + j12 * S[2, 2]) + blur
        det = A * Cc - B * B
        ok = in_front and det > 0.0
        if not ok:
            det = 1.0
        conic[i, 0] = Cc / det
        conic[i, 1] = -B / det
        conic[i, 2] = A / det
        mid = 0.5 * (A + Cc)
        lam = mid + math.sqrt(max(mid * mid - det, 0.0))
        radius = 3.0 * math.sqrt(max(lam, 0.0))
        mu = fx * x / zs + cx
        mv = fy * y / zs + cy
        mean2d[i, 0] = mu
        mean2d[i, 1] = mv
        px0 = math.ceil(mu - radius)
        px1 = math.floor(mu + radius)
        py0 = math.ceil(mv - radius)
        py1 = math.floor(mv + radius)
        ok = ok and math.isfinite(mu) and math.isfinite(mv)
        ok = ok and px1 >= 0 and px0 <= width - 1 and py1 >= 0 and py0 <= height - 1
        visible[i] = ok
        if ok:
            tile_rect[i, 0] = int(min(max(px0, 0.0), width - 1.0)) // tile
            tile_rect[i, 1] = int(min(max(px1, 0.0), width - 1.0)) // tile
            tile_rect[i, 2] = int(min(max(py0, 0.0), height - 1.0)) // tile
            tile_rect[i, 3] = int(min(max(py1, 0.0), height - 1.0)) // tile
    return p_cam, mean2d, conic, cov_cam, rot, q_unit, q_norm, tile_rect, visible


@njit(cache=True)
def project_backward(index, p_cam, conic, cov_cam, rot, q_unit, q_norm, scales, W, fx, fy,
                     g_mean2d, g_conic, g_z):
    """Adjoint of :func:`project` for the Gaussians listed in ``index`` (others stay zero)."""
    n = p_cam.shape[0]
    g_pos = np.zeros((n, 3))
    g_scale = np.zeros((n, 3))
    g_quat = np.zeros((n, 4))
    J = np.zeros((2, 3))
    G2 = np.empty((2, 2))
    Gc = np.empty((3, 3))
    T = np.empty((3, 3))
    G3 = np.empty((3, 3))
    GU = np.empty((3, 3))
    GR = np.empty((3, 3))
    GJ = np.empty((2, 3))
    for i in index:
        x = p_cam[i, 0]
        y = p_cam[i, 1]
        z = p_cam[i, 2]
        a = conic[i, 0]
        b = conic[i, 1]
        c = conic[i, 2]
        h0 = g_conic[i, 0]
        h1 = 0.5 * g_conic[i, 1]
        h2 = g_conic[i, 2]
        # G2 = -Q H Q with Q = [[a, b], [b, c]], H = [[h0, h1], [h1, h2]]
        m00 = a * h0 + b * h1
        m01 = a * h1 + b * h2
        m10 = b * h0 + c * h1
        m11 = b * h1 + c * h2
        G2[0, 0] = -(m00 * a + m01 * b)
        G2[0, 1] = -(m00 * b + m01 * c)
        G2[1, 0] = -(m10 * a + m11 * b)
        G2[1, 1] = -(m10 * b + m11 * c)
        J[0, 0] = fx / z
        J[0, 2] = -fx * x / (z * z)
        J[1, 1] = fy / z
        J[1, 2] = -fy * y / (z * z)
        for r in range(3):
            for s in range(3):
                acc = 0.0
                for u in range(2):
                    for v in range(2):
                        acc += J[u, r] * G2[u, v] * J[v, s]
                Gc[r, s] = acc
        S = cov_cam[i]
        for u in range(2):
            for s in range(3):
                acc = 0.0
                for v in range(2):
                    for r in range(3):
                        acc += G2[u, v] * J[v, r] * S[r, s]
                GJ[u, s] = 2.0 * acc
        # G3 = W^T Gc W
        for r in range(3):
            for s in range(3):
                T[r, s] = Gc[r, 0] * W[0, s] + Gc[r, 1] * W[1, s] + Gc[r, 2] * W[2, s]
        for r in range(3):
            for s in range(3):
                G3[r, s] = W[0, r] * T[0, s] + W[1, r] * T[1, s] + W[2, r] * T[2, s]
        R = rot[i]
        for r in range(3):
            for s in range(3):
                acc = 0.0
                for k in range(3):
                    acc += G3[r, k] * R[k, s] * scales[i, s]
                GU[r, s] = 2.0 * acc
        for s in range(3):
            g_scale[i, s] = GU[0, s] * R[0, s] + GU[1, s] * R[1, s] + GU[2, s] * R[2, s]
            for r in range(3):
                GR[r, s] = GU[r, s] * scales[i, s]
        qw = q_unit[i, 0]
        qx = q_unit[i, 1]
        qy = q_unit[i, 2]
        qz = q_unit[i, 3]
        gw = 2 * (-qz * GR[0, 1] + qy * GR[0, 2] + qz * GR[1, 0] - qx * GR[1, 2] - qy * GR[2, 0] + qx * GR[2, 1])
        gx = 2 * (qy * GR[0, 1] + qz * GR[0, 2] + qy * GR[1, 0] - 2 * qx * GR[1, 1] - qw * GR[1, 2]
                  + qz * GR[2, 0] + qw * GR[2, 1] - 2 * qx * GR[2, 2])
        gy = 2 * (-2 * qy * GR[0, 0] + qx * GR[0, 1] + qw * GR[0, 2] + qx * GR[1, 0] + qz * GR[1, 2]
                  - qw * GR[2, 0] + qz * GR[2, 1] - 2 * qy * GR[2, 2])
        gz = 2 * (-2 * qz * GR[0, 0] - qw * GR[0, 1] + qx * GR[0, 2] + qw * GR[1, 0] - 2 * qz * GR[1, 1]
                  + qy * GR[1, 2] + qx * GR[2, 0] + qy * GR[2, 1])
        dot = qw * gw + qx * gx + qy * gy + qz * gz
        qn = q_norm[i]
        g_quat[i, 0] = (gw - qw * dot) / qn
        g_quat[i, 1] = (gx - qx * dot) / qn
        g_quat[i, 2] = (gy - qy * dot) / qn
        g_quat[i, 3] = (gz - qz * dot) / qn
        gu = g_mean2d[i, 0]
        gv = g_mean2d[i, 1]
        z2 = z * z
        z3 = z2 * z
        c0 = gu * fx / z - GJ[0, 2] * fx / z2
        c1 = gv * fy / z - GJ[1, 2] * fy / z2
        c2 = (-gu * fx * x / z2 - gv * fy * y / z2
              - GJ[0, 0] * fx / z2 + GJ[0, 2] * 2 * fx * x / z3
              - GJ[1, 1] * fy / z2 + GJ[1, 2] * 2 * fy * y / z3
              + g_z[i])
        for s in range(3):
            g_pos[i, s] = c0 * W[0, s] + c1 * W[1, s] + c2 * W[2, s]
    return g_pos, g_scale, g_quat
