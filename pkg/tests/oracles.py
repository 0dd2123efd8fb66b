"""Independent reference implementations used only by the tests.

Nothing here imports the code paths it checks: projection, covariance and
compositing are re-derived in plain numpy with per-pixel loops.
"""

from __future__ import annotations

import math

import numpy as np

E45 = math.exp(-4.5)


def kernel(p: float) -> float:
    if p >= 9.0:
        return 0.0
    return (math.exp(-p / 2) - E45 * (1 + (9 - p) / 2)) / (1 - 5.5 * E45)


def _rotation(q):
    w, x, y, z = np.asarray(q, dtype=float) / np.linalg.norm(q)
    return np.array([
        [w * w + x * x - y * y - z * z, 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), w * w - x * x + y * y - z * z, 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), w * w - x * x - y * y + z * z],
    ])


def brute_force_render(g, pose, blur=0.3, near=0.01, floor=1e-3):
    """Evaluate every Gaussian at every pixel, exact global sort, no tiles or bounds."""
    h, w = pose.height, pose.width
    items = []
    for i in range(len(g)):
        pc = pose.rotation @ g.positions[i] + pose.translation
        if pc[2] <= near:
            continue
        R = _rotation(g.rotations[i])
        cov = R @ np.diag(g.scales[i] ** 2) @ R.T
        J = np.array([[pose.fx / pc[2], 0, -pose.fx * pc[0] / pc[2] ** 2],
                      [0, pose.fy / pc[2], -pose.fy * pc[1] / pc[2] ** 2]])
        c2 = J @ pose.rotation @ cov @ pose.rotation.T @ J.T + blur * np.eye(2)
        inv = np.linalg.inv(c2)
        mu = np.array([pose.fx * pc[0] / pc[2] + pose.cx, pose.fy * pc[1] / pc[2] + pose.cy])
        items.append((pc[2], i, mu, inv))
    items.sort(key=lambda t: (t[0], t[1]))
    rgb = np.zeros((h, w, 3))
    dacc = np.zeros((h, w))
    feat = np.zeros((h, w, g.identities.shape[1]))
    cov = np.zeros((h, w))
    for v in range(h):
        for u in range(w):
            T = 1.0
            for z, i, mu, inv in items:
                d = np.array([u, v]) - mu
                a = g.opacities[i] * kernel(float(d @ inv @ d))
                if a == 0.0:
                    continue
                rgb[v, u] += a * T * g.colors[i]
                dacc[v, u] += a * T * z
                feat[v, u] += a * T * g.identities[i]
                T *= 1 - a
            cov[v, u] = 1 - T
    depth = np.where(cov >= floor, dacc / np.maximum(cov, 1e-300), -1.0)
    return rgb, depth, cov, feat


def brute_force_render_dense(g, pose, blur=0.3, near=0.01, floor=1e-3):
    """Same compositing as ``brute_force_render`` with the pixel loop vectorized.

    Every Gaussian is still evaluated at every pixel in exact global depth order.
    """
    h, w = pose.height, pose.width
    vv, uu = np.mgrid[0:h, 0:w].astype(float)
    rgb = np.zeros((h, w, 3))
    dacc = np.zeros((h, w))
    T = np.ones((h, w))
    items = []
    for i in range(len(g)):
        pc = pose.rotation @ g.positions[i] + pose.translation
        if pc[2] <= near:
            continue
        R = _rotation(g.rotations[i])
        cov = R @ np.diag(g.scales[i] ** 2) @ R.T
        J = np.array([[pose.fx / pc[2], 0, -pose.fx * pc[0] / pc[2] ** 2],
                      [0, pose.fy / pc[2], -pose.fy * pc[1] / pc[2] ** 2]])
        inv = np.linalg.inv(J @ pose.rotation @ cov @ pose.rotation.T @ J.T + blur * np.eye(2))
        mu = (pose.fx * pc[0] / pc[2] + pose.cx, pose.fy * pc[1] / pc[2] + pose.cy)
        items.append((pc[2], i, mu, inv))
    items.sort(key=lambda t: (t[0], t[1]))
    for z, i, mu, inv in items:
        dx, dy = uu - mu[0], vv - mu[1]
        p = inv[0, 0] * dx * dx + 2 * inv[0, 1] * dx * dy + inv[1, 1] * dy * dy
        k = np.where(p < 9.0, (np.exp(-p / 2) - E45 * (1 + (9 - p) / 2)) / (1 - 5.5 * E45), 0.0)
        a = g.opacities[i] * k
        rgb += (a * T)[..., None] * g.colors[i]
        dacc += a * T * z
        T = T * (1 - a)
    cov = 1 - T
    depth = np.where(cov >= floor, dacc / np.maximum(cov, 1e-300), -1.0)
    return rgb, depth, cov


def central_difference(f, x: np.ndarray, step: float) -> np.ndarray:
    x = np.array(x, dtype=float)
    grad = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        orig = x[idx]
        x[idx] = orig + step
        fp = f(x)
        x[idx] = orig - step
        fm = f(x)
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * step)
    return grad


def ssim_reference(a, b, c1=0.01 ** 2, c2=0.03 ** 2):
    """SSIM with an explicit 11x11 Gaussian window and zero padding, written out longhand."""
    ax = np.arange(11) - 5
    g1 = np.exp(-(ax ** 2) / (2 * 1.5 ** 2))
    g1 /= g1.sum()
    win = np.outer(g1, g1)

    def filt(img):
        h, w = img.shape
        pad = np.zeros((h + 10, w + 10))
        pad[5:-5, 5:-5] = img
        out = np.zeros((h, w))
        for dy in range(11):
            for dx in range(11):
                out += win[dy, dx] * pad[dy:dy + h, dx:dx + w]
        return out

    vals = []
    for c in range(a.shape[2]):
        x, y = a[..., c], b[..., c]
        mx, my = filt(x), filt(y)
        sxx = filt(x * x) - mx ** 2
        syy = filt(y * y) - my ** 2
        sxy = filt(x * y) - mx * my
        vals.append(((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx ** 2 + my ** 2 + c1) * (sxx + syy + c2)))
    return float(np.mean(vals))


def psnr_reference(a, b, mask=None):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if mask is not None:
        a, b = a[mask], b[mask]
    mse = float(np.mean((a - b) ** 2))
    return 99.0 if mse == 0 else min(99.0, 10 * math.log10(1.0 / mse))


def harmonic_fill_dense(img: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Exact discrete harmonic extension: solve the 4-neighbour Laplace system directly."""
    h, w = img.shape
    idx = -np.ones((h, w), dtype=int)
    holes = np.argwhere(mask)
    for k, (y, x) in enumerate(holes):
        idx[y, x] = k
    n = len(holes)
    A = np.zeros((n, n))
    rhs = np.zeros(n)
    for k, (y, x) in enumerate(holes):
        nbrs = [(y + dy, x + dx) for dy, dx in ((-1, 0), (1, 0), (0, -1), (0, 1))
                if 0 <= y + dy < h and 0 <= x + dx < w]
        A[k, k] = len(nbrs)
        for ny, nx in nbrs:
            if mask[ny, nx]:
                A[k, idx[ny, nx]] -= 1
            else:
                rhs[k] += img[ny, nx]
    out = img.copy()
    out[mask] = np.linalg.solve(A, rhs)[[idx[y, x] for y, x in holes]] if n else out[mask]
    return out


def raycast_hidden_mask(removed_gaussians, dataset, view, eps):
    """Pixels of ``view``'s object mask whose background point is not seen by any other view.

    Uses the oracle's literal definition with its own projection code.
    """
    from gsinpaint.render import render  # depth of the object-removed scene is an input

    depths = [render(removed_gaussians, v.pose, identity=False).depth for v in dataset.views]
    src = dataset.views[view]
    hidden = src.mask.copy()
    vs, us = np.nonzero(src.mask)
    for v, u in zip(vs, us):
        d = depths[view][v, u]
        if d <= 0:
            continue
        pc = np.array([(u - src.pose.cx) / src.pose.fx * d, (v - src.pose.cy) / src.pose.fy * d, d])
        X = src.pose.rotation.T @ (pc - src.pose.translation)
        for k, other in enumerate(dataset.views):
            if k == view:
                continue
            q = other.pose.rotation @ X + other.pose.translation
            if q[2] <= 0:
                continue
            uu = int(math.floor(other.pose.fx * q[0] / q[2] + other.pose.cx + 0.5))
            vv = int(math.floor(other.pose.fy * q[1] / q[2] + other.pose.cy + 0.5))
            if not (0 <= uu < other.pose.width and 0 <= vv < other.pose.height):
                continue
            if other.mask[vv, uu]:
                continue
            if depths[k][vv, uu] > 0 and abs(depths[k][vv, uu] - q[2]) <= eps:
                hidden[v, u] = False
                break
    return hidden
