"""Pinhole projection, silhouette rasterization, 2D basis-point encoding, IoU.

Masks are numpy arrays of shape (H, W): bool for binary masks, float64 in
[0, 1] for soft renders. Pixel (x, y) covers [x, x+1) x [y, y+1) with its
center at (x + 0.5, y + 0.5).
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import autodiff as ad


class BehindCameraError(ValueError):
    """A projected point has non-positive camera-frame depth."""


@dataclass(frozen=True)
class Camera:
    focal: float          # pixels
    cx: float
    cy: float
    width: int = 256
    height: int = 256

    def __post_init__(self):
        if self.focal <= 0:
            raise ValueError("focal length must be positive")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image size must be positive")

    @staticmethod
    def centered(focal, size=256):
        return Camera(focal=focal, cx=size / 2.0, cy=size / 2.0,
                      width=size, height=size)


@dataclass(frozen=True)
class BpsEncoding:
    points: np.ndarray     # (B, 2) in normalized image coordinates
    distances: np.ndarray  # (B,) diagonal-normalized distances


def upright_rotmat(yaw=0.0, pitch=0.0, roll=0.0):
    """Root rotation placing the canonical model (+x forward, +z up) upright
    in the camera frame (+z viewing direction, +y image-down)."""
    cz, sz = np.cos(yaw), np.sin(yaw)
    cy, sy = np.cos(pitch), np.sin(pitch)
    cx, sx = np.cos(roll), np.sin(roll)
    rz = np.array([[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]])
    tip = np.array([[0.0, 0.0, -1.0], [0.0, -1.0, 0.0], [-1.0, 0.0, 0.0]]).T
    return tip @ rx @ ry @ rz


def project(points3d, camera, translation, focal=None):
    """Pinhole projection, (..., K, 3) -> (..., K, 2) pixel coordinates.

    translation is added to the points first; focal overrides the camera's
    (pass an autodiff Var to optimize it).
    """
    f = camera.focal if focal is None else focal
    p = ad.add(points3d, ad.reshape(translation, ad.value_of(translation).shape[:-1] + (1, 3)))
    z = p[..., 2]
    if np.any(ad.value_of(z) <= 0.0):
        raise BehindCameraError("point at or behind the camera plane")
    x = ad.add(ad.div(ad.mul(p[..., 0], f), z), camera.cx)
    y = ad.add(ad.div(ad.mul(p[..., 1], f), z), camera.cy)
    return ad.stack([x, y], axis=-1)


# ---------------------------------------------------------------------------
# rasterization

_WINDOW_SIDES = (2, 3, 4, 6, 8, 12, 16, 24, 32, 48, 64, 96, 128, 192, 256,
                 384, 512, 768, 1024)
_QCUT = 16.0  # sigmoid(-16) ~ 1e-7: faces farther than sqrt(qcut*sigma) are dropped


def _face_windows(tri, width, height, pad):
    """Integer window (x0, y0, wside) per face, bucketed by window side."""
    x0 = np.floor(tri[:, :, 0].min(axis=1) - pad).astype(np.int64)
    x1 = np.ceil(tri[:, :, 0].max(axis=1) + pad).astype(np.int64) + 1
    y0 = np.floor(tri[:, :, 1].min(axis=1) - pad).astype(np.int64)
    y1 = np.ceil(tri[:, :, 1].max(axis=1) + pad).astype(np.int64) + 1
    x0 = np.clip(x0, 0, width)
    x1 = np.clip(x1, 0, width)
    y0 = np.clip(y0, 0, height)
    y1 = np.clip(y1, 0, height)
    side = np.maximum(x1 - x0, y1 - y0)
    return x0, y0, side


def _window_pixels(x0, y0, side, width, height):
    """Pixel-center coordinates and flat indices of a (side x side) block
    anchored at each face's window origin; out-of-image entries invalid."""
    n = x0.shape[0]
    jj, ii = np.meshgrid(np.arange(side), np.arange(side))
    px = x0[:, None] + jj.reshape(-1)[None, :]          # (n, side*side) columns
    py = y0[:, None] + ii.reshape(-1)[None, :]
    valid = (px < width) & (py < height)
    cx = px + 0.5
    cy = py + 0.5
    flat = np.where(valid, py * width + px, 0)
    return cx, cy, flat, valid


def _triangle_distance(tri, cx, cy):
    """Squared distance to the triangle boundary plus inside flag.

    tri (n, 3, 2); cx, cy (n, P). Returns d2 (n, P), inside (n, P), and the
    per-pixel argmin edge data (edge index, clamp parameter t, offset vector)
    needed for the backward pass.
    """
    n, p = cx.shape
    d2 = np.full((n, p), np.inf)
    best_edge = np.zeros((n, p), dtype=np.int8)
    best_t = np.zeros((n, p))
    best_wx = np.zeros((n, p))
    best_wy = np.zeros((n, p))
    cross_ok = np.ones((n, p), dtype=bool)

    ax, ay = tri[:, 0, 0], tri[:, 0, 1]
    bx, by = tri[:, 1, 0], tri[:, 1, 1]
    cxx, cyy = tri[:, 2, 0], tri[:, 2, 1]
    area2 = (bx - ax) * (cyy - ay) - (by - ay) * (cxx - ax)
    orient = np.sign(area2)[:, None]

    for k, (sx, sy, ex, ey) in enumerate((
            (ax, ay, bx, by), (bx, by, cxx, cyy), (cxx, cyy, ax, ay))):
        ux = cx - sx[:, None]
        uy = cy - sy[:, None]
        vx = (ex - sx)[:, None]
        vy = (ey - sy)[:, None]
        vv = np.maximum(vx * vx + vy * vy, 1e-300)
        t = np.clip((ux * vx + uy * vy) / vv, 0.0, 1.0)
        wx = ux - t * vx
        wy = uy - t * vy
        de = wx * wx + wy * wy
        closer = de < d2
        d2 = np.where(closer, de, d2)
        best_edge = np.where(closer, k, best_edge)
        best_t = np.where(closer, t, best_t)
        best_wx = np.where(closer, wx, best_wx)
        best_wy = np.where(closer, wy, best_wy)
        cross_ok &= (vx * uy - vy * ux) * orient >= 0.0

    inside = cross_ok & (np.abs(area2)[:, None] > 0.0)
    return d2, inside, best_edge, best_t, best_wx, best_wy


def _sigma_px2(sigma, width, height):
    # sigma is quoted in normalized units; squared distances are in pixels
    return sigma * float(width) * float(height)


def soft_rasterize(verts2d, faces, camera, sigma=1e-4):
    """Differentiable soft silhouette, coverage in [0, 1] per pixel.

    Per pixel: 1 - prod_faces (1 - sigmoid(sign * d^2 / sigma)), sign
    positive inside the projected triangle. verts2d may be an autodiff Var.
    """
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    v = ad.value_of(verts2d)
    faces = np.asarray(faces, dtype=np.int64)
    w, h = camera.width, camera.height
    s2 = _sigma_px2(sigma, w, h)
    pad = np.sqrt(_QCUT * s2)

    log_keep = np.zeros(h * w)
    records = []
    if faces.size:
        tri_all = v[faces]                       # (F, 3, 2)
        x0a, y0a, sides = _face_windows(tri_all, w, h, pad)
        for lo, hi in zip((0,) + _WINDOW_SIDES, _WINDOW_SIDES):
            sel = np.flatnonzero((sides > lo) & (sides <= hi))
            if sel.size == 0:
                continue
            tri = tri_all[sel]
            cx, cy, flat, valid = _window_pixels(x0a[sel], y0a[sel], hi, w, h)
            d2, inside, edge, t, wx, wy = _triangle_distance(tri, cx, cy)
            sign = np.where(inside, 1.0, -1.0)
            q = np.clip(sign * d2 / s2, -_QCUT, _QCUT)
            s = 1.0 / (1.0 + np.exp(-q))
            live = valid & (np.abs(q) < _QCUT)   # gradient flows only off the clamp
            s = np.where(valid, np.minimum(s, 1.0 - 1e-12), 0.0)
            log_keep += np.bincount(flat.reshape(-1), weights=np.log1p(-s).reshape(-1),
                                    minlength=h * w)
            records.append((faces[sel], flat, sign, s, live, edge, t, wx, wy))

    coverage = 1.0 - np.exp(log_keep)
    out = coverage.reshape(h, w)
    if not isinstance(verts2d, ad.Var):
        return out

    def vjp(g):
        g_s_common = (-np.exp(log_keep) * np.asarray(g).reshape(-1))  # dC/dS per pixel
        gvx = np.zeros(v.shape[0])
        gvy = np.zeros(v.shape[0])
        n_verts = v.shape[0]
        for fidx, flat, sign, s, live, edge, t, wx, wy in records:
            gs = g_s_common[flat]                 # (n, P) upstream at each window pixel
            # dS/dq = -s (chain through log1p(-s) and the sigmoid)
            gd2 = np.where(live, -gs * s, 0.0) * (sign / s2)
            # d(d2)/d endpoint = -2 * [(1-t) or t] * w  (envelope over clamped t)
            cu = gd2 * -2.0
            cb = cu * t
            ca = cu - cb
            for k in range(3):
                mk = edge == k
                ia = fidx[:, k]
                ib = fidx[:, (k + 1) % 3]
                cam_ = np.where(mk, ca, 0.0)
                cbm = np.where(mk, cb, 0.0)
                gvx += np.bincount(ia, weights=(cam_ * wx).sum(axis=1), minlength=n_verts)
                gvy += np.bincount(ia, weights=(cam_ * wy).sum(axis=1), minlength=n_verts)
                gvx += np.bincount(ib, weights=(cbm * wx).sum(axis=1), minlength=n_verts)
                gvy += np.bincount(ib, weights=(cbm * wy).sum(axis=1), minlength=n_verts)
        return (np.stack([gvx, gvy], axis=1),)

    return verts2d.tape.record(out, (verts2d,), vjp)


def hard_rasterize(verts2d, faces, camera):
    """Binary mask: pixel on iff its center lies inside any projected triangle."""
    v = ad.value_of(verts2d)
    faces = np.asarray(faces, dtype=np.int64)
    w, h = camera.width, camera.height
    mask = np.zeros(h * w, dtype=bool)
    if faces.size:
        tri_all = v[faces]
        x0a, y0a, sides = _face_windows(tri_all, w, h, 0.0)
        for lo, hi in zip((0,) + _WINDOW_SIDES, _WINDOW_SIDES):
            sel = np.flatnonzero((sides > lo) & (sides <= hi))
            if sel.size == 0:
                continue
            cx, cy, flat, valid = _window_pixels(x0a[sel], y0a[sel], hi, w, h)
            _, inside, *_ = _triangle_distance(tri_all[sel], cx, cy)
            hit = (inside & valid).reshape(-1)
            mask[flat.reshape(-1)[hit]] = True
    return mask.reshape(h, w)


# ---------------------------------------------------------------------------
# silhouette encodings and metrics

def bps_points(num_points, seed):
    """Low-discrepancy basis points: stratified grid cells with seeded jitter."""
    if num_points < 1:
        raise ValueError("need at least one basis point")
    rng = np.random.default_rng(seed)
    g = int(np.ceil(np.sqrt(num_points)))
    cells = np.stack(np.meshgrid(np.arange(g), np.arange(g)), axis=-1).reshape(-1, 2)
    jitter = rng.uniform(0.0, 1.0, size=(g * g, 2))
    pts = (cells + jitter) / g
    return pts[:num_points]


def bps_encode(mask, num_points=64, seed=0):
    """Distance from fixed basis points to the nearest foreground pixel center,
    normalized by the image diagonal. Empty mask encodes as all ones."""
    mask = np.asarray(mask)
    h, w = mask.shape
    pts = bps_points(num_points, seed)
    diag = np.hypot(w, h)
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        return BpsEncoding(points=pts, distances=np.ones(num_points))
    fg = np.stack([xs + 0.5, ys + 0.5], axis=1)
    tree = cKDTree(fg)
    query = pts * np.array([w, h])
    d, _ = tree.query(query)
    return BpsEncoding(points=pts, distances=d / diag)


def iou(mask_a, mask_b):
    """Intersection over union of two binary masks; 1.0 when both are empty."""
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.logical_or(a, b).sum()
    if union == 0:
        return 1.0
    return float(np.logical_and(a, b).sum() / union)


def downsample_mask(mask, size):
    """Nearest sampling of a binary mask at the centers of a coarser grid."""
    mask = np.asarray(mask)
    h, w = mask.shape
    oh, ow = size
    ys = np.minimum(((np.arange(oh) + 0.5) * h / oh).astype(np.int64), h - 1)
    xs = np.minimum(((np.arange(ow) + 0.5) * w / ow).astype(np.int64), w - 1)
    return mask[np.ix_(ys, xs)]
