"""Pinhole cameras, orbit rigs and a z-buffer depth rasterizer.

Conventions: OpenCV camera frame (x right, y down, z forward), world z up.
A projected pixel coordinate ``(u, v)`` falls into pixel ``(floor(u), floor(v))``,
i.e. column ``floor(u)`` and row ``floor(v)`` of the image arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

DEFAULT_ELEVATIONS = (-10.0, 10.0, 30.0, 50.0)
DEFAULT_VIEWS = 29
MIN_DEPTH_OPACITY = 0.02


@dataclass(frozen=True)
class Camera:
    K: np.ndarray
    R: np.ndarray
    T: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = np.asarray(self.K, dtype=np.float64).reshape(3, 3)
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        if not (K[0, 0] > 0 and K[1, 1] > 0):
            raise ValueError("focal lengths must be positive")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9):
            raise ValueError("rotation is not orthonormal")
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "T", np.asarray(self.T, dtype=np.float64).reshape(3))

    @classmethod
    def from_intrinsics(cls, fx, fy, cx, cy, R, T, width, height):
        K = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        return cls(K=K, R=R, T=T, width=int(width), height=int(height))

    @property
    def fx(self):
        return self.K[0, 0]

    @property
    def center(self):
        return -self.R.T @ self.T

    @property
    def forward(self):
        return self.R[2]

    def to_json(self):
        return {
            "K": [self.K[0, 0], self.K[1, 1], self.K[0, 2], self.K[1, 2]],
            "R": self.R.reshape(-1).tolist(),
            "T": self.T.tolist(),
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_json(cls, d):
        fx, fy, cx, cy = (float(v) for v in d["K"])
        return cls.from_intrinsics(fx, fy, cx, cy, np.reshape(d["R"], (3, 3)), d["T"],
                                   d["width"], d["height"])


@dataclass(frozen=True)
class DepthMap:
    width: int
    height: int
    depth: np.ndarray  # (height, width); +inf where nothing was drawn

    def at(self, col, row):
        return self.depth[row, col]


def project_points(camera: Camera, points):
    """Vectorized projection. Returns (uv, depth, in_front)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cam = pts @ camera.R.T + camera.T
    z = cam[:, 2]
    in_front = z > 0
    safe_z = np.where(in_front, z, 1.0)
    uvw = cam @ camera.K.T
    uv = uvw[:, :2] / safe_z[:, None]
    uv[~in_front] = np.nan
    return uv, z, in_front


def project(camera: Camera, point):
    """Project one world point. Returns ``(pixel, depth)`` or None when behind the camera."""
    uv, z, ok = project_points(camera, point)
    if not ok[0]:
        return None
    return uv[0], float(z[0])


def look_at(center, target, up=(0.0, 0.0, 1.0)):
    center = np.asarray(center, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - center
    fwd /= np.linalg.norm(fwd)
    up = np.asarray(up, dtype=np.float64)
    if abs(np.dot(fwd, up)) > 1 - 1e-9:
        up = np.array([0.0, 1.0, 0.0])
    right = np.cross(fwd, up)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return R, -R @ center


def orbit_rig(n_views=DEFAULT_VIEWS, target=(0.0, 0.0, 0.0), radius=2.5,
              elevations=DEFAULT_ELEVATIONS, width=128, height=128, fov_deg=30.0):
    """Cameras on equidistant azimuth rings, lowest ring first, all aimed at ``target``.

    Views are split evenly over the rings; one leftover view becomes a top view
    and any further leftovers are added to rings bottom-up. With the default
    four rings, 29 views give 4 x 7 + 1.
    """
    if n_views < 1:
        raise ValueError("n_views must be >= 1")
    if radius <= 0:
        raise ValueError("radius must be positive")
    target = np.asarray(target, dtype=np.float64)
    elevations = list(elevations)[: max(1, min(len(elevations), n_views))]
    rings = len(elevations)
    per_ring = [n_views // rings] * rings
    rem = n_views - sum(per_ring)
    top = rem >= 1
    rem -= int(top)
    for i in range(rem):
        per_ring[i] += 1

    fx = 0.5 * width / math.tan(math.radians(fov_deg) / 2)
    fy = fx
    cx, cy = width / 2.0, height / 2.0
    cams = []
    for el_deg, k in zip(elevations, per_ring):
        el = math.radians(el_deg)
        for i in range(k):
            az = 2 * math.pi * i / k
            c = target + radius * np.array([math.cos(el) * math.cos(az),
                                            math.cos(el) * math.sin(az),
                                            math.sin(el)])
            R, T = look_at(c, target)
            cams.append(Camera.from_intrinsics(fx, fy, cx, cy, R, T, width, height))
    if top:
        c = target + np.array([0.0, 0.0, radius])
        R, T = look_at(c, target)
        cams.append(Camera.from_intrinsics(fx, fy, cx, cy, R, T, width, height))
    return cams


def _stamps(camera, positions, covariances, opacities, min_opacity):
    """Pixel stamps (flat pixel index, depth, kernel index) for every drawn kernel."""
    uv, z, ok = project_points(camera, positions)
    keep = ok & (opacities >= min_opacity)
    idx = np.flatnonzero(keep)
    if len(idx) == 0:
        empty = np.zeros(0, dtype=np.int64)
        return empty, np.zeros(0), empty
    lam = np.linalg.eigvalsh(covariances[idx])[:, -1]
    r_px = np.ceil(2.0 * np.sqrt(np.maximum(lam, 0.0)) * camera.fx / z[idx]).astype(np.int64)
    col0 = np.floor(uv[idx, 0]).astype(np.int64)
    row0 = np.floor(uv[idx, 1]).astype(np.int64)
    W, H = camera.width, camera.height
    pix_parts, dep_parts, ker_parts = [], [], []
    for r in np.unique(r_px):
        sel = r_px == r
        oy, ox = np.mgrid[-r:r + 1, -r:r + 1]
        disk = ox**2 + oy**2 <= r * r
        ox, oy = ox[disk], oy[disk]
        cols = col0[sel, None] + ox[None, :]
        rows = row0[sel, None] + oy[None, :]
        inside = (cols >= 0) & (cols < W) & (rows >= 0) & (rows < H)
        ker = np.broadcast_to(idx[sel, None], cols.shape)
        dep = np.broadcast_to(z[idx[sel], None], cols.shape)
        pix_parts.append((rows * W + cols)[inside])
        dep_parts.append(dep[inside])
        ker_parts.append(ker[inside])
    return np.concatenate(pix_parts), np.concatenate(dep_parts), np.concatenate(ker_parts)


def rasterize(camera: Camera, cloud, min_opacity=MIN_DEPTH_OPACITY):
    """Z-buffer the cloud. Returns (depth (H, W), nearest kernel index (H, W), -1 if empty).

    Depth ties go to the lowest kernel index, so the result does not depend on
    the order kernels are visited in.
    """
    pix, dep, ker = _stamps(camera, cloud.positions, cloud.covariances,
                            np.asarray(cloud.opacities), min_opacity)
    H, W = camera.height, camera.width
    depth = np.full(H * W, np.inf)
    nearest = np.full(H * W, -1, dtype=np.int64)
    if len(pix):
        order = np.lexsort((ker, dep, pix))
        pix, dep, ker = pix[order], dep[order], ker[order]
        first = np.ones(len(pix), dtype=bool)
        first[1:] = pix[1:] != pix[:-1]
        depth[pix[first]] = dep[first]
        nearest[pix[first]] = ker[first]
    return depth.reshape(H, W), nearest.reshape(H, W)


def render_depth(camera: Camera, cloud, min_opacity=MIN_DEPTH_OPACITY) -> DepthMap:
    depth, _ = rasterize(camera, cloud, min_opacity)
    return DepthMap(width=camera.width, height=camera.height, depth=depth)


def write_depth_pgm(depth_map: DepthMap, path, max_depth=None):
    """16-bit binary PGM, depth scaled so ``max_depth`` maps to 65535; empty pixels are 0."""
    d = depth_map.depth
    finite = np.isfinite(d)
    if max_depth is None:
        max_depth = float(d[finite].max()) if finite.any() else 1.0
    scaled = np.zeros(d.shape, dtype=">u2")
    scaled[finite] = np.clip(np.round(d[finite] / max_depth * 65535), 1, 65535)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{depth_map.width} {depth_map.height}\n65535\n".encode("ascii"))
        fh.write(scaled.tobytes())
    return max_depth


def read_depth_pgm(path, max_depth):
    with open(path, "rb") as fh:
        if fh.readline().strip() != b"P5":
            raise ValueError(f"{path}: not a binary PGM")
        w, h = (int(t) for t in fh.readline().split())
        maxval = int(fh.readline())
        raw = np.frombuffer(fh.read(w * h * 2), dtype=">u2").reshape(h, w).astype(np.float64)
    depth = np.where(raw > 0, raw / maxval * max_depth, np.inf)
    return DepthMap(width=w, height=h, depth=depth)
