"""Synthetic scenes with known ground truth for perception and simulation tests."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import Camera, look_at, orbit_rig, rasterize
from .materials import lookup_material
from .perception import SegmentationMap
from .scene import save_manifest, write_image, write_labels, write_sidecar
from .splat import SplatCloud, save_frame

PALETTE = np.array([
    [0.90, 0.10, 0.10],
    [0.10, 0.20, 0.90],
    [0.10, 0.75, 0.20],
    [0.90, 0.80, 0.20],
    [0.70, 0.30, 0.80],
])


@dataclass
class SynthView:
    camera: Camera
    image: np.ndarray     # (H, W, 3) uint8
    seg: SegmentationMap  # this view's own region numbering
    depth: np.ndarray     # (H, W) camera z, +inf where empty


@dataclass
class SynthScene:
    name: str
    cloud: SplatCloud
    truth: np.ndarray               # ground-truth group per kernel (1-based)
    region_names: list
    input_camera: Camera = None
    input_image: np.ndarray = None
    input_map: SegmentationMap = None
    views: list = field(default_factory=list)

    @property
    def materials(self):
        return {g + 1: lookup_material(n) for g, n in enumerate(self.region_names)}


def fibonacci_sphere(n, radius=1.0):
    i = np.arange(n) + 0.5
    phi = np.arccos(1.0 - 2.0 * i / n)
    theta = math.pi * (1.0 + 5.0**0.5) * i
    return radius * np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi),
                              np.cos(phi)], axis=1)


def _lattice(lo, hi, counts):
    axes = [np.linspace(a, b, c) for a, b, c in zip(lo, hi, counts)]
    g = np.meshgrid(*axes, indexing="ij")
    return np.stack([a.ravel() for a in g], axis=1)


def _cloud(points, truth, sigma, opacity=0.9):
    P = len(points)
    cov = np.broadcast_to(np.eye(3) * sigma**2, (P, 3, 3))
    return SplatCloud(positions=points, covariances=cov, opacities=np.full(P, opacity),
                      colors=PALETTE[(truth - 1) % len(PALETTE)])


def two_hemisphere_sphere(n=10_000, radius=0.5):
    pts = fibonacci_sphere(n, radius)
    truth = np.where(pts[:, 0] >= 0, 1, 2)
    spacing = radius * math.sqrt(4 * math.pi / n)
    return pts, truth, 0.5 * spacing, ["rubber", "plush"]


def elastic_cube(side=8, size=0.4):
    pts = _lattice([-size / 2] * 3, [size / 2] * 3, [side] * 3)
    return pts, np.ones(len(pts), dtype=np.int64), 0.5 * size / (side - 1), ["elastic"]


def sand_pile(radius=0.5, height=0.6, spacing=0.04):
    n = int(round(2 * radius / spacing)) + 1
    pts = _lattice([-radius, -radius, 0.0], [radius, radius, height],
                   [n, n, int(round(height / spacing)) + 1])
    r = np.hypot(pts[:, 0], pts[:, 1])
    pts = pts[r <= radius * (1.0 - pts[:, 2] / height) + 1e-9]
    return pts, np.ones(len(pts), dtype=np.int64), 0.5 * spacing, ["sand"]


def layered_block(size=(0.8, 0.5, 0.5), spacing=0.04):
    counts = [int(round(s / spacing)) + 1 for s in size]
    pts = _lattice([-s / 2 for s in size], [s / 2 for s in size], counts)
    truth = np.where(pts[:, 2] < 0.0, 1, 2)
    return pts, truth, 0.5 * spacing, ["wood", "snow"]


SCENES = {
    "two_hemisphere_sphere": two_hemisphere_sphere,
    "elastic_cube": elastic_cube,
    "sand_pile": sand_pile,
    "layered_block": layered_block,
}


def _render_view(camera, cloud, truth, permute):
    depth, nearest = rasterize(camera, cloud)
    hit = nearest >= 0
    gt = np.zeros(nearest.shape, dtype=np.int64)
    gt[hit] = truth[nearest[hit]]
    image = np.zeros(nearest.shape + (3,), dtype=np.uint8)
    image[hit] = np.round(np.asarray(cloud.colors)[nearest[hit]] * 255).astype(np.uint8)
    present = np.unique(gt[gt > 0])
    if permute:
        present = present[::-1]
    lut = np.zeros(int(truth.max()) + 1, dtype=np.int64)
    lut[present] = np.arange(1, len(present) + 1)
    return SynthView(camera, image, SegmentationMap(lut[gt], len(present)), depth), gt


def make_scene(name, n_views=29, resolution=128, with_views=True, **kw) -> SynthScene:
    if name not in SCENES:
        raise ValueError(f"unknown scene {name!r}; available: {', '.join(sorted(SCENES))}")
    pts, truth, sigma, names = SCENES[name](**kw)
    cloud = _cloud(pts, truth, sigma)
    scene = SynthScene(name=name, cloud=cloud, truth=truth, region_names=names)
    if not with_views:
        return scene
    center = 0.5 * (pts.min(axis=0) + pts.max(axis=0))
    extent = float(np.max(np.linalg.norm(pts - center, axis=1)))
    dist = 5.0 * extent
    cams = orbit_rig(n_views, target=center, radius=dist, width=resolution, height=resolution)
    scene.views = [_render_view(c, cloud, truth, permute=(i % 2 == 1))[0]
                   for i, c in enumerate(cams)]
    el, az = math.radians(20.0), math.radians(90.0)
    eye = center + dist * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az),
                                    math.sin(el)])
    R, T = look_at(eye, center)
    ref = cams[0]
    scene.input_camera = Camera(K=ref.K, R=R, T=T, width=resolution, height=resolution)
    inp, gt = _render_view(scene.input_camera, cloud, truth, permute=False)
    scene.input_image = inp.image
    # the reference map keeps ground-truth group numbering
    scene.input_map = SegmentationMap(gt, len(names)).validate()
    return scene


def write_scene(scene: SynthScene, outdir):
    """cloud.ply, manifest.json, views/*, input images and ground_truth.json sidecar."""
    outdir = Path(outdir)
    (outdir / "views").mkdir(parents=True, exist_ok=True)
    save_frame(scene.cloud, outdir / "cloud.ply")
    write_image(outdir / "input.png", scene.input_image)
    write_labels(outdir / "input_mask.png", scene.input_map.labels)
    entries = []
    for i, v in enumerate(scene.views):
        img = Path("views") / f"view_{i:02d}.png"
        mask = Path("views") / f"view_{i:02d}_mask.png"
        depth = Path("views") / f"view_{i:02d}_depth.npy"
        write_image(outdir / img, v.image)
        write_labels(outdir / mask, v.seg.labels)
        np.save(outdir / depth, v.depth)
        entries.append((v.camera, img, mask, depth, None))
    save_manifest(outdir / "manifest.json", "input.png", "input_mask.png", entries,
                  region_names=scene.region_names)
    write_sidecar(outdir / "ground_truth.json", scene.truth, scene.materials)
    return outdir
