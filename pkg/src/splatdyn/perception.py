"""Material-group perception: region embeddings, cross-view alignment and
per-kernel multi-view voting with depth-based visibility."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .camera import project_points
from .knn import SpatialHashGrid
from .splat import NO_GROUP, SplatCloud

log = logging.getLogger(__name__)

OCCLUSION_THRESHOLD = 0.1
SMOOTHING_NEIGHBORS = 300


@dataclass(frozen=True)
class SegmentationMap:
    """Per-pixel region labels; 0 is background."""

    labels: np.ndarray
    region_count: int

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.ndim != 2:
            raise ValueError("labels must be a 2-D array")
        object.__setattr__(self, "labels", labels.astype(np.int64))

    @property
    def width(self):
        return self.labels.shape[1]

    @property
    def height(self):
        return self.labels.shape[0]

    def validate(self):
        if self.labels.min() < 0 or self.labels.max() > self.region_count:
            raise ValueError(f"labels outside [0, {self.region_count}]")
        present = np.bincount(self.labels.ravel(), minlength=self.region_count + 1)
        empty = np.flatnonzero(present[1:] == 0) + 1
        if len(empty):
            raise ValueError(f"regions {empty.tolist()} have no pixels")
        return self

    @classmethod
    def from_labels(cls, labels):
        """Renumber the distinct non-zero labels to 1..M, keeping their order."""
        labels = np.asarray(labels, dtype=np.int64)
        ids = np.unique(labels[labels != 0])
        lut = np.zeros(int(labels.max()) + 1 if labels.size else 1, dtype=np.int64)
        lut[ids] = np.arange(1, len(ids) + 1)
        return cls(lut[labels], len(ids))


# --- embedding providers ---------------------------------------------------------

def _masked_mean_rgb(image, mask):
    img = np.asarray(image, dtype=np.float64)
    if img.max() > 1.0:
        img = img / 255.0
    return img[mask].mean(axis=0)


class MeanColorEmbedder:
    """Mean RGB of the masked pixels. Deterministic stand-in for an image encoder."""

    dimension = 3

    def embed(self, image, mask):
        return _masked_mean_rgb(image, mask)


class ColorPositionEmbedder:
    """Mean RGB plus a coarse histogram of where the mask lies in the frame."""

    def __init__(self, bins=4, position_weight=0.5):
        self.bins = bins
        self.position_weight = position_weight
        self.dimension = 3 + bins * bins

    def embed(self, image, mask):
        rgb = _masked_mean_rgb(image, mask)
        rows, cols = np.nonzero(mask)
        h, w = mask.shape
        hist, _, _ = np.histogram2d(rows / h, cols / w, bins=self.bins, range=[[0, 1], [0, 1]])
        hist = hist.ravel() / max(len(rows), 1)
        return np.concatenate([rgb, self.position_weight * hist])


class HttpEmbeddingProvider:
    """POSTs ``{"image": <base64 PNG>}`` and reads ``{"embedding": [...]}``."""

    def __init__(self, url, api_key=None, timeout=30.0, dimension=None, session=None):
        self.url = url
        self.api_key = api_key
        self.timeout = timeout
        self.dimension = dimension
        self.session = session

    def embed(self, image, mask):
        import requests

        from .materials import encode_png

        headers = {"Content-Type": "application/json"}
        if self.api_key:
            headers["Authorization"] = f"Bearer {self.api_key}"
        post = self.session.post if self.session is not None else requests.post
        resp = post(self.url, json={"image": encode_png(image)}, headers=headers,
                    timeout=self.timeout)
        resp.raise_for_status()
        vec = np.asarray(resp.json()["embedding"], dtype=np.float64)
        if self.dimension is not None and vec.shape != (self.dimension,):
            raise ValueError(f"embedding has shape {vec.shape}, expected ({self.dimension},)")
        return vec


# --- segmentation alignment ----------------------------------------------------

def normalize(vec):
    vec = np.asarray(vec, dtype=np.float64)
    if not np.isfinite(vec).all():
        raise ValueError("embedding has non-finite entries")
    norm = np.linalg.norm(vec)
    if norm == 0:
        raise ValueError("embedding is the zero vector")
    return vec / norm


def embed_region(image, seg_map: SegmentationMap, region: int, provider):
    if not 1 <= region <= seg_map.region_count:
        raise ValueError(f"region {region} outside [1, {seg_map.region_count}]")
    mask = seg_map.labels == region
    if not mask.any():
        raise ValueError(f"region {region} is empty")
    img = np.asarray(image)
    masked = img * mask[..., None].astype(img.dtype)
    return normalize(provider.embed(masked, mask))


def embed_all_regions(image, seg_map, provider):
    return [embed_region(image, seg_map, m, provider)
            for m in range(1, seg_map.region_count + 1)]


def align_segmentation(ref_embeds, view_embeds):
    """Map each view region (1-based) to the reference group (1-based) of highest cosine
    similarity. ``np.argmax`` returns the first maximum, which is the lowest group index."""
    if len(ref_embeds) == 0:
        raise ValueError("no reference groups to align to")
    ref = np.stack([normalize(v) for v in ref_embeds])
    if len(view_embeds) == 0:
        return {}
    view = np.stack([normalize(v) for v in view_embeds])
    if view.shape[1] != ref.shape[1]:
        raise ValueError("embedding dimensions differ")
    sim = view @ ref.T
    best = np.argmax(sim, axis=1)
    return {k + 1: int(m) + 1 for k, m in enumerate(best)}


def apply_alignment(seg_map: SegmentationMap, mapping, n_groups):
    """Relabel a view's regions into reference-group ids. Background stays 0."""
    lut = np.zeros(seg_map.region_count + 1, dtype=np.int64)
    for k, m in mapping.items():
        lut[k] = m
    return SegmentationMap(lut[seg_map.labels], n_groups)


# --- projection and aggregation -------------------------------------------------

def _labels_of(seg):
    return seg.labels if hasattr(seg, "labels") else np.asarray(seg)


def vote_counts(positions, views, occlusion_threshold=OCCLUSION_THRESHOLD):
    """(P, G + 1) visible-view vote counts; column 0 (background) is always zero."""
    pos = np.asarray(positions, dtype=np.float64)
    n_groups = max(int(_labels_of(seg).max()) for _, seg, _ in views) if views else 0
    P = len(pos)
    votes = np.zeros(P * (n_groups + 1), dtype=np.int64)
    for cam, seg, depth_map in views:
        labels = _labels_of(seg)
        depth = depth_map.depth if hasattr(depth_map, "depth") else np.asarray(depth_map)
        uv, z, ok = project_points(cam, pos)
        H, W = labels.shape
        col = np.floor(np.where(ok, uv[:, 0], -1)).astype(np.int64)
        row = np.floor(np.where(ok, uv[:, 1], -1)).astype(np.int64)
        inb = ok & (col >= 0) & (col < W) & (row >= 0) & (row < H)
        idx = np.flatnonzero(inb)
        lab = labels[row[idx], col[idx]]
        vis = (np.abs(z[idx] - depth[row[idx], col[idx]]) < occlusion_threshold) & (lab != 0)
        votes += np.bincount(idx[vis] * (n_groups + 1) + lab[vis], minlength=len(votes))
    return votes.reshape(P, n_groups + 1)


def assign_groups(cloud: SplatCloud, views, occlusion_threshold=OCCLUSION_THRESHOLD):
    """Majority vote of aligned labels over the views where each kernel is visible.

    ``views`` holds (Camera, aligned labels, DepthMap) triples. A kernel is
    visible in a view when it projects inside the image onto a non-background
    pixel whose depth differs from its own by less than the threshold. Ties go
    to the lowest group; kernels seen nowhere stay unlabeled.
    """
    if not occlusion_threshold > 0:
        raise ValueError("occlusion threshold must be positive")
    votes = vote_counts(cloud.positions, views, occlusion_threshold)
    if votes.shape[1] <= 1:
        return cloud.replace(group_ids=np.full(cloud.count, NO_GROUP))
    best = np.argmax(votes[:, 1:], axis=1) + 1
    seen = votes[:, 1:].max(axis=1) > 0
    return cloud.replace(group_ids=np.where(seen, best, NO_GROUP))


def fill_occluded(cloud: SplatCloud) -> SplatCloud:
    """Give every unlabeled kernel the group of its nearest labeled kernel."""
    labeled = np.flatnonzero(cloud.labeled)
    if len(labeled) == 0:
        raise ValueError("no labeled kernels to propagate from")
    missing = np.flatnonzero(~cloud.labeled)
    if len(missing) == 0:
        return cloud
    grid = SpatialHashGrid(cloud.positions[labeled])
    nn, _ = grid.query(cloud.positions[missing], 1)
    groups = cloud.group_ids.copy()
    groups[missing] = cloud.group_ids[labeled[nn[:, 0]]]
    return cloud.replace(group_ids=groups)


def smooth_labels(cloud: SplatCloud, k=SMOOTHING_NEIGHBORS) -> SplatCloud:
    """One Jacobi pass of k-nearest-neighbour majority filtering (self included).

    Ties keep the kernel's current group when it is among the leaders,
    otherwise the lowest tied group wins.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    if not cloud.labeled.all():
        raise ValueError("smooth_labels needs every kernel labeled")
    k = min(int(k), cloud.count)
    groups = cloud.group_ids
    n_groups = int(groups.max()) + 1
    nbrs, _ = SpatialHashGrid(cloud.positions).query(cloud.positions, k)
    P = cloud.count
    counts = np.bincount((np.arange(P)[:, None] * n_groups + groups[nbrs]).ravel(),
                         minlength=P * n_groups).reshape(P, n_groups)
    top = counts.max(axis=1)
    keep = counts[np.arange(P), groups] == top
    out = np.where(keep, groups, np.argmax(counts, axis=1))
    return cloud.replace(group_ids=out)


@dataclass
class PerceptionResult:
    cloud: SplatCloud
    alignments: list
    unlabeled_after_vote: int
    changed_by_smoothing: int


def label_cloud(cloud, input_image, input_map, views, provider,
                occlusion_threshold=OCCLUSION_THRESHOLD, k=SMOOTHING_NEIGHBORS):
    """Embed -> align -> assign -> fill -> smooth.

    ``views`` holds (Camera, image, SegmentationMap, DepthMap) per viewpoint
    with each map in its own, unaligned region numbering.
    """
    ref = embed_all_regions(input_image, input_map, provider)
    aligned_views = []
    alignments = []
    for cam, image, seg, depth in views:
        mapping = align_segmentation(ref, embed_all_regions(image, seg, provider))
        alignments.append(mapping)
        aligned_views.append((cam, apply_alignment(seg, mapping, input_map.region_count), depth))
    voted = assign_groups(cloud, aligned_views, occlusion_threshold)
    n_missing = int(np.count_nonzero(~voted.labeled))
    log.info("voting left %d of %d kernels unlabeled", n_missing, cloud.count)
    filled = fill_occluded(voted)
    smoothed = smooth_labels(filled, k)
    changed = int(np.count_nonzero(smoothed.group_ids != filled.group_ids))
    return PerceptionResult(smoothed, alignments, n_missing, changed)
